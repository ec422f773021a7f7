//! The refinement block: the residual-upsampled map and the tile mosaic are
//! concatenated into `2C`-dimensional tokens, passed through one pre-norm
//! transformer block (2D local attention, then SwiGLU), and the first `C`
//! channels are returned.
//!
//! The output projections start at zero, so an untrained block returns the
//! residual input unchanged.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{init, ops, Grid, ParamStore, Tape, Var};

const NORM_EPS: f64 = 1e-6;

/// Which sub-layers the block contains.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockMode {
    /// A single residual token-wise linear layer.
    LinearOnly,
    AttentionOnly,
    MlpOnly,
    #[default]
    AttentionMlp,
}

impl BlockMode {
    pub const ALL: [BlockMode; 4] = [
        BlockMode::LinearOnly,
        BlockMode::AttentionOnly,
        BlockMode::MlpOnly,
        BlockMode::AttentionMlp,
    ];

    fn has_attention(self) -> bool {
        matches!(self, BlockMode::AttentionOnly | BlockMode::AttentionMlp)
    }

    fn has_mlp(self) -> bool {
        matches!(self, BlockMode::MlpOnly | BlockMode::AttentionMlp)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct SharpenConfig {
    /// Side of the square attention window; must be odd.
    pub window: usize,
    #[serde(default)]
    pub mode: BlockMode,
}

impl Default for SharpenConfig {
    fn default() -> Self {
        Self {
            window: 5,
            mode: BlockMode::AttentionMlp,
        }
    }
}

/// SwiGLU hidden width for token dimension `dim`: `8·dim/3` rounded up to a
/// multiple of 8.
pub fn swiglu_hidden(dim: usize) -> usize {
    (8 * dim).div_ceil(3).div_ceil(8) * 8
}

/// Parameters of one refinement block over `2C`-dimensional tokens, stored
/// under `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpenParams {
    pub prefix: String,
    pub channels: usize,
    pub config: SharpenConfig,
}

impl SharpenParams {
    pub fn new(prefix: impl Into<String>, channels: usize, config: SharpenConfig) -> Result<Self> {
        ensure!(
            config.window % 2 == 1,
            Error::InvalidArgument(format!("attention window must be odd, got {}", config.window))
        );
        ensure!(
            channels > 0,
            Error::InvalidArgument("channel count must be positive".into())
        );
        Ok(Self {
            prefix: prefix.into(),
            channels,
            config,
        })
    }

    pub fn token_dim(&self) -> usize {
        2 * self.channels
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Registers parameters; output projections are zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let d = self.token_dim();
        let mode = self.config.mode;
        if mode == BlockMode::LinearOnly {
            store.insert(self.name("linear.w"), Grid::zeros(d, d, 1));
        }
        if mode.has_attention() {
            store.insert(self.name("norm1.gain"), Grid::filled(1, 1, d, 1.0));
            for w in ["attn.wq", "attn.wk", "attn.wv"] {
                store.insert(self.name(w), init::lecun_matrix(rng, d, d));
            }
            store.insert(self.name("attn.wo"), Grid::zeros(d, d, 1));
        }
        if mode.has_mlp() {
            let hidden = swiglu_hidden(d);
            store.insert(self.name("norm2.gain"), Grid::filled(1, 1, d, 1.0));
            store.insert(self.name("mlp.w1"), init::lecun_matrix(rng, d, hidden));
            store.insert(self.name("mlp.w3"), init::lecun_matrix(rng, d, hidden));
            store.insert(self.name("mlp.w2"), Grid::zeros(hidden, d, 1));
        }
    }

    /// Single-head local self-attention over `tokens`, including the
    /// query/key/value and output projections.
    pub fn local_attention(&self, tape: &mut Tape, store: &ParamStore, tokens: Var) -> Result<Var> {
        let wq = tape.param(store, &self.name("attn.wq"))?;
        let wk = tape.param(store, &self.name("attn.wk"))?;
        let wv = tape.param(store, &self.name("attn.wv"))?;
        let wo = tape.param(store, &self.name("attn.wo"))?;
        let q = ops::linear(tape, tokens, wq)?;
        let k = ops::linear(tape, tokens, wk)?;
        let v = ops::linear(tape, tokens, wv)?;
        let o = attention_core(tape, q, k, v, self.config.window)?;
        ops::linear(tape, o, wo)
    }

    fn mlp(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = tape.param(store, &self.name("mlp.w1"))?;
        let w3 = tape.param(store, &self.name("mlp.w3"))?;
        let w2 = tape.param(store, &self.name("mlp.w2"))?;
        let a = ops::linear(tape, x, w1)?;
        let b = ops::linear(tape, x, w3)?;
        let h = ops::swiglu_gate(tape, a, b)?;
        ops::linear(tape, h, w2)
    }

    /// Runs the block on `[residual_up ‖ mosaic]` and keeps the first `C`
    /// channels.
    pub fn combine(&self, tape: &mut Tape, store: &ParamStore, residual_up: Var, mosaic: Var) -> Result<Var> {
        let (rv, mv) = (tape.value(residual_up), tape.value(mosaic));
        rv.check_same_shape(mv, "featsharp_combine")?;
        ensure!(
            rv.channels() == self.channels,
            Error::ShapeMismatch(format!(
                "block built for {} channels, got {}",
                self.channels,
                rv.channels()
            ))
        );
        let mut x = ops::concat_channels(tape, residual_up, mosaic)?;
        let mode = self.config.mode;
        if mode == BlockMode::LinearOnly {
            let w = tape.param(store, &self.name("linear.w"))?;
            let y = ops::linear(tape, x, w)?;
            x = ops::add(tape, x, y)?;
        }
        if mode.has_attention() {
            let g = tape.param(store, &self.name("norm1.gain"))?;
            let n = ops::rms_norm(tape, x, g, NORM_EPS)?;
            let a = self.local_attention(tape, store, n)?;
            x = ops::add(tape, x, a)?;
        }
        if mode.has_mlp() {
            let g = tape.param(store, &self.name("norm2.gain"))?;
            let n = ops::rms_norm(tape, x, g, NORM_EPS)?;
            let m = self.mlp(tape, store, n)?;
            x = ops::add(tape, x, m)?;
        }
        ops::slice_channels(tape, x, 0, self.channels)
    }
}

/// Forward-only [`SharpenParams::combine`].
pub fn featsharp_combine(
    residual_up: &Grid,
    mosaic: &Grid,
    params: &SharpenParams,
    store: &ParamStore,
) -> Result<Grid> {
    let mut tape = Tape::new();
    let r = tape.constant(residual_up.clone());
    let m = tape.constant(mosaic.clone());
    let out = params.combine(&mut tape, store, r, m)?;
    Ok(tape.value(out).clone())
}

/// Members of the `window × window` neighborhood of `(y, x)` clipped to the
/// grid, as flat pixel indices in row-major order.
fn window_members(y: usize, x: usize, h: usize, w: usize, window: usize, out: &mut Vec<usize>) {
    out.clear();
    let r = window / 2;
    for ny in y.saturating_sub(r)..(y + r + 1).min(h) {
        for nx in x.saturating_sub(r)..(x + r + 1).min(w) {
            out.push(ny * w + nx);
        }
    }
}

/// Softmax weights of every query over its clipped window; row `p` lists
/// `(key index, weight)` pairs.
pub fn attention_weights(q: &Grid, k: &Grid, window: usize) -> Result<Vec<Vec<(usize, f64)>>> {
    ensure!(
        window % 2 == 1,
        Error::InvalidArgument(format!("attention window must be odd, got {window}"))
    );
    q.check_same_shape(k, "attention q/k")?;
    let (h, w, d) = q.shape();
    let scale = 1.0 / (d as f64).sqrt();
    let mut members = Vec::new();
    let mut rows = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            window_members(y, x, h, w, window, &mut members);
            let qp = q.token(y * w + x);
            let logits: Vec<f64> = members
                .iter()
                .map(|&n| scale * qp.iter().zip(k.token(n)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            rows.push(
                members
                    .iter()
                    .zip(exps)
                    .map(|(&n, e)| (n, e / total))
                    .collect(),
            );
        }
    }
    Ok(rows)
}

/// Windowed scaled-dot-product attention on already projected `q`, `k`, `v`.
pub fn attention_core(tape: &mut Tape, q: Var, k: Var, v: Var, window: usize) -> Result<Var> {
    let (qv, kv, vv) = (tape.value(q), tape.value(k), tape.value(v));
    ensure!(
        qv.is_finite() && kv.is_finite() && vv.is_finite(),
        Error::NonFinite("attention inputs".into())
    );
    ensure!(
        vv.height() == qv.height() && vv.width() == qv.width(),
        Error::ShapeMismatch(format!("attention q {:?} vs v {:?}", qv.shape(), vv.shape()))
    );
    let weights = attention_weights(qv, kv, window)?;
    let (h, w, dv) = vv.shape();
    let mut out = Grid::zeros(h, w, dv);
    for (p, row) in weights.iter().enumerate() {
        let dst = out.token_mut(p);
        for &(n, a) in row {
            for (o, s) in dst.iter_mut().zip(vv.token(n)) {
                *o += a * s;
            }
        }
    }
    Ok(tape.op(&[q, k, v], out, move |ctx| {
        let (qv, kv, vv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
        let d = qv.channels();
        let scale = 1.0 / (d as f64).sqrt();
        let mut gq = Grid::zeros(qv.height(), qv.width(), d);
        let mut gk = Grid::zeros(kv.height(), kv.width(), d);
        let mut gv = Grid::zeros(vv.height(), vv.width(), vv.channels());
        let mut da = Vec::new();
        for (p, row) in weights.iter().enumerate() {
            let gp = g.token(p);
            da.clear();
            let mut mean = 0.0;
            for &(n, a) in row {
                let dan: f64 = gp.iter().zip(vv.token(n)).map(|(x, y)| x * y).sum();
                mean += a * dan;
                da.push(dan);
                for (o, gg) in gv.token_mut(n).iter_mut().zip(gp) {
                    *o += a * gg;
                }
            }
            let qp = qv.token(p);
            for (&(n, a), &dan) in row.iter().zip(&da) {
                let dl = a * (dan - mean) * scale;
                if dl == 0.0 {
                    continue;
                }
                for (o, kk) in gq.token_mut(p).iter_mut().zip(kv.token(n)) {
                    *o += dl * kk;
                }
                for (o, qq) in gk.token_mut(n).iter_mut().zip(qp) {
                    *o += dl * qq;
                }
            }
        }
        vec![Some(gq), Some(gk), Some(gv)]
    }))
}
