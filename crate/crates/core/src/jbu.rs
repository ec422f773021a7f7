//! Joint bilateral upsampling and the prime-factorized upsampler stack.
//!
//! For each high-resolution output pixel `q`, the low-resolution map is read
//! at every member `n` of the `(2r+1)²` window around `q` (bilinearly, at the
//! member's coarse coordinate) and mixed with weights
//!
//! ```text
//! w_n = k_range(q, n) · k_spatial(q, n) / Z
//! k_spatial = exp(-|q - n|² / (2 σ_s²))
//! k_range   = softmax_n( h(G[q]) · h(G[n]) / σ_r² )
//! ```
//!
//! where `h` is a small learned projector of guidance pixels. Window members
//! outside the image are dropped. Since the softmax normalizer is shared by
//! all members of a window it cancels against `Z`, so the weights are
//! computed as a single softmax over `h·h/σ_r² − d²/(2σ_s²)`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{bilinear_resample, bilinear_resample_var, init, ops, Grid, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackPlan {
    pub factors: Vec<usize>,
}

impl StackPlan {
    pub fn total_factor(&self) -> usize {
        self.factors.iter().product()
    }
}

/// Prime factorization of `z`, smallest factor first.
pub fn build_stack(z: i64) -> Result<StackPlan> {
    ensure!(
        z >= 1,
        Error::InvalidArgument(format!("upsample factor must be positive, got {z}"))
    );
    let mut z = z as usize;
    let mut factors = Vec::new();
    let mut d = 2;
    while d * d <= z {
        while z % d == 0 {
            factors.push(d);
            z /= d;
        }
        d += 1;
    }
    if z > 1 {
        factors.push(z);
    }
    Ok(StackPlan { factors })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct JbuConfig {
    /// Window radius `r`; the window is `(2r+1)²` high-resolution pixels.
    pub radius: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    /// Initial spatial sigma, in high-resolution pixels.
    pub init_sigma_spatial: f64,
    pub init_sigma_range: f64,
}

impl Default for JbuConfig {
    fn default() -> Self {
        Self {
            radius: 3,
            hidden_dim: 32,
            embed_dim: 32,
            init_sigma_spatial: 1.0,
            init_sigma_range: 1.0,
        }
    }
}

/// One JBU stage. Its learnable values live in a [`ParamStore`] under
/// `<prefix>.log_sigma_spatial`, `<prefix>.log_sigma_range` and
/// `<prefix>.mlp.{w1,b1,w2,b2}`; sigmas are stored as logarithms so they
/// stay positive.
#[derive(Clone, Debug, PartialEq)]
pub struct JbuParams {
    pub prefix: String,
    pub config: JbuConfig,
}

impl JbuParams {
    pub fn new(prefix: impl Into<String>, config: JbuConfig) -> Self {
        Self {
            prefix: prefix.into(),
            config,
        }
    }

    fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let c = &self.config;
        store.insert(
            self.name("log_sigma_spatial"),
            Grid::scalar(c.init_sigma_spatial.ln()),
        );
        store.insert(
            self.name("log_sigma_range"),
            Grid::scalar(c.init_sigma_range.ln()),
        );
        store.insert(self.name("mlp.w1"), init::lecun_matrix(rng, 3, c.hidden_dim));
        store.insert(self.name("mlp.b1"), Grid::zeros(1, 1, c.hidden_dim));
        // Scaled by 1/√D so initial range logits are O(1) rather than a
        // saturated softmax.
        let mut w2 = init::lecun_matrix(rng, c.hidden_dim, c.embed_dim);
        let s = (c.embed_dim as f64).sqrt().recip();
        w2.data_mut().iter_mut().for_each(|v| *v *= s);
        store.insert(self.name("mlp.w2"), w2);
        store.insert(self.name("mlp.b2"), Grid::zeros(1, 1, c.embed_dim));
    }

    pub fn sigma_spatial(&self, store: &ParamStore) -> Result<f64> {
        Ok(store.value(&self.name("log_sigma_spatial"))?.item().exp())
    }

    pub fn sigma_range(&self, store: &ParamStore) -> Result<f64> {
        Ok(store.value(&self.name("log_sigma_range"))?.item().exp())
    }

    /// Range projector `h` applied to every guidance pixel.
    pub fn range_embedding(&self, tape: &mut Tape, store: &ParamStore, guidance: &Grid) -> Result<Var> {
        ensure!(
            guidance.channels() == 3,
            Error::ShapeMismatch(format!("guidance must be RGB, got {:?}", guidance.shape()))
        );
        let g = tape.constant(guidance.clone());
        let w1 = tape.param(store, &self.name("mlp.w1"))?;
        let b1 = tape.param(store, &self.name("mlp.b1"))?;
        let w2 = tape.param(store, &self.name("mlp.w2"))?;
        let b2 = tape.param(store, &self.name("mlp.b2"))?;
        let h = ops::linear(tape, g, w1)?;
        let h = ops::add_bias(tape, h, b1)?;
        let h = ops::silu(tape, h);
        let h = ops::linear(tape, h, w2)?;
        ops::add_bias(tape, h, b2)
    }

    /// Upsamples `f_lr` by `factor` under `guidance`, which must be exactly
    /// `factor` times larger on each side.
    pub fn upsample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_lr: Var,
        guidance: &Grid,
        factor: usize,
    ) -> Result<Var> {
        let (h, w, _) = tape.value(f_lr).shape();
        check_guidance(h, w, guidance, factor)?;
        let up = bilinear_resample_var(tape, f_lr, guidance.height(), guidance.width())?;
        let emb = self.range_embedding(tape, store, guidance)?;
        let ls = tape.param(store, &self.name("log_sigma_spatial"))?;
        let lr = tape.param(store, &self.name("log_sigma_range"))?;
        jbu_mix(tape, up, emb, ls, lr, self.config.radius)
    }

    /// Normalized window weights at every output pixel.
    pub fn kernel_weights(&self, store: &ParamStore, guidance: &Grid) -> Result<KernelWeights> {
        let mut tape = Tape::new();
        let emb = self.range_embedding(&mut tape, store, guidance)?;
        let emb = tape.value(emb);
        Ok(compute_weights(
            emb,
            self.sigma_spatial(store)?,
            self.sigma_range(store)?,
            self.config.radius,
        ))
    }
}

fn check_guidance(h: usize, w: usize, guidance: &Grid, factor: usize) -> Result<()> {
    ensure!(
        factor >= 2,
        Error::InvalidArgument(format!("JBU factor must be at least 2, got {factor}"))
    );
    ensure!(
        guidance.height() == h * factor && guidance.width() == w * factor,
        Error::ShapeMismatch(format!(
            "guidance {}x{} for a {h}x{w} map at factor {factor}",
            guidance.height(),
            guidance.width()
        ))
    );
    ensure!(
        guidance.is_finite(),
        Error::NonFinite("JBU guidance".into())
    );
    Ok(())
}

/// Per-pixel window weights, `(2r+1)²` per pixel in row-major window order;
/// members outside the image have weight 0.
#[derive(Clone, Debug)]
pub struct KernelWeights {
    pub height: usize,
    pub width: usize,
    pub radius: usize,
    pub weights: Vec<f64>,
}

impl KernelWeights {
    pub fn diameter(&self) -> usize {
        2 * self.radius + 1
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        let k = self.diameter() * self.diameter();
        let p = y * self.width + x;
        &self.weights[p * k..(p + 1) * k]
    }
}

fn compute_weights(emb: &Grid, sigma_s: f64, sigma_r: f64, radius: usize) -> KernelWeights {
    let (h, w, _) = emb.shape();
    let d = 2 * radius + 1;
    let a = 1.0 / (sigma_r * sigma_r);
    let b = 0.5 / (sigma_s * sigma_s);
    let r = radius as isize;
    let mut weights = vec![0.0; h * w * d * d];
    let mut logits = vec![f64::NEG_INFINITY; d * d];
    for y in 0..h {
        for x in 0..w {
            let center = emb.pixel(y, x);
            let mut max = f64::NEG_INFINITY;
            for dy in -r..=r {
                for dx in -r..=r {
                    let k = ((dy + r) * d as isize + dx + r) as usize;
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    logits[k] = if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        f64::NEG_INFINITY
                    } else {
                        let dot: f64 = center
                            .iter()
                            .zip(emb.pixel(ny as usize, nx as usize))
                            .map(|(p, q)| p * q)
                            .sum();
                        a * dot - b * (dy * dy + dx * dx) as f64
                    };
                    max = max.max(logits[k]);
                }
            }
            let out = &mut weights[(y * w + x) * d * d..(y * w + x + 1) * d * d];
            let mut total = 0.0;
            for (o, &l) in out.iter_mut().zip(&logits) {
                *o = if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() };
                total += *o;
            }
            out.iter_mut().for_each(|o| *o /= total);
        }
    }
    KernelWeights {
        height: h,
        width: w,
        radius,
        weights,
    }
}

/// Bilateral mixing of `up` (low-res map already bilinearly resampled to the
/// guidance grid) with weights from the range embedding `emb` and the two
/// log-sigmas.
fn jbu_mix(tape: &mut Tape, up: Var, emb: Var, log_ss: Var, log_sr: Var, radius: usize) -> Result<Var> {
    let (upv, embv) = (tape.value(up), tape.value(emb));
    ensure!(
        upv.height() == embv.height() && upv.width() == embv.width(),
        Error::ShapeMismatch(format!(
            "JBU values {:?} vs embedding {:?}",
            upv.shape(),
            embv.shape()
        ))
    );
    let ss = tape.value(log_ss).item().exp();
    let sr = tape.value(log_sr).item().exp();
    let kw = compute_weights(embv, ss, sr, radius);
    let (h, w, c) = upv.shape();
    let d = kw.diameter();
    let r = radius as isize;
    let mut out = Grid::zeros(h, w, c);
    for y in 0..h {
        for x in 0..w {
            let wts = kw.at(y, x);
            let dst = out.pixel_mut(y, x);
            for dy in -r..=r {
                for dx in -r..=r {
                    let wt = wts[((dy + r) * d as isize + dx + r) as usize];
                    if wt == 0.0 {
                        continue;
                    }
                    let src = upv.pixel((y as isize + dy) as usize, (x as isize + dx) as usize);
                    for (o, s) in dst.iter_mut().zip(src) {
                        *o += wt * s;
                    }
                }
            }
        }
    }

    Ok(tape.op(&[up, emb, log_ss, log_sr], out, move |ctx| {
        let (upv, embv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (h, w, c) = upv.shape();
        let e = embv.channels();
        let a = 1.0 / (sr * sr);
        let b = 0.5 / (ss * ss);
        let mut g_up = Grid::zeros(h, w, c);
        let mut g_emb = Grid::zeros(h, w, e);
        let (mut g_ls, mut g_lr) = (0.0, 0.0);
        let mut dlogit = vec![0.0; d * d];
        for y in 0..h {
            for x in 0..w {
                let wts = kw.at(y, x);
                let gout = g.pixel(y, x);
                // dL/dw_n = g · up_n; softmax backward gives dL/dlogit_n.
                let mut mean = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = ((dy + r) * d as isize + dx + r) as usize;
                        if wts[k] == 0.0 {
                            dlogit[k] = 0.0;
                            continue;
                        }
                        let (ny, nx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                        let dw: f64 = gout.iter().zip(upv.pixel(ny, nx)).map(|(p, q)| p * q).sum();
                        dlogit[k] = dw;
                        mean += wts[k] * dw;
                        if ctx.needs(0) {
                            for (o, gg) in g_up.pixel_mut(ny, nx).iter_mut().zip(gout) {
                                *o += wts[k] * gg;
                            }
                        }
                    }
                }
                for dy in -r..=r {
                    for dx in -r..=r {
                        let k = ((dy + r) * d as isize + dx + r) as usize;
                        if wts[k] == 0.0 {
                            continue;
                        }
                        let dl = wts[k] * (dlogit[k] - mean);
                        if dl == 0.0 {
                            continue;
                        }
                        let (ny, nx) = ((y as isize + dy) as usize, (x as isize + dx) as usize);
                        let d2 = (dy * dy + dx * dx) as f64;
                        // logit = a·<e_q, e_n> − b·d², a = exp(−2·ls_r), b = exp(−2·ls_s)/2
                        let ec = embv.pixel(y, x);
                        let en = embv.pixel(ny, nx);
                        let dot: f64 = ec.iter().zip(en).map(|(p, q)| p * q).sum();
                        g_lr += dl * (-2.0 * a * dot);
                        g_ls += dl * (2.0 * b * d2);
                        if ctx.needs(1) {
                            for i in 0..e {
                                let gc = dl * a * en[i];
                                let gn = dl * a * ec[i];
                                g_emb.data_mut()[(y * w + x) * e + i] += gc;
                                g_emb.data_mut()[(ny * w + nx) * e + i] += gn;
                            }
                        }
                    }
                }
            }
        }
        vec![
            Some(g_up),
            Some(g_emb),
            Some(Grid::scalar(g_ls)),
            Some(Grid::scalar(g_lr)),
        ]
    }))
}

/// A stack of JBU stages, one per prime factor of the total upsample factor,
/// each with its own parameters (`<prefix>.<stage index>`).
#[derive(Clone, Debug, PartialEq)]
pub struct JbuStack {
    pub plan: StackPlan,
    pub stages: Vec<JbuParams>,
}

impl JbuStack {
    pub fn new(prefix: &str, plan: StackPlan, config: &JbuConfig) -> Self {
        let stages = (0..plan.factors.len())
            .map(|i| JbuParams::new(format!("{prefix}.{i}"), config.clone()))
            .collect();
        Self { plan, stages }
    }

    pub fn for_factor(prefix: &str, z: usize, config: &JbuConfig) -> Result<Self> {
        Ok(Self::new(prefix, build_stack(z as i64)?, config))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        for s in &self.stages {
            s.init(store, rng);
        }
    }

    /// Applies the stages in plan order. The guidance for each stage is
    /// `image` resampled to that stage's output size, so the image side must
    /// be a multiple of every intermediate output side.
    pub fn upsample(&self, tape: &mut Tape, store: &ParamStore, f_lr: Var, image: &Grid) -> Result<Var> {
        let mut cur = f_lr;
        for (stage, &factor) in self.stages.iter().zip(&self.plan.factors) {
            let (h, w, _) = tape.value(cur).shape();
            let (oh, ow) = (h * factor, w * factor);
            ensure!(
                image.height() % oh == 0 && image.width() % ow == 0,
                Error::ShapeMismatch(format!(
                    "image {}x{} does not reduce cleanly to guidance {oh}x{ow}",
                    image.height(),
                    image.width()
                ))
            );
            let guidance = bilinear_resample(image, oh, ow)?;
            cur = stage.upsample(tape, store, cur, &guidance, factor)?;
        }
        Ok(cur)
    }
}

/// Forward-only convenience: upsample `f_lr` through `stack`.
pub fn jbu_stack_upsample(f_lr: &Grid, image: &Grid, stack: &JbuStack, store: &ParamStore) -> Result<Grid> {
    let mut tape = Tape::new();
    let v = tape.constant(f_lr.clone());
    let out = stack.upsample(&mut tape, store, v, image)?;
    Ok(tape.value(out).clone())
}

/// Forward-only convenience: one JBU stage.
pub fn jbu_upsample(
    f_lr: &Grid,
    guidance: &Grid,
    params: &JbuParams,
    store: &ParamStore,
    factor: usize,
) -> Result<Grid> {
    let mut tape = Tape::new();
    let v = tape.constant(f_lr.clone());
    let out = params.upsample(&mut tape, store, v, guidance, factor)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn stage(seed: u64) -> (JbuParams, ParamStore) {
        let p = JbuParams::new("jbu.0", JbuConfig::default());
        let mut store = ParamStore::new();
        p.init(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        (p, store)
    }

    #[test]
    fn prime_factor_plans() {
        assert_eq!(build_stack(14).unwrap().factors, vec![2, 7]);
        assert_eq!(build_stack(8).unwrap().factors, vec![2, 2, 2]);
        assert_eq!(build_stack(12).unwrap().factors, vec![2, 2, 3]);
        assert!(build_stack(1).unwrap().factors.is_empty());
        assert!(build_stack(0).is_err());
        assert!(build_stack(-3).is_err());
    }

    #[test]
    fn single_value_input_gives_constant_output() {
        let (p, store) = stage(1);
        let f = Grid::from_vec(1, 1, 3, vec![0.3, -1.2, 2.0]).unwrap();
        let guidance = Grid::from_fn(2, 2, 3, |y, x, c| (y + 2 * x + c) as f64 * 0.2);
        let out = jbu_upsample(&f, &guidance, &p, &store, 2).unwrap();
        for q in 0..out.pixels() {
            for (a, b) in out.token(q).iter().zip(f.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn weights_sum_to_one() {
        let (p, store) = stage(2);
        let guidance = Grid::from_fn(8, 8, 3, |y, x, c| ((y * 3 + x * 5 + c) % 7) as f64 / 7.0);
        let kw = p.kernel_weights(&store, &guidance).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let s: f64 = kw.at(y, x).iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn size_mismatch_and_bad_factor_are_errors() {
        let (p, store) = stage(3);
        let f = Grid::zeros(2, 2, 1);
        assert!(jbu_upsample(&f, &Grid::zeros(5, 4, 3), &p, &store, 2).is_err());
        assert!(jbu_upsample(&f, &Grid::zeros(2, 2, 3), &p, &store, 1).is_err());
        let mut bad = Grid::zeros(4, 4, 3);
        bad.set(1, 1, 0, f64::NAN);
        assert!(matches!(
            jbu_upsample(&f, &bad, &p, &store, 2),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn empty_plan_is_identity() {
        let stack = JbuStack::new("jbu", build_stack(1).unwrap(), &JbuConfig::default());
        let f = Grid::from_fn(3, 3, 2, |y, x, c| (y * 3 + x + c) as f64);
        let out = jbu_stack_upsample(&f, &Grid::zeros(6, 6, 3), &stack, &ParamStore::new()).unwrap();
        assert_eq!(out, f);
    }

    #[test]
    fn stack_shapes_follow_the_plan() {
        let plan = StackPlan { factors: vec![2, 3] };
        let stack = JbuStack::new("jbu", plan, &JbuConfig::default());
        let mut store = ParamStore::new();
        stack.init(&mut store, &mut ChaCha8Rng::seed_from_u64(4));
        let f = Grid::from_fn(2, 2, 2, |y, x, c| (y * 2 + x) as f64 - c as f64);
        let image = Grid::from_fn(24, 24, 3, |y, x, _| ((y / 6 + x / 6) % 2) as f64);
        let out = jbu_stack_upsample(&f, &image, &stack, &store).unwrap();
        assert_eq!(out.shape(), (12, 12, 2));
        assert!(jbu_stack_upsample(&f, &Grid::zeros(18, 18, 3), &stack, &store).is_err());
    }
}
