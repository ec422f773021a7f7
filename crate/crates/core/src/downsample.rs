//! Learned attention pooling from the upsampled resolution back to the
//! featurizer's grid.
//!
//! Low-resolution cell `(i, j)` pools the `k × k` window starting at
//! `(i·s − ⌊(k − s)/2⌋, j·s − ⌊(k − s)/2⌋)`, clipped to the image, with
//! softmax weights over `salience · f + bias[window offset]`. The output is
//! therefore a convex combination of the window's feature vectors.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{Grid, ParamStore, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownsamplerParams {
    pub prefix: String,
    pub channels: usize,
    /// Window side; odd and at least `factor`.
    pub kernel: usize,
    pub factor: usize,
}

impl DownsamplerParams {
    pub fn new(prefix: impl Into<String>, channels: usize, kernel: usize, factor: usize) -> Result<Self> {
        ensure!(
            factor >= 1 && kernel >= factor && kernel % 2 == 1,
            Error::InvalidArgument(format!(
                "downsampler needs an odd window of at least the factor, got k={kernel}, factor={factor}"
            ))
        );
        Ok(Self {
            prefix: prefix.into(),
            channels,
            kernel,
            factor,
        })
    }

    pub fn name(&self, field: &str) -> String {
        format!("{}.{field}", self.prefix)
    }

    /// Zero salience and zero bias: uniform pooling over each window.
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(self.name("salience"), Grid::zeros(self.channels, 1, 1));
        store.insert(self.name("bias"), Grid::zeros(self.kernel, self.kernel, 1));
    }

    fn offset(&self) -> isize {
        ((self.kernel - self.factor) / 2) as isize
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_hr: Var) -> Result<Var> {
        let sal = tape.param(store, &self.name("salience"))?;
        let bias = tape.param(store, &self.name("bias"))?;
        attention_downsample_var(tape, f_hr, sal, bias, self)
    }

    /// Pooling weights per output cell as `(hi-res pixel index, weight)`.
    pub fn weights(&self, f_hr: &Grid, salience: &Grid, bias: &Grid) -> Result<Vec<Vec<(usize, usize, f64)>>> {
        self.check(f_hr, salience, bias)?;
        let (h, w, c) = f_hr.shape();
        let (oh, ow) = (h / self.factor, w / self.factor);
        let k = self.kernel as isize;
        let s = self.factor as isize;
        let off = self.offset();
        let mut rows = Vec::with_capacity(oh * ow);
        for i in 0..oh as isize {
            for j in 0..ow as isize {
                let mut cells = Vec::with_capacity((k * k) as usize);
                let mut max = f64::NEG_INFINITY;
                for ky in 0..k {
                    let y = i * s - off + ky;
                    if y < 0 || y >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let x = j * s - off + kx;
                        if x < 0 || x >= w as isize {
                            continue;
                        }
                        let p = y as usize * w + x as usize;
                        let b = (ky * k + kx) as usize;
                        let logit = f_hr
                            .token(p)
                            .iter()
                            .zip(salience.data())
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            + bias.data()[b];
                        max = max.max(logit);
                        cells.push((p, b, logit));
                    }
                }
                let mut total = 0.0;
                for cell in cells.iter_mut() {
                    cell.2 = (cell.2 - max).exp();
                    total += cell.2;
                }
                cells.iter_mut().for_each(|cell| cell.2 /= total);
                rows.push(cells);
            }
        }
        debug_assert_eq!(c, salience.len());
        Ok(rows)
    }

    fn check(&self, f_hr: &Grid, salience: &Grid, bias: &Grid) -> Result<()> {
        let (h, w, c) = f_hr.shape();
        ensure!(
            h % self.factor == 0 && w % self.factor == 0 && h > 0 && w > 0,
            Error::InvalidArgument(format!(
                "{h}x{w} map is not divisible by downsample factor {}",
                self.factor
            ))
        );
        ensure!(
            c == self.channels && salience.len() == c && bias.len() == self.kernel * self.kernel,
            Error::ShapeMismatch(format!(
                "downsampler for {} channels, k={}: map {:?}, salience {:?}, bias {:?}",
                self.channels,
                self.kernel,
                f_hr.shape(),
                salience.shape(),
                bias.shape()
            ))
        );
        Ok(())
    }
}

fn attention_downsample_var(
    tape: &mut Tape,
    f_hr: Var,
    sal: Var,
    bias: Var,
    params: &DownsamplerParams,
) -> Result<Var> {
    let fv = tape.value(f_hr);
    let rows = params.weights(fv, tape.value(sal), tape.value(bias))?;
    let (h, w, c) = fv.shape();
    let (oh, ow) = (h / params.factor, w / params.factor);
    let mut out = Grid::zeros(oh, ow, c);
    for (q, row) in rows.iter().enumerate() {
        let dst = out.token_mut(q);
        for &(p, _, a) in row {
            for (o, v) in dst.iter_mut().zip(fv.token(p)) {
                *o += a * v;
            }
        }
    }
    Ok(tape.op(&[f_hr, sal, bias], out, move |ctx| {
        let (fv, salv, biasv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.inputs[2], ctx.grad);
        let mut gf = Grid::zeros(fv.height(), fv.width(), fv.channels());
        let mut gs = vec![0.0; salv.len()];
        let mut gb = vec![0.0; biasv.len()];
        let mut da = Vec::new();
        for (q, row) in rows.iter().enumerate() {
            let gq = g.token(q);
            da.clear();
            let mut mean = 0.0;
            for &(p, _, a) in row {
                let d: f64 = gq.iter().zip(fv.token(p)).map(|(x, y)| x * y).sum();
                mean += a * d;
                da.push(d);
            }
            for (&(p, b, a), &d) in row.iter().zip(&da) {
                let dl = a * (d - mean);
                let fp = fv.token(p).to_vec();
                let dst = gf.token_mut(p);
                for ((o, gg), sv) in dst.iter_mut().zip(gq).zip(salv.data()) {
                    *o += a * gg + dl * sv;
                }
                for (o, f) in gs.iter_mut().zip(&fp) {
                    *o += dl * f;
                }
                gb[b] += dl;
            }
        }
        let (sh, sw, sc) = salv.shape();
        let (bh, bw, bc) = biasv.shape();
        vec![
            Some(gf),
            Some(Grid::from_vec(sh, sw, sc, gs).unwrap()),
            Some(Grid::from_vec(bh, bw, bc, gb).unwrap()),
        ]
    }))
}

/// Forward-only attention downsampling with parameters read from `store`.
pub fn attention_downsample(f_hr: &Grid, p: &DownsamplerParams, store: &ParamStore) -> Result<Grid> {
    let mut tape = Tape::new();
    let v = tape.constant(f_hr.clone());
    let out = p.forward(&mut tape, store, v)?;
    Ok(tape.value(out).clone())
}
