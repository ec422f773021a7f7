//! Differentiable elementwise, token-wise and reduction operations.
//!
//! A grid of shape `H × W × C` is treated as `H·W` tokens of dimension `C`
//! by the token-wise ops (`linear`, `rms_norm`, ...). Weight matrices are
//! single-channel grids of shape `in × out`.

use super::{Grid, Tape, Var};
use crate::error::{ensure, Error, Result};

pub fn add(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x + y)?;
    Ok(tape.op(&[a, b], value, |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.clone())]
    }))
}

pub fn sub(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x - y)?;
    Ok(tape.op(&[a, b], value, |ctx| {
        vec![Some(ctx.grad.clone()), Some(ctx.grad.scale(-1.0))]
    }))
}

pub fn mul(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let value = tape.value(a).zip_map(tape.value(b), |x, y| x * y)?;
    Ok(tape.op(&[a, b], value, |ctx| {
        let ga = ctx
            .needs(0)
            .then(|| ctx.grad.zip_map(ctx.inputs[1], |g, y| g * y).unwrap());
        let gb = ctx
            .needs(1)
            .then(|| ctx.grad.zip_map(ctx.inputs[0], |g, x| g * x).unwrap());
        vec![ga, gb]
    }))
}

pub fn scale(tape: &mut Tape, a: Var, s: f64) -> Var {
    let value = tape.value(a).scale(s);
    tape.op(&[a], value, move |ctx| vec![Some(ctx.grad.scale(s))])
}

/// Sum of all entries, as a scalar.
pub fn sum(tape: &mut Tape, a: Var) -> Var {
    let value = Grid::scalar(tape.value(a).sum());
    tape.op(&[a], value, |ctx| {
        let (h, w, c) = ctx.inputs[0].shape();
        vec![Some(Grid::filled(h, w, c, ctx.grad.item()))]
    })
}

pub fn mean(tape: &mut Tape, a: Var) -> Var {
    let n = tape.value(a).len() as f64;
    let s = sum(tape, a);
    scale(tape, s, 1.0 / n)
}

/// Sum of a list of scalars (or same-shaped grids).
pub fn add_all(tape: &mut Tape, vars: &[Var]) -> Result<Var> {
    ensure!(
        !vars.is_empty(),
        Error::InvalidArgument("add_all of an empty list".into())
    );
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = add(tape, acc, v)?;
    }
    Ok(acc)
}

/// Mean squared error between two same-shaped grids, as a scalar.
pub fn mse(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let va = tape.value(a);
    let vb = tape.value(b);
    va.check_same_shape(vb, "mse")?;
    let n = va.len() as f64;
    let err: f64 = va
        .data()
        .iter()
        .zip(vb.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    Ok(tape.op(&[a, b], Grid::scalar(err), move |ctx| {
        let k = 2.0 * ctx.grad.item() / n;
        let diff = ctx.inputs[0].zip_map(ctx.inputs[1], |x, y| k * (x - y)).unwrap();
        let neg = ctx.needs(1).then(|| diff.scale(-1.0));
        vec![Some(diff), neg]
    }))
}

/// Token-wise affine map `x · w` with `w` of shape `in × out`.
pub fn linear(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let value = linear_forward(tape.value(x), tape.value(w))?;
    Ok(tape.op(&[x, w], value, |ctx| {
        let (xv, wv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let (cin, cout) = (wv.height(), wv.width());
        let n = xv.pixels();
        let gx = ctx.needs(0).then(|| {
            let mut gx = Grid::zeros(xv.height(), xv.width(), cin);
            for p in 0..n {
                let gp = g.token(p);
                let dst = gx.token_mut(p);
                for (i, d) in dst.iter_mut().enumerate() {
                    let row = &wv.data()[i * cout..(i + 1) * cout];
                    *d = row.iter().zip(gp).map(|(a, b)| a * b).sum();
                }
            }
            gx
        });
        let gw = ctx.needs(1).then(|| {
            let mut gw = Grid::zeros(cin, cout, 1);
            let gwd = gw.data_mut();
            for p in 0..n {
                let xp = xv.token(p);
                let gp = g.token(p);
                for (i, &xi) in xp.iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    let row = &mut gwd[i * cout..(i + 1) * cout];
                    for (r, &go) in row.iter_mut().zip(gp) {
                        *r += xi * go;
                    }
                }
            }
            gw
        });
        vec![gx, gw]
    }))
}

pub(crate) fn linear_forward(x: &Grid, w: &Grid) -> Result<Grid> {
    ensure!(
        w.channels() == 1 && w.height() == x.channels(),
        Error::ShapeMismatch(format!(
            "linear: tokens of dim {} with weight {:?}",
            x.channels(),
            w.shape()
        ))
    );
    let cout = w.width();
    let mut out = Grid::zeros(x.height(), x.width(), cout);
    for p in 0..x.pixels() {
        let xp = x.token(p);
        let dst = out.token_mut(p);
        for (i, &xi) in xp.iter().enumerate() {
            let row = &w.data()[i * cout..(i + 1) * cout];
            for (d, &wv) in dst.iter_mut().zip(row) {
                *d += xi * wv;
            }
        }
    }
    Ok(out)
}

/// Adds a `1×1×C` bias to every token.
pub fn add_bias(tape: &mut Tape, x: Var, b: Var) -> Result<Var> {
    let (xv, bv) = (tape.value(x), tape.value(b));
    ensure!(
        bv.len() == xv.channels(),
        Error::ShapeMismatch(format!(
            "add_bias: bias {:?} for {} channels",
            bv.shape(),
            xv.channels()
        ))
    );
    let mut value = xv.clone();
    for p in 0..value.pixels() {
        for (d, &bb) in value.token_mut(p).iter_mut().zip(bv.data()) {
            *d += bb;
        }
    }
    Ok(tape.op(&[x, b], value, |ctx| {
        let gb = ctx.needs(1).then(|| {
            let mut gb = Grid::zeros(1, 1, ctx.grad.channels());
            for p in 0..ctx.grad.pixels() {
                for (d, &g) in gb.data_mut().iter_mut().zip(ctx.grad.token(p)) {
                    *d += g;
                }
            }
            let (h, w, c) = ctx.inputs[1].shape();
            Grid::from_vec(h, w, c, gb.into_data()).unwrap()
        });
        vec![Some(ctx.grad.clone()), gb]
    }))
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(tape: &mut Tape, x: Var) -> Var {
    let value = tape.value(x).map(|v| v * sigmoid(v));
    tape.op(&[x], value, |ctx| {
        let g = ctx
            .grad
            .zip_map(ctx.inputs[0], |g, v| {
                let s = sigmoid(v);
                g * (s + v * s * (1.0 - s))
            })
            .unwrap();
        vec![Some(g)]
    })
}

/// SwiGLU gate `silu(a) ⊙ b`.
pub fn swiglu_gate(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let value = tape
        .value(a)
        .zip_map(tape.value(b), |x, y| x * sigmoid(x) * y)?;
    Ok(tape.op(&[a, b], value, |ctx| {
        let (av, bv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let ga = ctx.needs(0).then(|| {
            let mut out = g.clone();
            for ((o, &x), &y) in out.data_mut().iter_mut().zip(av.data()).zip(bv.data()) {
                let s = sigmoid(x);
                *o *= y * (s + x * s * (1.0 - s));
            }
            out
        });
        let gb = ctx.needs(1).then(|| {
            g.zip_map(av, |g, x| g * x * sigmoid(x)).unwrap()
        });
        vec![ga, gb]
    }))
}

/// Per-token RMS normalization with a learnable `1×1×C` gain.
pub fn rms_norm(tape: &mut Tape, x: Var, gain: Var, eps: f64) -> Result<Var> {
    let (xv, gv) = (tape.value(x), tape.value(gain));
    let c = xv.channels();
    ensure!(
        gv.len() == c,
        Error::ShapeMismatch(format!("rms_norm: gain {:?} for {c} channels", gv.shape()))
    );
    let mut value = xv.clone();
    let mut inv = Vec::with_capacity(xv.pixels());
    for p in 0..xv.pixels() {
        let t = value.token_mut(p);
        let ms = t.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let r = 1.0 / (ms + eps).sqrt();
        inv.push(r);
        for (v, &gg) in t.iter_mut().zip(gv.data()) {
            *v *= r * gg;
        }
    }
    Ok(tape.op(&[x, gain], value, move |ctx| {
        let (xv, gv, g) = (ctx.inputs[0], ctx.inputs[1], ctx.grad);
        let mut gx = Grid::zeros(xv.height(), xv.width(), c);
        let mut ggain = Grid::zeros(1, 1, c);
        for (p, &r) in inv.iter().enumerate() {
            let xt = xv.token(p);
            let gt = g.token(p);
            // y_i = g_i x_i r, r = (mean(x²)+eps)^(-1/2)
            let mut dot = 0.0;
            for i in 0..c {
                dot += gt[i] * gv.data()[i] * xt[i];
                ggain.data_mut()[i] += gt[i] * xt[i] * r;
            }
            let k = dot * r * r * r / c as f64;
            let dst = gx.token_mut(p);
            for i in 0..c {
                dst[i] = gt[i] * gv.data()[i] * r - k * xt[i];
            }
        }
        let (h, w, cc) = gv.shape();
        let ggain = Grid::from_vec(h, w, cc, ggain.into_data()).unwrap();
        vec![Some(gx), Some(ggain)]
    }))
}

/// Concatenates two grids along the channel axis.
pub fn concat_channels(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let (av, bv) = (tape.value(a), tape.value(b));
    ensure!(
        av.height() == bv.height() && av.width() == bv.width(),
        Error::ShapeMismatch(format!(
            "concat_channels: {:?} vs {:?}",
            av.shape(),
            bv.shape()
        ))
    );
    let (ca, cb) = (av.channels(), bv.channels());
    let mut value = Grid::zeros(av.height(), av.width(), ca + cb);
    for p in 0..av.pixels() {
        let dst = value.token_mut(p);
        dst[..ca].copy_from_slice(av.token(p));
        dst[ca..].copy_from_slice(bv.token(p));
    }
    Ok(tape.op(&[a, b], value, move |ctx| {
        let g = ctx.grad;
        let (h, w) = (g.height(), g.width());
        let mut ga = Grid::zeros(h, w, ca);
        let mut gb = Grid::zeros(h, w, cb);
        for p in 0..g.pixels() {
            let t = g.token(p);
            ga.token_mut(p).copy_from_slice(&t[..ca]);
            gb.token_mut(p).copy_from_slice(&t[ca..]);
        }
        vec![Some(ga), Some(gb)]
    }))
}

/// Channels `start..start + len` of every token.
pub fn slice_channels(tape: &mut Tape, a: Var, start: usize, len: usize) -> Result<Var> {
    let av = tape.value(a);
    let c = av.channels();
    ensure!(
        start + len <= c && len > 0,
        Error::InvalidArgument(format!("slice {start}..{} of {c} channels", start + len))
    );
    let mut value = Grid::zeros(av.height(), av.width(), len);
    for p in 0..av.pixels() {
        value
            .token_mut(p)
            .copy_from_slice(&av.token(p)[start..start + len]);
    }
    Ok(tape.op(&[a], value, move |ctx| {
        let g = ctx.grad;
        let mut ga = Grid::zeros(g.height(), g.width(), c);
        for p in 0..g.pixels() {
            ga.token_mut(p)[start..start + len].copy_from_slice(g.token(p));
        }
        vec![Some(ga)]
    }))
}

/// Applies a fixed `C × C'` matrix and offset per token: `y = (x - offset) · m · k`.
/// Used for constant affine feature transforms that must pass gradients
/// through to their input.
pub fn fixed_affine(tape: &mut Tape, x: Var, offset: &[f64], m: &Grid, k: f64) -> Result<Var> {
    let xv = tape.value(x);
    ensure!(
        offset.len() == xv.channels() && m.height() == xv.channels() && m.channels() == 1,
        Error::ShapeMismatch(format!(
            "fixed_affine: {} channels, offset {}, matrix {:?}",
            xv.channels(),
            offset.len(),
            m.shape()
        ))
    );
    let mut centered = xv.clone();
    for p in 0..centered.pixels() {
        for (v, o) in centered.token_mut(p).iter_mut().zip(offset) {
            *v -= o;
        }
    }
    let value = linear_forward(&centered, m)?.scale(k);
    let m = m.clone();
    Ok(tape.op(&[x], value, move |ctx| {
        let g = ctx.grad;
        let (cin, cout) = (m.height(), m.width());
        let mut gx = Grid::zeros(g.height(), g.width(), cin);
        for p in 0..g.pixels() {
            let gp = g.token(p);
            for (i, d) in gx.token_mut(p).iter_mut().enumerate() {
                let row = &m.data()[i * cout..(i + 1) * cout];
                *d = k * row.iter().zip(gp).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        vec![Some(gx)]
    }))
}

/// Arranges `rows × cols` same-shaped grids into one grid, block `(i, j)`
/// taken from `blocks[i * cols + j]`.
pub fn tile_blocks(tape: &mut Tape, blocks: &[Var], rows: usize, cols: usize) -> Result<Var> {
    ensure!(
        blocks.len() == rows * cols && !blocks.is_empty(),
        Error::InvalidArgument(format!(
            "{} blocks for a {rows}x{cols} arrangement",
            blocks.len()
        ))
    );
    let first = tape.value(blocks[0]).shape();
    for &b in blocks {
        ensure!(
            tape.value(b).shape() == first,
            Error::ShapeMismatch(format!(
                "heterogeneous blocks: {:?} vs {first:?}",
                tape.value(b).shape()
            ))
        );
    }
    let (bh, bw, c) = first;
    let mut value = Grid::zeros(rows * bh, cols * bw, c);
    for (k, &b) in blocks.iter().enumerate() {
        value.paste(tape.value(b), (k / cols) * bh, (k % cols) * bw)?;
    }
    Ok(tape.op(blocks, value, move |ctx| {
        (0..rows * cols)
            .map(|k| {
                ctx.needs(k)
                    .then(|| ctx.grad.crop((k / cols) * bh, (k % cols) * bw, bh, bw).unwrap())
            })
            .collect()
    }))
}

/// `β·a + (1-β)·b`.
pub fn lerp(tape: &mut Tape, a: Var, b: Var, beta: f64) -> Result<Var> {
    let value = tape
        .value(a)
        .zip_map(tape.value(b), |x, y| beta * x + (1.0 - beta) * y)?;
    Ok(tape.op(&[a, b], value, move |ctx| {
        vec![
            Some(ctx.grad.scale(beta)),
            Some(ctx.grad.scale(1.0 - beta)),
        ]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ParamStore;

    #[test]
    fn sum_gives_all_ones_gradient() {
        let mut store = ParamStore::new();
        store.insert("p", Grid::from_fn(2, 3, 2, |y, x, c| (y + x + c) as f64));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let loss = sum(&mut tape, p);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("p").unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn half_squared_norm_gradient_is_value() {
        let mut store = ParamStore::new();
        let v = Grid::from_fn(3, 2, 2, |y, x, c| y as f64 - 0.5 * x as f64 + c as f64);
        store.insert("p", v.clone());
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let sq = mul(&mut tape, p, p).unwrap();
        let s = sum(&mut tape, sq);
        let loss = scale(&mut tape, s, 0.5);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("p").unwrap().max_abs_diff(&v) < 1e-15);
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut store = ParamStore::new();
        store.insert("p", Grid::filled(2, 2, 1, 3.0));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let loss = sum(&mut tape, p);
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("p").unwrap().data().iter().all(|&g| g == 2.0));
        store.zero_grad();
        assert!(store.grad("p").unwrap().data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_on_non_scalar_is_an_error() {
        let mut store = ParamStore::new();
        store.insert("p", Grid::zeros(2, 2, 1));
        let mut tape = Tape::new();
        let p = tape.param(&store, "p").unwrap();
        let err = tape.backward(p, &mut store).unwrap_err();
        assert!(matches!(err, Error::NonScalarLoss(_)));
    }

    #[test]
    fn reused_parameter_sums_gradients() {
        let mut store = ParamStore::new();
        store.insert("p", Grid::filled(1, 2, 1, 1.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, "p").unwrap();
        let b = tape.param(&store, "p").unwrap();
        let s = add(&mut tape, a, b).unwrap();
        let loss = sum(&mut tape, s);
        tape.backward(loss, &mut store).unwrap();
        assert!(store.grad("p").unwrap().data().iter().all(|&g| g == 2.0));
    }
}
