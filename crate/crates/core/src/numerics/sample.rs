//! Bilinear resampling and homography warps.
//!
//! Both use half-pixel centers: pixel `x` of an `n`-wide grid covers the
//! normalized interval centered on `(x + 0.5) / n`. Samples falling outside
//! the source clamp to the nearest edge pixel. Each warp is linear in its
//! source, so it is precomputed as a [`SamplingPlan`] of four taps per
//! output pixel and its adjoint is a scatter with the same taps.

use std::sync::Arc;

use super::transform::apply_homography;
use super::{Grid, Tape, Var, ViewTransform};
use crate::error::{ensure, Error, Result};

/// Source positions snap to the integer lattice within this distance, so
/// lattice-preserving warps (identity, flips, quarter turns) are exact.
const SNAP: f64 = 1e-9;

/// Four bilinear taps `(source pixel index, weight)` per output pixel.
#[derive(Clone, Debug)]
pub struct SamplingPlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    taps: Vec<[(u32, f64); 4]>,
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < SNAP {
        r
    } else {
        v
    }
}

/// Bilinear taps at continuous pixel coordinate `(sy, sx)`, clamped to edge.
fn taps_at(sy: f64, sx: f64, in_h: usize, in_w: usize) -> [(u32, f64); 4] {
    let sy = snap(sy).clamp(0.0, (in_h - 1) as f64);
    let sx = snap(sx).clamp(0.0, (in_w - 1) as f64);
    let y0 = sy.floor() as usize;
    let x0 = sx.floor() as usize;
    let y1 = (y0 + 1).min(in_h - 1);
    let x1 = (x0 + 1).min(in_w - 1);
    let fy = sy - y0 as f64;
    let fx = sx - x0 as f64;
    let idx = |y: usize, x: usize| (y * in_w + x) as u32;
    [
        (idx(y0, x0), (1.0 - fy) * (1.0 - fx)),
        (idx(y0, x1), (1.0 - fy) * fx),
        (idx(y1, x0), fy * (1.0 - fx)),
        (idx(y1, x1), fy * fx),
    ]
}

impl SamplingPlan {
    /// Plain rescaling of an `in_h × in_w` grid to `out_h × out_w`.
    pub fn resize(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Result<Self> {
        ensure!(in_h > 0 && in_w > 0, Error::EmptyGrid);
        ensure!(
            out_h > 0 && out_w > 0,
            Error::InvalidArgument(format!("output size {out_h}x{out_w}"))
        );
        let ry = in_h as f64 / out_h as f64;
        let rx = in_w as f64 / out_w as f64;
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let sy = (y as f64 + 0.5) * ry - 0.5;
            for x in 0..out_w {
                let sx = (x as f64 + 0.5) * rx - 0.5;
                taps.push(taps_at(sy, sx, in_h, in_w));
            }
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        })
    }

    /// Inverse warp through `t`: each output pixel samples the source at
    /// the preimage of its center.
    pub fn warp(
        in_h: usize,
        in_w: usize,
        t: &ViewTransform,
        out_h: usize,
        out_w: usize,
    ) -> Result<Self> {
        ensure!(in_h > 0 && in_w > 0, Error::EmptyGrid);
        ensure!(
            out_h > 0 && out_w > 0,
            Error::InvalidArgument(format!("output size {out_h}x{out_w}"))
        );
        let inv = t.inverse_homography()?;
        let mut taps = Vec::with_capacity(out_h * out_w);
        for y in 0..out_h {
            let v = 2.0 * (y as f64 + 0.5) / out_h as f64 - 1.0;
            for x in 0..out_w {
                let u = 2.0 * (x as f64 + 0.5) / out_w as f64 - 1.0;
                let (su, sv) = apply_homography(&inv, u, v)?;
                let sx = (su + 1.0) * 0.5 * in_w as f64 - 0.5;
                let sy = (sv + 1.0) * 0.5 * in_h as f64 - 0.5;
                taps.push(taps_at(sy, sx, in_h, in_w));
            }
        }
        Ok(Self {
            in_h,
            in_w,
            out_h,
            out_w,
            taps,
        })
    }

    pub fn apply(&self, src: &Grid) -> Result<Grid> {
        ensure!(
            src.height() == self.in_h && src.width() == self.in_w,
            Error::ShapeMismatch(format!(
                "sampling plan for {}x{} applied to {:?}",
                self.in_h,
                self.in_w,
                src.shape()
            ))
        );
        let c = src.channels();
        let mut out = Grid::zeros(self.out_h, self.out_w, c);
        for (p, taps) in self.taps.iter().enumerate() {
            let dst = out.token_mut(p);
            for &(i, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(src.token(i as usize)) {
                    *d += w * s;
                }
            }
        }
        Ok(out)
    }

    /// Adjoint of [`SamplingPlan::apply`].
    pub fn apply_transpose(&self, grad: &Grid) -> Grid {
        let c = grad.channels();
        let mut out = Grid::zeros(self.in_h, self.in_w, c);
        for (p, taps) in self.taps.iter().enumerate() {
            let g = grad.token(p);
            for &(i, w) in taps {
                if w == 0.0 {
                    continue;
                }
                for (d, s) in out.token_mut(i as usize).iter_mut().zip(g) {
                    *d += w * s;
                }
            }
        }
        out
    }

    /// Records `apply` on the tape.
    pub fn record(self: Arc<Self>, tape: &mut Tape, src: Var) -> Result<Var> {
        let value = self.apply(tape.value(src))?;
        Ok(tape.op(&[src], value, move |ctx| {
            vec![Some(self.apply_transpose(ctx.grad))]
        }))
    }
}

/// Bilinear resize of `src` to `out_h × out_w`.
pub fn bilinear_resample(src: &Grid, out_h: usize, out_w: usize) -> Result<Grid> {
    ensure!(!src.is_empty(), Error::EmptyGrid);
    if src.height() == out_h && src.width() == out_w {
        return Ok(src.clone());
    }
    SamplingPlan::resize(src.height(), src.width(), out_h, out_w)?.apply(src)
}

/// Inverse-warps `src` through `t` onto an `out_h × out_w` grid.
pub fn warp_apply(src: &Grid, t: &ViewTransform, out_h: usize, out_w: usize) -> Result<Grid> {
    ensure!(!src.is_empty(), Error::EmptyGrid);
    SamplingPlan::warp(src.height(), src.width(), t, out_h, out_w)?.apply(src)
}

/// Differentiable [`bilinear_resample`].
pub fn bilinear_resample_var(tape: &mut Tape, src: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let v = tape.value(src);
    ensure!(!v.is_empty(), Error::EmptyGrid);
    if v.height() == out_h && v.width() == out_w {
        return Ok(src);
    }
    let plan = SamplingPlan::resize(v.height(), v.width(), out_h, out_w)?;
    Arc::new(plan).record(tape, src)
}

/// Differentiable [`warp_apply`].
pub fn warp_apply_var(
    tape: &mut Tape,
    src: Var,
    t: &ViewTransform,
    out_h: usize,
    out_w: usize,
) -> Result<Var> {
    let v = tape.value(src);
    ensure!(!v.is_empty(), Error::EmptyGrid);
    let plan = SamplingPlan::warp(v.height(), v.width(), t, out_h, out_w)?;
    Arc::new(plan).record(tape, src)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use super::*;

    #[test]
    fn constant_grid_resamples_to_constant() {
        let src = Grid::filled(2, 2, 3, 0.7);
        for (h, w) in [(1, 1), (3, 5), (8, 8)] {
            let out = bilinear_resample(&src, h, w).unwrap();
            assert!(out.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn same_size_resample_is_bit_identical() {
        let src = Grid::from_fn(3, 4, 2, |y, x, c| (y * 7 + x * 3 + c) as f64 * 0.37);
        assert_eq!(bilinear_resample(&src, 3, 4).unwrap(), src);
        let plan = SamplingPlan::resize(3, 4, 3, 4).unwrap();
        assert_eq!(plan.apply(&src).unwrap(), src);
    }

    #[test]
    fn two_by_one_to_four_by_one_matches_half_pixel_formula() {
        // centers (y + 0.5) * 2/4 - 0.5 = -0.25, 0.25, 0.75, 1.25, clamped to [0, 1]
        let src = Grid::from_vec(2, 1, 1, vec![0.0, 1.0]).unwrap();
        let out = bilinear_resample(&src, 4, 1).unwrap();
        assert_eq!(out.data(), &[0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn empty_source_is_rejected() {
        let err = bilinear_resample(&Grid::zeros(0, 3, 1), 2, 2).unwrap_err();
        assert_eq!(err.to_string(), "empty grid");
    }

    #[test]
    fn identity_warp_is_exact() {
        let src = Grid::from_fn(5, 7, 2, |y, x, c| ((y * 13 + x * 5 + c) % 11) as f64 - 3.1);
        let out = warp_apply(&src, &ViewTransform::identity(), 5, 7).unwrap();
        assert_eq!(out, src);
    }

    #[test]
    fn double_hflip_restores() {
        let src = Grid::from_fn(6, 4, 3, |y, x, c| (y as f64).sin() + x as f64 * 0.3 - c as f64);
        let t = ViewTransform {
            hflip: true,
            ..ViewTransform::identity()
        };
        let once = warp_apply(&src, &t, 6, 4).unwrap();
        assert!(once.max_abs_diff(&src) > 0.1);
        let twice = warp_apply(&once, &t, 6, 4).unwrap();
        assert!(twice.max_abs_diff(&src) < 1e-12);
    }

    #[test]
    fn quarter_turn_matches_inverse_mapping_oracle() {
        // [[a b], [c d]] with centers at normalized (±0.5, ±0.5).
        let src = Grid::from_vec(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let t = ViewTransform {
            rotation: FRAC_PI_2,
            ..ViewTransform::identity()
        };
        // Forward rotation maps (u, v) -> (-v, u); the preimage of output
        // (u, v) is (v, -u).
        let mut expected = Grid::zeros(2, 2, 1);
        for y in 0..2 {
            for x in 0..2 {
                let (u, v) = (x as f64 - 0.5, y as f64 - 0.5);
                let (su, sv) = (v, -u);
                let (sx, sy) = ((su + 0.5) as usize, (sv + 0.5) as usize);
                expected.set(y, x, 0, src.get(sy, sx, 0));
            }
        }
        let out = warp_apply(&src, &t, 2, 2).unwrap();
        assert!(out.max_abs_diff(&expected) < 1e-12);
        assert_eq!(expected.data(), &[3.0, 1.0, 4.0, 2.0]);
    }

    #[test]
    fn transpose_is_adjoint() {
        let t = ViewTransform {
            scale: 1.3,
            shift: (0.1, -0.05),
            hflip: true,
            rotation: 0.2,
            perspective: [0.01, 0.0, 0.02, 0.0, -0.01, 0.0, 0.03, -0.02],
        };
        let plan = SamplingPlan::warp(5, 6, &t, 4, 3).unwrap();
        let a = Grid::from_fn(5, 6, 2, |y, x, c| ((y * 3 + x * 7 + c * 5) % 9) as f64 * 0.1);
        let b = Grid::from_fn(4, 3, 2, |y, x, c| ((y * 5 + x * 2 + c) % 7) as f64 * 0.2 - 0.4);
        let lhs: f64 = plan
            .apply(&a)
            .unwrap()
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| p * q)
            .sum();
        let rhs: f64 = a
            .data()
            .iter()
            .zip(plan.apply_transpose(&b).data())
            .map(|(p, q)| p * q)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
