//! Distortion-free standardization: centering, an orthogonal rotation that
//! spreads variance evenly across channels, and one global scale.
//!
//! The rotation is `H · Uᵀ` where `U` is the PCA basis of the sample
//! covariance. For power-of-two channel counts `H` is the normalized
//! Sylvester–Hadamard matrix, whose rows have equal squared entries, so every
//! rotated channel receives the mean eigenvalue. For other channel counts `H`
//! is replaced by a product of Givens rotations chosen to equalize the
//! diagonal of the rotated covariance, which has the same effect.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::{ops, Grid, Tape, Var};

/// Ridge added to the covariance when it is (numerically) rank deficient.
pub const COVARIANCE_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionStats {
    pub mean: Vec<f64>,
    /// `C × C` orthogonal matrix, applied as `rotation · (v − mean)`.
    pub rotation: Grid,
    pub scale: f64,
}

impl DistributionStats {
    /// Pass-through statistics: zero mean, identity rotation, unit scale.
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            rotation: Grid::from_fn(channels, channels, 1, |i, j, _| (i == j) as u8 as f64),
            scale: 1.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Transpose of the rotation, for row-vector application.
    fn rotation_t(&self) -> Grid {
        let c = self.channels();
        Grid::from_fn(c, c, 1, |i, j, _| self.rotation.get(j, i, 0))
    }

    fn check(&self, fm: &Grid) -> Result<()> {
        ensure!(
            fm.channels() == self.channels(),
            Error::ShapeMismatch(format!(
                "stats for {} channels applied to {} channels",
                self.channels(),
                fm.channels()
            ))
        );
        Ok(())
    }
}

fn hadamard(n: usize) -> DMatrix<f64> {
    let mut h = DMatrix::from_element(1, 1, 1.0);
    while h.nrows() < n {
        let k = h.nrows();
        let mut next = DMatrix::zeros(2 * k, 2 * k);
        next.view_mut((0, 0), (k, k)).copy_from(&h);
        next.view_mut((0, k), (k, k)).copy_from(&h);
        next.view_mut((k, 0), (k, k)).copy_from(&h);
        next.view_mut((k, k), (k, k)).copy_from(&(-&h));
        h = next;
    }
    h / (n as f64).sqrt()
}

/// Orthogonal `Q` such that `diag(Q · diag(eigenvalues) · Qᵀ)` is constant.
///
/// Each step rotates one channel above the target against one below it in
/// their shared plane until the first lands exactly on the target; that
/// channel is then left alone. `C − 1` steps fix every channel.
fn equalizing_rotation(eigenvalues: &[f64]) -> DMatrix<f64> {
    let n = eigenvalues.len();
    let target = eigenvalues.iter().sum::<f64>() / n as f64;
    let mut m = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(eigenvalues));
    let mut q = DMatrix::<f64>::identity(n, n);
    let mut fixed = vec![false; n];
    let tol = 1e-14 * target.abs().max(1.0);
    for _ in 0..n.saturating_sub(1) {
        let open: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        let Some(&i) = open.iter().find(|&&i| m[(i, i)] > target + tol) else {
            break;
        };
        let Some(&j) = open.iter().find(|&&j| m[(j, j)] < target - tol) else {
            break;
        };
        let (a, b, c) = (m[(i, i)], m[(i, j)], m[(j, j)]);
        // New m_ii = (a+c)/2 + r·cos(2θ + φ), which spans [c, a] ⊂ [(a+c)/2 − r, (a+c)/2 + r].
        let half = 0.5 * (a - c);
        let r = half.hypot(b);
        let phi = b.atan2(half);
        let rhs = ((target - 0.5 * (a + c)) / r).clamp(-1.0, 1.0);
        let theta = 0.5 * (rhs.acos() - phi);
        let (s, co) = theta.sin_cos();
        let mut g = DMatrix::<f64>::identity(n, n);
        g[(i, i)] = co;
        g[(i, j)] = -s;
        g[(j, i)] = s;
        g[(j, j)] = co;
        m = &g * m * g.transpose();
        q = &g * q;
        fixed[i] = true;
    }
    q
}

/// Fits standardization statistics over every feature vector in `samples`.
pub fn phi_s_fit(samples: &[Grid]) -> Result<DistributionStats> {
    ensure!(
        !samples.is_empty(),
        Error::InvalidArgument("phi_s_fit needs at least one feature map".into())
    );
    let c = samples[0].channels();
    ensure!(
        samples.iter().all(|s| s.channels() == c),
        Error::ShapeMismatch("phi_s_fit samples disagree on channel count".into())
    );
    let n: usize = samples.iter().map(Grid::pixels).sum();
    ensure!(
        n > c,
        Error::InvalidArgument(format!(
            "phi_s_fit needs at least {} feature vectors, got {n}",
            c + 1
        ))
    );

    let mut mean = vec![0.0; c];
    for s in samples {
        for p in 0..s.pixels() {
            for (m, v) in mean.iter_mut().zip(s.token(p)) {
                *m += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = DMatrix::<f64>::zeros(c, c);
    let mut centered = vec![0.0; c];
    for s in samples {
        for p in 0..s.pixels() {
            for ((d, v), m) in centered.iter_mut().zip(s.token(p)).zip(&mean) {
                *d = v - m;
            }
            for i in 0..c {
                for j in i..c {
                    cov[(i, j)] += centered[i] * centered[j];
                }
            }
        }
    }
    for i in 0..c {
        for j in i..c {
            cov[(i, j)] /= n as f64;
            cov[(j, i)] = cov[(i, j)];
        }
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut lambda: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut basis = DMatrix::<f64>::zeros(c, c);
    for (col, &k) in order.iter().enumerate() {
        basis.set_column(col, &eig.eigenvectors.column(k));
    }
    if lambda[c - 1] < COVARIANCE_EPS {
        warn!(
            "feature covariance is rank deficient (smallest eigenvalue {:e}); adding {COVARIANCE_EPS:e}·I",
            lambda[c - 1]
        );
        lambda.iter_mut().for_each(|l| *l = l.max(0.0) + COVARIANCE_EPS);
    }

    let spread = if c.is_power_of_two() {
        hadamard(c)
    } else {
        equalizing_rotation(&lambda)
    };
    let rot = spread * basis.transpose();
    let scale = (lambda.iter().sum::<f64>() / c as f64).sqrt();
    Ok(DistributionStats {
        mean,
        rotation: Grid::from_fn(c, c, 1, |i, j, _| rot[(i, j)]),
        scale,
    })
}

/// `rotation · (v − mean) / scale` for every feature vector.
pub fn phi_s_apply(fm: &Grid, s: &DistributionStats) -> Result<Grid> {
    s.check(fm)?;
    let c = s.channels();
    let mut out = Grid::zeros(fm.height(), fm.width(), c);
    let mut centered = vec![0.0; c];
    for p in 0..fm.pixels() {
        for ((d, v), m) in centered.iter_mut().zip(fm.token(p)).zip(&s.mean) {
            *d = v - m;
        }
        for (i, o) in out.token_mut(p).iter_mut().enumerate() {
            let row = &s.rotation.data()[i * c..(i + 1) * c];
            *o = row.iter().zip(&centered).map(|(a, b)| a * b).sum::<f64>() / s.scale;
        }
    }
    Ok(out)
}

/// Exact inverse of [`phi_s_apply`]: `rotationᵀ · (scale · v) + mean`.
pub fn phi_s_invert(fm: &Grid, s: &DistributionStats) -> Result<Grid> {
    s.check(fm)?;
    let c = s.channels();
    let mut out = Grid::zeros(fm.height(), fm.width(), c);
    for p in 0..fm.pixels() {
        let v = fm.token(p);
        for (j, o) in out.token_mut(p).iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, &vi) in v.iter().enumerate() {
                acc += s.rotation.data()[i * c + j] * vi;
            }
            *o = acc * s.scale + s.mean[j];
        }
    }
    Ok(out)
}

/// Differentiable [`phi_s_apply`].
pub fn phi_s_apply_var(tape: &mut Tape, fm: Var, s: &DistributionStats) -> Result<Var> {
    s.check(tape.value(fm))?;
    ops::fixed_affine(tape, fm, &s.mean, &s.rotation_t(), 1.0 / s.scale)
}
