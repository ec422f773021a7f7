//! Evaluation metrics, the over-tiling analysis, and the tiling cost model.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::featurizer::{phi_s_apply, phi_s_fit, Featurizer};
use crate::numerics::Grid;
use crate::tiler::tile_upsample;

/// `MSE(Y, μ_Y) / MSE(X, Y)` aggregated over a whole set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    /// `+∞` when `infinite` is set.
    pub value: f64,
    /// The predictions matched the targets exactly.
    pub infinite: bool,
}

/// Fidelity of predictions `xs` against targets `ys`, with `μ_Y` the
/// per-channel mean of every target position across all samples.
pub fn fidelity(xs: &[Grid], ys: &[Grid]) -> Result<Fidelity> {
    ensure!(
        !ys.is_empty() && xs.len() == ys.len(),
        Error::InvalidArgument(format!("{} predictions for {} targets", xs.len(), ys.len()))
    );
    let c = ys[0].channels();
    let mut mu = vec![0.0; c];
    let mut count = 0usize;
    for (x, y) in xs.iter().zip(ys) {
        x.check_same_shape(y, "fidelity")?;
        ensure!(
            y.channels() == c,
            Error::ShapeMismatch("targets disagree on channel count".into())
        );
        for p in 0..y.pixels() {
            for (m, v) in mu.iter_mut().zip(y.token(p)) {
                *m += v;
            }
        }
        count += y.pixels();
    }
    mu.iter_mut().for_each(|m| *m /= count as f64);
    let (mut num, mut den) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        for p in 0..y.pixels() {
            for ((xv, yv), m) in x.token(p).iter().zip(y.token(p)).zip(&mu) {
                num += (yv - m) * (yv - m);
                den += (xv - yv) * (xv - yv);
            }
        }
    }
    if den == 0.0 {
        return Ok(Fidelity {
            value: f64::INFINITY,
            infinite: true,
        });
    }
    Ok(Fidelity {
        value: num / den,
        infinite: false,
    })
}

/// Mean squared difference between horizontally and vertically adjacent
/// feature vectors.
pub fn tv_loss(f: &Grid) -> f64 {
    let (h, w, _) = f.shape();
    let mut total = 0.0;
    let mut pairs = 0usize;
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    for y in 0..h {
        for x in 0..w {
            if x + 1 < w {
                total += sq(f.pixel(y, x), f.pixel(y, x + 1));
                pairs += 1;
            }
            if y + 1 < h {
                total += sq(f.pixel(y, x), f.pixel(y + 1, x));
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

pub const CRF_RADIUS: usize = 3;
pub const CRF_SIGMA: f64 = 0.15;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrfLoss {
    pub value: f64,
    pub pairs: usize,
    /// Pairs dropped because one of the feature vectors had zero norm.
    pub skipped: usize,
}

/// Mean over pixel pairs within Euclidean distance [`CRF_RADIUS`] of
/// `w·(1 − cos(F_i, F_j))`, `w = exp(−‖g_i − g_j‖² / 2σ²)`. The guidance must
/// have the feature map's spatial size.
pub fn crf_loss(f: &Grid, guidance: &Grid) -> Result<CrfLoss> {
    ensure!(
        f.height() == guidance.height() && f.width() == guidance.width(),
        Error::ShapeMismatch(format!(
            "crf guidance {:?} for features {:?}",
            guidance.shape(),
            f.shape()
        ))
    );
    let (h, w, _) = f.shape();
    let norms: Vec<f64> = (0..f.pixels())
        .map(|p| f.token(p).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let r = CRF_RADIUS as isize;
    let mut total = 0.0;
    let (mut pairs, mut skipped) = (0usize, 0usize);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = (y * w as isize + x) as usize;
            // Each unordered pair once: later rows, or the same row to the right.
            for dy in 0..=r {
                for dx in -r..=r {
                    if (dy == 0 && dx <= 0) || dy * dy + dx * dx > r * r {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny >= h as isize || nx < 0 || nx >= w as isize {
                        continue;
                    }
                    let j = (ny * w as isize + nx) as usize;
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        skipped += 1;
                        continue;
                    }
                    let cos = f.token(i).iter().zip(f.token(j)).map(|(a, b)| a * b).sum::<f64>()
                        / (norms[i] * norms[j]);
                    let d2: f64 = guidance
                        .token(i)
                        .iter()
                        .zip(guidance.token(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    let wgt = (-d2 / (2.0 * CRF_SIGMA * CRF_SIGMA)).exp();
                    total += wgt * (1.0 - cos).max(0.0);
                    pairs += 1;
                }
            }
        }
    }
    Ok(CrfLoss {
        value: if pairs == 0 { 0.0 } else { total / pairs as f64 },
        pairs,
        skipped,
    })
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `1 / median` of the pairwise squared distances within `xs`.
pub fn median_gamma(xs: &[Vec<f64>]) -> Result<f64> {
    ensure!(
        xs.len() >= 2,
        Error::InvalidArgument(format!("median bandwidth needs two points, got {}", xs.len()))
    );
    let mut d: Vec<f64> = Vec::with_capacity(xs.len() * (xs.len() - 1) / 2);
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            d.push(sq_dist(&xs[i], &xs[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let med = if n % 2 == 1 {
        d[n / 2]
    } else {
        0.5 * (d[n / 2 - 1] + d[n / 2])
    };
    ensure!(med > 0.0, Error::DegenerateBandwidth);
    Ok(1.0 / med)
}

/// Unbiased squared MMD with the RBF kernel `exp(−γ‖x − y‖²)`.
pub fn mmd2_unbiased(xs: &[Vec<f64>], ys: &[Vec<f64>], gamma: f64) -> Result<f64> {
    let (m, n) = (xs.len(), ys.len());
    ensure!(
        m >= 2 && n >= 2,
        Error::InvalidArgument(format!("mmd needs at least two samples per set, got {m} and {n}"))
    );
    let k = |a: &[f64], b: &[f64]| (-gamma * sq_dist(a, b)).exp();
    let self_term = |s: &[Vec<f64>]| {
        let mut t = 0.0;
        for i in 0..s.len() {
            for j in 0..s.len() {
                if i != j {
                    t += k(&s[i], &s[j]);
                }
            }
        }
        t / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in xs {
        for y in ys {
            cross += k(x, y);
        }
    }
    Ok(self_term(xs) + self_term(ys) - 2.0 * cross / (m * n) as f64)
}

/// MSE between brute-force featurization at `R·u` and the stitched tile
/// mosaic, both PHI-S normalized with statistics fit on the brute-force map,
/// for each level `u`. Levels beyond the featurizer's resolution limit are
/// skipped with a warning.
pub fn tiling_error(featurizer: &dyn Featurizer, image: &Grid, levels: &[usize]) -> Result<Vec<(usize, f64)>> {
    let r = featurizer.input_resolution();
    let mut out = Vec::with_capacity(levels.len());
    for &u in levels {
        ensure!(
            u >= 1,
            Error::InvalidArgument(format!("tile level must be positive, got {u}"))
        );
        let side = r * u;
        let hi = match featurizer.at_resolution(side) {
            Ok(f) => f,
            Err(e) => {
                log::warn!("skipping tile level {u}: {e}");
                continue;
            }
        };
        let img = crate::numerics::bilinear_resample(image, side, side)?;
        let brute = hi.featurize(&img)?;
        let mosaic = tile_upsample(featurizer, &img, u, None)?;
        let stats = phi_s_fit(std::slice::from_ref(&brute))?;
        let a = phi_s_apply(&brute, &stats)?;
        let b = phi_s_apply(&mosaic, &stats)?;
        let mse = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / a.len() as f64;
        out.push((u, mse));
    }
    Ok(out)
}

/// Relative costs at tiling depth `x` for per-level cost `c`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub x: u64,
    /// Progressive tiling over every level `1..=x`: `c·x(x+1)(2x+1)/6`.
    pub progressive: f64,
    /// Global view plus the final level only: `c·(1 + x²)`.
    pub final_level: f64,
    /// Running the featurizer at `x` times the resolution: `c·x⁴`.
    pub brute_force: f64,
}

fn sum_of_squares(x: u64) -> u128 {
    let x = x as u128;
    x * (x + 1) * (2 * x + 1) / 6
}

pub fn cost_model(x: i64, c: f64) -> Result<CostPoint> {
    ensure!(
        x >= 1,
        Error::InvalidArgument(format!("tiling depth must be at least 1, got {x}"))
    );
    let xu = x as u64;
    let xf = x as f64;
    Ok(CostPoint {
        x: xu,
        progressive: c * sum_of_squares(xu) as f64,
        final_level: c * (1.0 + xf * xf),
        brute_force: c * xf.powi(4),
    })
}

/// Checks in exact integer arithmetic that the closed form equals the loop
/// sum and that `Σ i² ≤ x⁴` for every `2 ≤ x ≤ max_x`, with equality at 1.
pub fn cost_proof_check(max_x: u64) -> bool {
    let mut running: u128 = 0;
    for x in 1..=max_x {
        let xx = x as u128;
        running += xx * xx;
        if running != sum_of_squares(x) {
            return false;
        }
        let quartic = xx * xx * xx * xx;
        let ok = if x == 1 { running == quartic } else { running <= quartic };
        if !ok {
            return false;
        }
    }
    true
}

/// One row of the throughput table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThroughputRow {
    pub upsampler: String,
    pub factor: usize,
    /// Featurizer evaluations per image.
    pub tiles: usize,
    pub tokens: usize,
    pub seconds: f64,
    pub micros_per_token: f64,
}

pub const THROUGHPUT_HEADER: &str = "upsampler,factor,tiles,tokens,seconds,micros_per_token";

impl ThroughputRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{:.6},{:.6}",
            self.upsampler, self.factor, self.tiles, self.tokens, self.seconds, self.micros_per_token
        )
    }
}

pub fn write_throughput_csv(rows: &[ThroughputRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{THROUGHPUT_HEADER}")?;
    for r in rows {
        writeln!(out, "{}", r.csv())?;
    }
    Ok(())
}

/// Scalar metrics of one evaluation run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub upsampler: String,
    pub fidelity: f64,
    pub fidelity_infinite: bool,
    pub tv: f64,
    pub crf: f64,
    pub crf_skipped: usize,
    pub mmd2: f64,
    pub tiling_error: Vec<(usize, f64)>,
    pub cost: Vec<CostPoint>,
    pub seed: u64,
    pub config_digest: String,
    pub images: usize,
}

pub const METRICS_HEADER: &str = "metric,value";

impl MetricsReport {
    /// One `metric,value` row per scalar metric, in a fixed order.
    pub fn csv_rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("upsampler".to_string(), self.upsampler.clone()),
            ("images".to_string(), self.images.to_string()),
            ("fidelity".to_string(), format!("{}", self.fidelity)),
            ("fidelity_infinite".to_string(), self.fidelity_infinite.to_string()),
            ("tv".to_string(), format!("{}", self.tv)),
            ("crf".to_string(), format!("{}", self.crf)),
            ("crf_skipped".to_string(), self.crf_skipped.to_string()),
            ("mmd2".to_string(), format!("{}", self.mmd2)),
        ];
        for (u, mse) in &self.tiling_error {
            rows.push((format!("tiling_error_u{u}"), format!("{mse}")));
        }
        for p in &self.cost {
            rows.push((format!("cost_progressive_x{}", p.x), format!("{}", p.progressive)));
            rows.push((format!("cost_brute_force_x{}", p.x), format!("{}", p.brute_force)));
        }
        rows.push(("seed".to_string(), self.seed.to_string()));
        rows.push(("config_digest".to_string(), self.config_digest.clone()));
        rows
    }

    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        writeln!(out, "{METRICS_HEADER}")?;
        for (k, v) in self.csv_rows() {
            writeln!(out, "{k},{v}")?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Times `run` once per (upsampler, factor) pair and reports per-token
/// wall-clock cost. `run` returns the upsampled map.
pub fn throughput_bench(
    cases: &[(String, usize, usize)],
    mut run: impl FnMut(&str, usize) -> Result<Grid>,
) -> Result<Vec<ThroughputRow>> {
    let mut rows = Vec::with_capacity(cases.len());
    for (name, factor, tiles) in cases {
        let start = Instant::now();
        let out = run(name, *factor)?;
        let seconds = start.elapsed().as_secs_f64();
        let tokens = out.pixels();
        rows.push(ThroughputRow {
            upsampler: name.clone(),
            factor: *factor,
            tiles: *tiles,
            tokens,
            seconds,
            micros_per_token: seconds * 1e6 / tokens.max(1) as f64,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    use super::*;
    use crate::featurizer::{FeaturizerKind, FeaturizerSpec, ToyFeaturizer};
    use crate::numerics::init;

    #[test]
    fn constant_predictor_has_unit_fidelity() {
        let y = init::normal(&mut ChaCha8Rng::seed_from_u64(1), 4, 4, 2, 1.0);
        let mu = y.channel_means();
        let x = Grid::from_fn(4, 4, 2, |_, _, c| mu[c]);
        let f = fidelity(&[x], &[y]).unwrap();
        assert!((f.value - 1.0).abs() < 1e-12);
    }

    #[test]
    fn exact_match_is_flagged_infinite() {
        let y = Grid::filled(3, 3, 2, 0.7);
        let f = fidelity(&[y.clone()], &[y]).unwrap();
        assert!(f.infinite && f.value.is_infinite());
    }

    #[test]
    fn fidelity_matches_two_mse_formula_and_is_scale_covariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = init::normal(&mut rng, 4, 4, 2, 1.0);
        let y = init::normal(&mut rng, 4, 4, 2, 1.0);
        let mu = y.channel_means();
        let mut num = 0.0;
        let mut den = 0.0;
        for p in 0..16 {
            for c in 0..2 {
                num += (y.token(p)[c] - mu[c]).powi(2);
                den += (x.token(p)[c] - y.token(p)[c]).powi(2);
            }
        }
        let f = fidelity(&[x.clone()], &[y.clone()]).unwrap().value;
        assert!((f - num / den).abs() < 1e-12);
        let g = fidelity(&[x.scale(-3.0)], &[y.scale(-3.0)]).unwrap().value;
        assert!((f - g).abs() < 1e-12 * f);
    }

    #[test]
    fn tv_of_constant_and_step_edge() {
        assert_eq!(tv_loss(&Grid::filled(5, 5, 3, 2.0)), 0.0);
        let n = 6;
        let h = 1.5;
        let f = Grid::from_fn(n, n, 1, |_, x, _| if x < n / 2 { 0.0 } else { h });
        // One crossing per row; 2·n·(n − 1) adjacent pairs in total.
        let want = h * h * n as f64 / (2 * n * (n - 1)) as f64;
        assert!((tv_loss(&f) - want).abs() < 1e-15);
        let r = init::normal(&mut ChaCha8Rng::seed_from_u64(3), 5, 5, 2, 1.0);
        assert!(tv_loss(&r) >= 0.0);
    }

    #[test]
    fn crf_trivial_cases() {
        let g = init::normal(&mut ChaCha8Rng::seed_from_u64(4), 5, 5, 3, 0.1);
        assert!(crf_loss(&Grid::filled(5, 5, 2, 1.0), &g).unwrap().value.abs() < 1e-12);
        let far = Grid::from_fn(5, 5, 3, |y, x, _| ((y * 5 + x) as f64) * 1e3);
        let f = init::normal(&mut ChaCha8Rng::seed_from_u64(5), 5, 5, 2, 1.0);
        assert_eq!(crf_loss(&f, &far).unwrap().value, 0.0);
    }

    #[test]
    fn crf_matches_exhaustive_pair_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = init::normal(&mut rng, 4, 5, 3, 1.0);
        let g = init::normal(&mut rng, 4, 5, 3, 0.2);
        let mut total = 0.0;
        let mut count = 0;
        for i in 0..20 {
            for j in (i + 1)..20 {
                let (yi, xi) = ((i / 5) as f64, (i % 5) as f64);
                let (yj, xj) = ((j / 5) as f64, (j % 5) as f64);
                if (yi - yj).powi(2) + (xi - xj).powi(2) > 9.0 {
                    continue;
                }
                let (a, b) = (f.token(i), f.token(j));
                let dot: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let d2: f64 = g.token(i).iter().zip(g.token(j)).map(|(p, q)| (p - q).powi(2)).sum();
                total += (-d2 / (2.0 * 0.15 * 0.15)).exp() * (1.0 - dot / (na * nb));
                count += 1;
            }
        }
        let got = crf_loss(&f, &g).unwrap();
        assert_eq!(got.pairs, count);
        assert!((got.value - total / count as f64).abs() < 1e-12);
    }

    #[test]
    fn crf_skips_zero_vectors() {
        let mut f = Grid::filled(2, 2, 2, 1.0);
        f.pixel_mut(0, 0).fill(0.0);
        let got = crf_loss(&f, &Grid::zeros(2, 2, 3)).unwrap();
        assert_eq!(got.skipped, 3);
        assert_eq!(got.pairs, 3);
    }

    fn gaussian_set(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(rng);
                        z + shift
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn mmd_of_identical_sets_is_exactly_zero() {
        let xs = vec![vec![0.3, -1.0]; 5];
        let ys = vec![vec![0.3, -1.0]; 7];
        assert_eq!(mmd2_unbiased(&xs, &ys, 1.0).unwrap(), 0.0);
        assert!(matches!(median_gamma(&xs), Err(Error::DegenerateBandwidth)));
    }

    #[test]
    fn mmd_separates_shifted_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = gaussian_set(&mut rng, 200, 2, 0.0);
        let y = gaussian_set(&mut rng, 200, 2, 0.0);
        let z = gaussian_set(&mut rng, 200, 2, 5.0);
        let gamma = median_gamma(&x).unwrap();
        let same = mmd2_unbiased(&x, &y, gamma).unwrap();
        assert!(same.abs() < 0.02, "{same}");
        let shifted = mmd2_unbiased(&z, &y, gamma).unwrap();
        assert!(shifted > 0.5, "{shifted}");
        let swapped = mmd2_unbiased(&y, &z, gamma).unwrap();
        assert!((shifted - swapped).abs() < 1e-12);
    }

    #[test]
    fn median_gamma_of_three_collinear_points() {
        // Squared distances 1, 4, 9: median 4.
        let xs = vec![vec![0.0], vec![1.0], vec![3.0]];
        assert_eq!(median_gamma(&xs).unwrap(), 0.25);
    }

    fn toy(kind: FeaturizerKind) -> ToyFeaturizer {
        ToyFeaturizer::new(FeaturizerSpec {
            kind,
            patch: 2,
            channels: 3,
            input_resolution: 8,
            seed: 11,
            bias_amplitude: 0.0,
        })
        .unwrap()
    }

    #[test]
    fn tiling_error_is_zero_for_patch_linear_and_positive_for_smooth_conv() {
        let img = Grid::from_fn(16, 16, 3, |y, x, c| (((y / 3) + (x / 5) + c) % 4) as f64 / 4.0);
        for (u, mse) in tiling_error(&toy(FeaturizerKind::PatchLinear), &img, &[1, 2, 3, 4]).unwrap() {
            assert!(mse < 1e-20, "u={u}: {mse}");
        }
        let smooth = tiling_error(&toy(FeaturizerKind::SmoothConv), &img, &[1, 2, 3]).unwrap();
        assert!(smooth[0].1 < 1e-20);
        assert!(smooth[1].1 > 0.0 && smooth[2].1 > 0.0);
    }

    #[test]
    fn cost_model_values() {
        let one = cost_model(1, 2.5).unwrap();
        assert_eq!((one.progressive, one.brute_force), (2.5, 2.5));
        let two = cost_model(2, 1.0).unwrap();
        assert_eq!((two.progressive, two.final_level, two.brute_force), (5.0, 5.0, 16.0));
        assert!(cost_model(0, 1.0).is_err());
        for x in 1..=100u64 {
            let direct: u128 = (1..=x as u128).map(|i| i * i).sum();
            assert_eq!(sum_of_squares(x), direct);
        }
        assert!(cost_proof_check(10_000));
    }

    #[test]
    fn throughput_rows_follow_cases() {
        let cases = vec![("bilinear".to_string(), 2, 1), ("featsharp".to_string(), 2, 5)];
        let rows = throughput_bench(&cases, |_, z| Ok(Grid::zeros(4 * z, 4 * z, 1))).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].tiles, 5);
        let mut buf = Vec::new();
        write_throughput_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next().unwrap(), THROUGHPUT_HEADER);
        assert_eq!(text.lines().count(), 3);
    }
}
