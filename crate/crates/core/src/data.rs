//! Seeded synthetic images: piecewise-constant Voronoi mosaics and oriented
//! step edges. Both are defined in continuous `[0, 1)²` coordinates and
//! rasterized at pixel centers, so the same scene renders at any size.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::numerics::Grid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub count: usize,
    pub side: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            count: 256,
            side: 128,
            seed: 7,
        }
    }
}

fn color(rng: &mut impl Rng) -> [f64; 3] {
    [rng.gen(), rng.gen(), rng.gen()]
}

/// `sites` random cells, each a random flat color.
pub fn voronoi_image(rng: &mut impl Rng, side: usize, sites: usize) -> Grid {
    let pts: Vec<(f64, f64, [f64; 3])> = (0..sites.max(1))
        .map(|_| (rng.gen(), rng.gen(), color(rng)))
        .collect();
    let mut img = Grid::zeros(side, side, 3);
    for y in 0..side {
        let v = (y as f64 + 0.5) / side as f64;
        for x in 0..side {
            let u = (x as f64 + 0.5) / side as f64;
            let nearest = pts
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - u).powi(2) + (a.1 - v).powi(2);
                    let db = (b.0 - u).powi(2) + (b.1 - v).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            img.pixel_mut(y, x).copy_from_slice(&nearest.2);
        }
    }
    img
}

/// Two colors split by a random line, with a third color in a random disc.
pub fn step_edge_image(rng: &mut impl Rng, side: usize) -> Grid {
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let (nx, ny) = (angle.cos(), angle.sin());
    let offset = rng.gen_range(-0.25..0.25);
    let (a, b, c) = (color(rng), color(rng), color(rng));
    let (cx, cy, r) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen_range(0.08..0.25));
    Grid::from_fn(side, side, 3, |y, x, k| {
        let u = (x as f64 + 0.5) / side as f64;
        let v = (y as f64 + 0.5) / side as f64;
        if (u - cx).powi(2) + (v - cy).powi(2) < r * r {
            c[k]
        } else if (u - 0.5) * nx + (v - 0.5) * ny < offset {
            a[k]
        } else {
            b[k]
        }
    })
}

/// Alternating Voronoi and step-edge images. Image `i` depends only on
/// `(seed, i)`.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<Vec<Grid>> {
    ensure!(
        spec.count >= 1 && spec.side >= 1,
        Error::InvalidArgument(format!(
            "synthetic dataset needs positive count and side, got {} and {}",
            spec.count, spec.side
        ))
    );
    Ok((0..spec.count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            if i % 2 == 0 {
                let sites = rng.gen_range(6..24);
                voronoi_image(&mut rng, spec.side, sites)
            } else {
                step_edge_image(&mut rng, spec.side)
            }
        })
        .collect())
}
