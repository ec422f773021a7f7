use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Grid;

/// Grid of i.i.d. `N(0, std²)` entries.
pub fn normal(rng: &mut impl Rng, h: usize, w: usize, c: usize, std: f64) -> Grid {
    Grid::from_fn(h, w, c, |_, _, _| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

/// `fan_in × fan_out` matrix with `N(0, 1/fan_in)` entries.
pub fn lecun_matrix(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Grid {
    normal(rng, fan_in, fan_out, 1, 1.0 / (fan_in as f64).sqrt())
}
