use crate::error::Result;
use crate::numerics::{ops, Grid, ParamStore, Tape, Var};

/// Parameter name of the learnable de-bias grid.
pub const DEBIAS_PARAM: &str = "debias.g";

/// Learnable additive grid `g` with the featurizer's native output shape.
/// It is added to the global view and to every tile before normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DebiasBuffer {
    pub side: usize,
    pub channels: usize,
}

impl DebiasBuffer {
    pub fn new(side: usize, channels: usize) -> Self {
        Self { side, channels }
    }

    /// Registers a zero-initialized buffer.
    pub fn init(&self, store: &mut ParamStore) {
        store.insert(DEBIAS_PARAM, Grid::zeros(self.side, self.side, self.channels));
    }
}

pub fn debias_apply(f_out: &Grid, g: &Grid) -> Result<Grid> {
    f_out.zip_map(g, |a, b| a + b)
}

pub fn debias_apply_var(tape: &mut Tape, f_out: Var, g: Var) -> Result<Var> {
    ops::add(tape, f_out, g)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_buffer_is_identity_and_inverse_cancels() {
        let f = Grid::from_fn(3, 3, 2, |y, x, c| (y * 3 + x) as f64 - c as f64);
        assert_eq!(debias_apply(&f, &Grid::zeros(3, 3, 2)).unwrap(), f);
        let neg = f.scale(-1.0);
        assert!(debias_apply(&f, &neg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(debias_apply(&Grid::zeros(3, 3, 2), &Grid::zeros(2, 3, 2)).is_err());
    }
}
