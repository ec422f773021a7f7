//! Central finite-difference verification of tape gradients.

use super::{ParamStore, Tape, Var};
use crate::error::Result;

/// Denominator floor for the relative error, so entries whose true gradient
/// is zero are judged by absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Entries of a tensor are also judged against this fraction of the
/// tensor's largest gradient magnitude, which keeps near-zero entries from
/// measuring only the finite-difference truncation term.
pub const TENSOR_SCALE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    /// Entry index and `(analytic, numeric)` values at the worst entry.
    pub worst: (usize, f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error() < tol
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of `loss_fn` with central differences of step
/// `step` for every entry of every parameter in `store` (or only those in
/// `only`, when given).
pub fn check_gradients<F>(
    store: &ParamStore,
    step: f64,
    only: Option<&[&str]>,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(&mut tape, store)?;
    let grads = tape.gradients(loss)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(&mut t, s)?;
        Ok(t.value(l).item())
    };

    let mut report = GradCheckReport::default();
    let mut probe = store.clone();
    for (name, param) in store.iter() {
        if only.is_some_and(|names| !names.contains(&name)) {
            continue;
        }
        let n = param.value.len();
        let mut check = ParamCheck {
            name: name.to_string(),
            entries: n,
            max_rel_error: 0.0,
            worst: (0, 0.0, 0.0),
        };
        let scale = grads
            .get(name)
            .map_or(0.0, |g| g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
        let floor = REL_FLOOR.max(TENSOR_SCALE_FLOOR * scale);
        for i in 0..n {
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[i]);
            let original = param.value.data()[i];
            probe.get_mut(name)?.value.data_mut()[i] = original + step;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = original - step;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = original;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic, numeric, floor);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = check.max_rel_error.max(err);
                check.worst = (i, analytic, numeric);
            }
        }
        report.params.push(check);
    }
    Ok(report)
}
