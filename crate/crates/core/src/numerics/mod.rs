//! Dense grids, the reverse-mode tape, and geometric resampling.

mod grid;
pub mod gradcheck;
pub mod init;
pub mod ops;
mod sample;
mod tape;
mod transform;

pub use grid::{FeatureMap, Grid};
pub use sample::{
    bilinear_resample, bilinear_resample_var, warp_apply, warp_apply_var, SamplingPlan,
};
pub use tape::{BackwardCtx, Gradients, ParamStore, Parameter, Tape, Var};
pub use transform::ViewTransform;
