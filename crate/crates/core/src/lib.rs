pub mod data;
pub mod error;
pub mod featurizer;
pub mod gradient_suite;
pub mod downsample;
pub mod jbu;
pub mod metrics;
pub mod sharpen;
pub mod tiler;
pub mod trainer;
pub mod upsampler;
pub mod numerics;

pub use error::{Error, Result};
pub use featurizer::{DistributionStats, Featurizer, FeaturizerKind, FeaturizerSpec, ToyFeaturizer};
pub use numerics::{FeatureMap, Grid, ParamStore, Tape, Var, ViewTransform};
