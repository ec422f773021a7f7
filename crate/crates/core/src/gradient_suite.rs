//! Finite-difference checks of every learnable parameter through the full
//! training loss, on small grids with randomized parameters (zero-initialized
//! projections would hide most gradients).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{synthetic_dataset, SyntheticSpec};
use crate::error::Result;
use crate::featurizer::{phi_s_fit, Featurizer, FeaturizerKind, FeaturizerSpec, ToyFeaturizer};
use crate::numerics::gradcheck::{check_gradients, GradCheckReport};
use crate::numerics::ParamStore;
use crate::sharpen::BlockMode;
use crate::trainer::{consistency_loss, sample_view_transform, AugmentConfig};
use crate::upsampler::{ResidualPath, Upsampler, UpsamplerConfig, UpsamplerKind};

/// Finite-difference step of the suite.
pub const STEP: f64 = 1e-3;
/// Largest relative error the suite accepts.
pub const TOLERANCE: f64 = 1e-4;

/// Standard deviation of the noise added to initialized parameters.
pub const PERTURB_STD: f64 = 0.1;

/// One checked configuration.
#[derive(Clone, Debug)]
pub struct SuiteCase {
    pub label: String,
    pub report: GradCheckReport,
}

/// Every upsampler configuration the suite covers: the five paths, both
/// refinement residuals, and the four block compositions.
pub fn suite_configs() -> Vec<(String, UpsamplerConfig)> {
    let mut out: Vec<(String, UpsamplerConfig)> = UpsamplerKind::ALL
        .iter()
        .map(|&k| (k.to_string(), UpsamplerConfig::new(k)))
        .collect();
    let mut c = UpsamplerConfig::new(UpsamplerKind::FeatSharp);
    c.residual = ResidualPath::Bilinear;
    out.push(("featsharp/bilinear-residual".into(), c));
    for mode in BlockMode::ALL {
        let mut c = UpsamplerConfig::new(UpsamplerKind::FeatSharp);
        c.sharpen.mode = mode;
        c.sharpen.window = 3;
        out.push((format!("featsharp/{mode:?}"), c));
    }
    out
}

fn perturb(store: &mut ParamStore, rng: &mut impl Rng, std: f64) {
    for (_, p) in store.iter_mut() {
        for v in p.value.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
}

/// Checks one configuration on a `16 × 16` image with an `8 × 8` output.
pub fn check_config(config: UpsamplerConfig, seed: u64, step: f64) -> Result<GradCheckReport> {
    let featurizer = ToyFeaturizer::new(FeaturizerSpec {
        kind: FeaturizerKind::Wrapped,
        patch: 2,
        channels: 3,
        input_resolution: 8,
        seed,
        bias_amplitude: 0.3,
    })?;
    let up = Upsampler::new(config, &featurizer, 2)?;
    let images = synthetic_dataset(&SyntheticSpec {
        count: 3,
        side: up.image_side(),
        seed,
    })?;
    let prepared = images
        .iter()
        .map(|img| up.prepare(&featurizer, img))
        .collect::<Result<Vec<_>>>()?;
    let globals: Vec<_> = prepared.iter().map(|p| p.global.clone()).collect();
    let stats = phi_s_fit(&globals)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = up.init_store(&mut rng);
    perturb(&mut store, &mut rng, PERTURB_STD);
    let views: Vec<_> = (0..2)
        .map(|_| sample_view_transform(&mut rng, &AugmentConfig::default()))
        .collect();
    let f: &dyn Featurizer = &featurizer;
    check_gradients(&store, step, None, |tape, s| {
        consistency_loss(tape, &up, s, &stats, f, &prepared[0], &views)
    })
}

pub fn run_suite(step: f64) -> Result<Vec<SuiteCase>> {
    suite_configs()
        .into_iter()
        .enumerate()
        .map(|(i, (label, cfg))| {
            Ok(SuiteCase {
                label,
                report: check_config(cfg, 100 + i as u64, step)?,
            })
        })
        .collect()
}
