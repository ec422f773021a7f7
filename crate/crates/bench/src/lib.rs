//! Fixtures shared by the benchmarks.

use featsharp::data::{synthetic_dataset, SyntheticSpec};
use featsharp::featurizer::{phi_s_fit, FeaturizerKind, FeaturizerSpec, ToyFeaturizer};
use featsharp::upsampler::{PreparedImage, Upsampler, UpsamplerConfig, UpsamplerKind};
use featsharp::{DistributionStats, Featurizer, Grid, ParamStore};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A featurizer of input side `resolution` with 16 channels on 4-pixel
/// patches.
pub fn featurizer(resolution: usize) -> ToyFeaturizer {
    ToyFeaturizer::new(FeaturizerSpec {
        kind: FeaturizerKind::SmoothConv,
        patch: 4,
        channels: 16,
        input_resolution: resolution,
        seed: 0,
        bias_amplitude: 0.0,
    })
    .expect("valid featurizer spec")
}

pub fn image(side: usize, seed: u64) -> Grid {
    synthetic_dataset(&SyntheticSpec { count: 1, side, seed })
        .expect("synthetic image")
        .remove(0)
}

/// Everything one upsampling call needs.
pub struct Fixture {
    pub featurizer: ToyFeaturizer,
    pub upsampler: Upsampler,
    pub store: ParamStore,
    pub prepared: PreparedImage,
    pub stats: DistributionStats,
}

impl Fixture {
    pub fn new(kind: UpsamplerKind, resolution: usize, factor: usize) -> Self {
        let featurizer = featurizer(resolution);
        let upsampler = Upsampler::new(UpsamplerConfig::new(kind), &featurizer, factor).expect("valid upsampler");
        let store = upsampler.init_store(&mut ChaCha8Rng::seed_from_u64(0));
        let prepared = upsampler
            .prepare(&featurizer, &image(upsampler.image_side(), 1))
            .expect("image has the guidance side");
        // Several images, so small resolutions still have more tokens than channels.
        let globals: Vec<Grid> = (2..10)
            .map(|seed| {
                upsampler
                    .prepare(&featurizer, &image(upsampler.image_side(), seed))
                    .expect("prepare")
                    .global
            })
            .collect();
        let stats = phi_s_fit(&globals).expect("stats fit");
        Self {
            featurizer,
            upsampler,
            store,
            prepared,
            stats,
        }
    }

    pub fn upsample(&self) -> Grid {
        self.upsampler
            .upsample_grid(&self.store, &self.prepared, &self.stats)
            .expect("upsample")
    }

    /// Featurizer calls and the upsample together.
    pub fn end_to_end(&self) -> Grid {
        let prep = self
            .upsampler
            .prepare(&self.featurizer, &self.prepared.image)
            .expect("prepare");
        self.upsampler
            .upsample_grid(&self.store, &prep, &self.stats)
            .expect("upsample")
    }

    pub fn output_tokens(&self) -> usize {
        let s = self.upsampler.output_side();
        s * s
    }

    pub fn featurizer_calls(&self) -> usize {
        self.upsampler.kind().featurizer_calls(self.upsampler.factor)
    }

    pub fn channels(&self) -> usize {
        self.featurizer.channels()
    }
}
