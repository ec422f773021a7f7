//! Multi-view consistency training.
//!
//! For every image the upsampler builds `F_hr`; for each random view `T`
//! the prediction is `downsample(warp(F_hr, T))` and the target is the
//! de-biased, normalized featurization of `warp(image, T)`. The loss is the
//! mean squared error averaged over views and images.

mod checkpoint;
mod nadam;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{config_digest, Checkpoint, MAGIC, VERSION};
pub use nadam::{NAdam, NAdamConfig};

use crate::error::{ensure, Error, Result};
use crate::featurizer::{phi_s_fit, DistributionStats, Featurizer, DEBIAS_PARAM};
use crate::metrics::{crf_loss, fidelity, median_gamma, mmd2_unbiased, tv_loss, MetricsReport};
use crate::numerics::{
    bilinear_resample, ops, warp_apply, warp_apply_var, Gradients, Grid, ParamStore, Tape, Var,
    ViewTransform,
};
use crate::upsampler::{PreparedImage, Upsampler};

/// Ranges of the random view transforms. Zero ranges give the identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    /// Scale is drawn uniformly from `[1, max_scale]`.
    pub max_scale: f64,
    /// Per-axis shift bound, as a fraction of the image size.
    pub max_shift: f64,
    pub hflip_prob: f64,
    pub max_rotation_deg: f64,
    /// Bound on each of the eight perspective perturbation entries.
    pub max_perspective: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_scale: 1.8,
            max_shift: 0.2,
            hflip_prob: 0.5,
            max_rotation_deg: 15.0,
            max_perspective: 0.05,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_scale: 1.0,
            max_shift: 0.0,
            hflip_prob: 0.0,
            max_rotation_deg: 0.0,
            max_perspective: 0.0,
        }
    }
}

fn symmetric(rng: &mut impl Rng, bound: f64) -> f64 {
    if bound > 0.0 {
        rng.gen_range(-bound..=bound)
    } else {
        0.0
    }
}

pub fn sample_view_transform(rng: &mut impl Rng, cfg: &AugmentConfig) -> ViewTransform {
    let scale = if cfg.max_scale > 1.0 {
        rng.gen_range(1.0..=cfg.max_scale)
    } else {
        1.0
    };
    let shift = (symmetric(rng, cfg.max_shift), symmetric(rng, cfg.max_shift));
    let hflip = cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob.min(1.0));
    let rotation = symmetric(rng, cfg.max_rotation_deg).to_radians();
    let mut perspective = [0.0; 8];
    for p in perspective.iter_mut() {
        *p = symmetric(rng, cfg.max_perspective);
    }
    ViewTransform {
        scale,
        shift,
        hflip,
        rotation,
        perspective,
    }
}

fn default_steps() -> usize {
    3000
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-4
}
fn default_jitters() -> usize {
    5
}
fn default_factor() -> usize {
    2
}
fn default_eval_jitters() -> usize {
    2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Learning rate of the de-bias buffer; the global rate when unset.
    #[serde(default)]
    pub debias_learning_rate: Option<f64>,
    #[serde(default = "default_jitters")]
    pub num_jitters: usize,
    #[serde(default)]
    pub optimizer: NAdamConfig,
    #[serde(default = "default_factor")]
    pub factor: usize,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub seed: u64,
    /// Views per image during evaluation.
    #[serde(default = "default_eval_jitters")]
    pub eval_jitters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            debias_learning_rate: None,
            num_jitters: default_jitters(),
            optimizer: NAdamConfig::default(),
            factor: default_factor(),
            augment: AugmentConfig::default(),
            seed: 0,
            eval_jitters: default_eval_jitters(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(what.to_string()));
        if self.batch_size == 0 || self.num_jitters == 0 || self.eval_jitters == 0 {
            return bad("batch_size, num_jitters and eval_jitters must be positive");
        }
        if !(self.learning_rate > 0.0) || self.debias_learning_rate.is_some_and(|l| !(l > 0.0)) {
            return bad("learning rates must be positive");
        }
        if self.factor < 2 {
            return bad("training needs an upsample factor of at least 2");
        }
        let a = &self.augment;
        if a.max_scale < 1.0
            || a.max_shift < 0.0
            || !(0.0..=1.0).contains(&a.hflip_prob)
            || a.max_rotation_deg < 0.0
            || a.max_perspective < 0.0
        {
            return bad("augmentation ranges must be non-negative, scale ≥ 1, hflip in [0, 1]");
        }
        Ok(())
    }

    fn lr_for(&self, name: &str) -> f64 {
        match self.debias_learning_rate {
            Some(lr) if name == DEBIAS_PARAM => lr,
            _ => self.learning_rate,
        }
    }
}

/// Multi-view consistency loss of one image on `tape`.
pub fn consistency_loss(
    tape: &mut Tape,
    up: &Upsampler,
    store: &ParamStore,
    stats: &DistributionStats,
    featurizer: &dyn Featurizer,
    prep: &PreparedImage,
    views: &[ViewTransform],
) -> Result<Var> {
    ensure!(
        !views.is_empty(),
        Error::InvalidArgument("consistency loss needs at least one view".into())
    );
    let f_hr = up.upsample(tape, store, prep, stats)?;
    let mut terms = Vec::with_capacity(views.len());
    for t in views {
        let (pred, target) = view_pair(tape, up, store, stats, featurizer, prep, f_hr, t)?;
        terms.push(ops::mse(tape, pred, target)?);
    }
    let total = ops::add_all(tape, &terms)?;
    Ok(ops::scale(tape, total, 1.0 / views.len() as f64))
}

#[allow(clippy::too_many_arguments)]
fn view_pair(
    tape: &mut Tape,
    up: &Upsampler,
    store: &ParamStore,
    stats: &DistributionStats,
    featurizer: &dyn Featurizer,
    prep: &PreparedImage,
    f_hr: Var,
    t: &ViewTransform,
) -> Result<(Var, Var)> {
    let side = up.output_side();
    let warped = warp_apply_var(tape, f_hr, t, side, side)?;
    let pred = up.downsampler.forward(tape, store, warped)?;
    let img = &prep.image;
    let view = warp_apply(img, t, img.height(), img.width())?;
    let raw = featurizer.featurize(&bilinear_resample(&view, up.resolution, up.resolution)?)?;
    let target = up.normalize(tape, store, &raw, stats)?;
    Ok((pred, target))
}

/// Loss and gradients of one image.
pub fn image_gradients(
    up: &Upsampler,
    store: &ParamStore,
    stats: &DistributionStats,
    featurizer: &dyn Featurizer,
    prep: &PreparedImage,
    views: &[ViewTransform],
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let loss = consistency_loss(&mut tape, up, store, stats, featurizer, prep, views)?;
    Ok((tape.value(loss).item(), tape.gradients(loss)?))
}

/// Fits normalization statistics on the raw global-view features.
pub fn fit_stats(prepared: &[PreparedImage]) -> Result<DistributionStats> {
    let samples: Vec<Grid> = prepared.iter().map(|p| p.global.clone()).collect();
    phi_s_fit(&samples)
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub losses: Vec<f64>,
}

/// Owns the state of one training run.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub upsampler: Upsampler,
    featurizer: &'a dyn Featurizer,
    prepared: Vec<PreparedImage>,
    pub stats: DistributionStats,
    pub store: ParamStore,
    optimizer: NAdam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub losses: Vec<f64>,
}

impl<'a> Trainer<'a> {
    /// Featurizes every image once and initializes parameters from
    /// `config.seed`. Statistics are fit on `images` unless given.
    pub fn new(
        config: TrainConfig,
        upsampler: Upsampler,
        featurizer: &'a dyn Featurizer,
        images: &[Grid],
        stats: Option<DistributionStats>,
    ) -> Result<Self> {
        config.validate()?;
        ensure!(
            !images.is_empty(),
            Error::MissingDataset("the training set is empty".into())
        );
        ensure!(
            upsampler.factor == config.factor,
            Error::InvalidArgument(format!(
                "upsampler built for factor {}, config says {}",
                upsampler.factor, config.factor
            ))
        );
        let prepared = images
            .par_iter()
            .map(|img| upsampler.prepare(featurizer, img))
            .collect::<Result<Vec<_>>>()?;
        let stats = match stats {
            Some(s) => s,
            None => fit_stats(&prepared)?,
        };
        let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
        let store = upsampler.init_store(&mut init_rng);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1);
        Ok(Self {
            optimizer: NAdam::new(config.optimizer.clone()),
            order: (0..prepared.len()).collect(),
            cursor: prepared.len(),
            config,
            upsampler,
            featurizer,
            prepared,
            stats,
            store,
            rng,
            losses: Vec::new(),
        })
    }

    pub fn step_count(&self) -> usize {
        self.losses.len()
    }

    /// Image indices of the next batch; the order is reshuffled every epoch.
    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size {
            if self.cursor == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// One optimizer step; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = self.next_batch();
        let views: Vec<Vec<ViewTransform>> = batch
            .iter()
            .map(|_| {
                (0..self.config.num_jitters)
                    .map(|_| sample_view_transform(&mut self.rng, &self.config.augment))
                    .collect()
            })
            .collect();
        let (up, store, stats, feat) = (&self.upsampler, &self.store, &self.stats, self.featurizer);
        let results = batch
            .par_iter()
            .zip(&views)
            .map(|(&i, v)| image_gradients(up, store, stats, feat, &self.prepared[i], v))
            .collect::<Result<Vec<_>>>()?;
        // Reduce in batch order so the result is independent of scheduling.
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut grads = Gradients::default();
        for (l, g) in &results {
            loss += l * inv;
            grads.merge(g);
        }
        let step = self.losses.len();
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss {loss} at step {step} (seed {}, images {batch:?})",
                self.config.seed
            )));
        }
        self.store.zero_grad();
        self.store.accumulate(&grads)?;
        for (_, p) in self.store.iter_mut() {
            for g in p.grad.data_mut() {
                *g *= inv;
            }
        }
        let cfg = &self.config;
        self.optimizer.update(&mut self.store, |n| cfg.lr_for(n))?;
        self.losses.push(loss);
        Ok(loss)
    }

    pub fn checkpoint(&self, config_json: &str) -> Checkpoint {
        Checkpoint {
            step: self.losses.len() as u64,
            config_json: config_json.to_string(),
            params: self.store.clone(),
            stats: self.stats.clone(),
        }
    }
}

/// Runs `config.steps` steps. `on_step` sees the step count, loss and
/// trainer after every step (for logging or periodic checkpoints).
pub fn train(
    config: &TrainConfig,
    upsampler: &Upsampler,
    featurizer: &dyn Featurizer,
    images: &[Grid],
    config_json: &str,
    mut on_step: impl FnMut(usize, f64, &Trainer<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), upsampler.clone(), featurizer, images, None)?;
    for _ in 0..config.steps {
        let loss = trainer.step()?;
        on_step(trainer.step_count(), loss, &trainer)?;
    }
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(config_json),
        losses: trainer.losses,
    })
}

/// Per-image evaluation outputs.
struct ImageEval {
    preds: Vec<Grid>,
    targets: Vec<Grid>,
    tv: f64,
    crf: f64,
    crf_skipped: usize,
    lowres: Grid,
    hires: Grid,
}

const MMD_SAMPLES: usize = 200;

/// Evenly spaced token vectors from `maps`, at most `n` of them.
fn subsample_tokens(maps: &[Grid], n: usize) -> Vec<Vec<f64>> {
    let total: usize = maps.iter().map(|m| m.pixels()).sum();
    let stride = total.div_ceil(n).max(1);
    maps.iter()
        .flat_map(|m| (0..m.pixels()).map(move |p| m.token(p).to_vec()))
        .step_by(stride)
        .collect()
}

/// Fidelity, TV, CRF and MMD of a trained upsampler on `images`, without any
/// gradient work. Views are drawn from `config.seed` and the augmentation
/// ranges, so paired runs see identical views.
pub fn evaluate(
    config: &TrainConfig,
    upsampler: &Upsampler,
    store: &ParamStore,
    stats: &DistributionStats,
    featurizer: &dyn Featurizer,
    images: &[Grid],
) -> Result<MetricsReport> {
    ensure!(
        !images.is_empty(),
        Error::MissingDataset("the evaluation set is empty".into())
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let views: Vec<Vec<ViewTransform>> = images
        .iter()
        .map(|_| {
            (0..config.eval_jitters)
                .map(|_| sample_view_transform(&mut rng, &config.augment))
                .collect()
        })
        .collect();
    let side = upsampler.output_side();
    let evals = images
        .par_iter()
        .zip(&views)
        .map(|(img, vs)| -> Result<ImageEval> {
            let prep = upsampler.prepare(featurizer, img)?;
            let mut tape = Tape::new();
            let f_hr = upsampler.upsample(&mut tape, store, &prep, stats)?;
            let mut preds = Vec::with_capacity(vs.len());
            let mut targets = Vec::with_capacity(vs.len());
            for t in vs {
                let (p, y) = view_pair(&mut tape, upsampler, store, stats, featurizer, &prep, f_hr, t)?;
                preds.push(tape.value(p).clone());
                targets.push(tape.value(y).clone());
            }
            let hires = tape.value(f_hr).clone();
            let lowres = upsampler.normalize(&mut tape, store, &prep.global, stats)?;
            let guidance = bilinear_resample(img, side, side)?;
            let crf = crf_loss(&hires, &guidance)?;
            Ok(ImageEval {
                preds,
                targets,
                tv: tv_loss(&hires),
                crf: crf.value,
                crf_skipped: crf.skipped,
                lowres: tape.value(lowres).clone(),
                hires,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = evals.len() as f64;
    let preds: Vec<Grid> = evals.iter().flat_map(|e| e.preds.iter().cloned()).collect();
    let targets: Vec<Grid> = evals.iter().flat_map(|e| e.targets.iter().cloned()).collect();
    let fid = fidelity(&preds, &targets)?;
    let lows: Vec<Grid> = evals.iter().map(|e| e.lowres.clone()).collect();
    let highs: Vec<Grid> = evals.iter().map(|e| e.hires.clone()).collect();
    let xs = subsample_tokens(&lows, MMD_SAMPLES);
    let ys = subsample_tokens(&highs, MMD_SAMPLES);
    let mmd2 = mmd2_unbiased(&xs, &ys, median_gamma(&xs)?)?;
    Ok(MetricsReport {
        upsampler: upsampler.kind().to_string(),
        fidelity: fid.value,
        fidelity_infinite: fid.infinite,
        tv: evals.iter().map(|e| e.tv).sum::<f64>() / n,
        crf: evals.iter().map(|e| e.crf).sum::<f64>() / n,
        crf_skipped: evals.iter().map(|e| e.crf_skipped).sum(),
        mmd2,
        tiling_error: Vec::new(),
        cost: Vec::new(),
        seed: config.seed,
        config_digest: String::new(),
        images: images.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic_dataset, SyntheticSpec};
    use crate::featurizer::{FeaturizerKind, FeaturizerSpec, ToyFeaturizer};
    use crate::upsampler::{UpsamplerConfig, UpsamplerKind};

    fn featurizer() -> ToyFeaturizer {
        ToyFeaturizer::new(FeaturizerSpec {
            kind: FeaturizerKind::SmoothConv,
            patch: 4,
            channels: 4,
            input_resolution: 16,
            seed: 5,
            bias_amplitude: 0.5,
        })
        .unwrap()
    }

    fn images(n: usize) -> Vec<Grid> {
        synthetic_dataset(&SyntheticSpec {
            count: n,
            side: 32,
            seed: 3,
        })
        .unwrap()
    }

    fn small_config(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 2,
            num_jitters: 2,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_ranges_give_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            assert!(sample_view_transform(&mut rng, &AugmentConfig::identity()).is_identity());
        }
    }

    #[test]
    fn view_sampling_is_deterministic_and_in_range() {
        let cfg = AugmentConfig::default();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_view_transform(&mut rng, &cfg)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
        for t in draw(5) {
            assert!((1.0..=1.8).contains(&t.scale));
            assert!(t.shift.0.abs() <= 0.2 && t.shift.1.abs() <= 0.2);
            assert!(t.rotation.abs() <= 15f64.to_radians() + 1e-15);
            assert!(t.perspective.iter().all(|p| p.abs() <= 0.05));
        }
    }

    #[test]
    fn hflip_rate_is_near_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cfg = AugmentConfig::default();
        let flips = (0..10_000)
            .filter(|_| sample_view_transform(&mut rng, &cfg).hflip)
            .count();
        assert!((flips as f64 / 1e4 - 0.5).abs() < 0.02, "{flips}");
    }

    #[test]
    fn constant_images_with_identity_views_have_zero_loss() {
        let f = featurizer();
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::Bilinear), &f, 2).unwrap();
        let store = up.init_store(&mut ChaCha8Rng::seed_from_u64(0));
        let img = Grid::filled(32, 32, 3, 0.4);
        let prep = up.prepare(&f, &img).unwrap();
        let stats = DistributionStats::identity(4);
        let (loss, _) =
            image_gradients(&up, &store, &stats, &f, &prep, &[ViewTransform::identity()]).unwrap();
        assert!(loss.abs() < 1e-24, "{loss}");
    }

    #[test]
    fn loss_is_non_negative_and_traces_are_reproducible() {
        let f = featurizer();
        let imgs = images(4);
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::FeatSharp), &f, 2).unwrap();
        let run = || train(&small_config(4), &up, &f, &imgs, "{}", |_, _, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert!(a.losses.iter().all(|&l| l >= 0.0));
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.checkpoint.to_bytes(), b.checkpoint.to_bytes());
    }

    #[test]
    fn zero_step_training_returns_initialization() {
        let f = featurizer();
        let imgs = images(2);
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::Jbu), &f, 2).unwrap();
        let out = train(&small_config(0), &up, &f, &imgs, "{}", |_, _, _| Ok(())).unwrap();
        let init = up.init_store(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(out.checkpoint.params, init);
        assert_eq!(out.checkpoint.step, 0);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn empty_dataset_and_bad_config_are_rejected() {
        let f = featurizer();
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::Bilinear), &f, 2).unwrap();
        assert!(matches!(
            train(&small_config(1), &up, &f, &[], "{}", |_, _, _| Ok(())),
            Err(Error::MissingDataset(_))
        ));
        let mut cfg = small_config(1);
        cfg.factor = 1;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostic() {
        let f = featurizer();
        let imgs = images(2);
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::Bilinear), &f, 2).unwrap();
        let mut t = Trainer::new(small_config(1), up, &f, &imgs, None).unwrap();
        t.store.get_mut(DEBIAS_PARAM).unwrap().value.fill(f64::NAN);
        match t.step() {
            Err(Error::NonFinite(msg)) => assert!(msg.contains("seed 0") && msg.contains("step 0")),
            other => panic!("expected a non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn bilinear_evaluation_reports_finite_metrics() {
        let f = featurizer();
        let imgs = images(3);
        let up = Upsampler::new(UpsamplerConfig::new(UpsamplerKind::Bilinear), &f, 2).unwrap();
        let t = Trainer::new(small_config(0), up.clone(), &f, &imgs, None).unwrap();
        let r = evaluate(&small_config(0), &up, &t.store, &t.stats, &f, &imgs).unwrap();
        assert!(r.fidelity.is_finite() && r.fidelity > 0.0);
        assert!(r.tv.is_finite() && r.tv >= 0.0);
        assert!(r.crf.is_finite() && r.crf >= 0.0);
        assert!(r.mmd2.is_finite());
        assert_eq!(r.images, 3);
    }
}
