use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use featsharp::featurizer::FeaturizerSpec;
use featsharp::trainer::TrainConfig;
use featsharp::upsampler::{UpsamplerConfig, UpsamplerKind};
use serde::{Deserialize, Serialize};

/// Where images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic { count: usize, seed: u64 },
    Folder { path: PathBuf },
}

fn default_train_source() -> DatasetSource {
    DatasetSource::Synthetic { count: 256, seed: 7 }
}

fn default_eval_source() -> DatasetSource {
    DatasetSource::Synthetic { count: 32, seed: 1007 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "default_train_source")]
    pub train: DatasetSource,
    #[serde(default = "default_eval_source")]
    pub eval: DatasetSource,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: default_train_source(),
            eval: default_eval_source(),
        }
    }
}

fn default_levels() -> Vec<usize> {
    vec![1, 2, 3, 4]
}

fn default_max_x() -> u64 {
    10_000
}

fn default_cost_rows() -> u64 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostConfig {
    /// Upper bound of the exhaustive inequality check.
    #[serde(default = "default_max_x")]
    pub max_x: u64,
    /// Depths written to the cost table, `1..=rows`.
    #[serde(default = "default_cost_rows")]
    pub rows: u64,
    #[serde(default)]
    pub throughput: bool,
    #[serde(default)]
    pub throughput_factors: Vec<usize>,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            max_x: default_max_x(),
            rows: default_cost_rows(),
            throughput: false,
            throughput_factors: vec![2, 3, 4],
        }
    }
}

fn default_upsampler() -> UpsamplerConfig {
    UpsamplerConfig::new(UpsamplerKind::FeatSharp)
}

/// Everything a command may need. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub featurizer: FeaturizerSpec,
    #[serde(default = "default_upsampler")]
    pub upsampler: UpsamplerConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataConfig,
    /// Checkpoint read by `eval` and `upsample`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Input image of `upsample` and `tiling-error`; a synthetic image when
    /// unset.
    #[serde(default)]
    pub image: Option<PathBuf>,
    #[serde(default = "default_levels")]
    pub tiling_levels: Vec<usize>,
    #[serde(default)]
    pub cost: CostConfig,
    /// Steps between intermediate checkpoints; only the final one when unset.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

/// The part of a run that determines the trained model; stored in
/// checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub featurizer: FeaturizerSpec,
    pub upsampler: UpsamplerConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        upsampler: Option<UpsamplerKind>,
        factor: Option<usize>,
    ) {
        if let Some(s) = seed {
            self.train.seed = s;
        }
        if let Some(k) = upsampler {
            self.upsampler.kind = k;
        }
        if let Some(z) = factor {
            self.train.factor = z;
        }
    }

    /// Checks values and that every input path exists.
    pub fn validate(&self) -> Result<()> {
        self.featurizer.validate()?;
        self.train.validate()?;
        for src in [&self.data.train, &self.data.eval] {
            if let DatasetSource::Folder { path } = src {
                if !path.is_dir() {
                    bail!("dataset folder {} does not exist", path.display());
                }
            }
        }
        for p in [&self.checkpoint, &self.image].into_iter().flatten() {
            if !p.is_file() {
                bail!("input file {} does not exist", p.display());
            }
        }
        if self.tiling_levels.iter().any(|&u| u == 0) {
            bail!("tiling levels must be positive");
        }
        Ok(())
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            featurizer: self.featurizer.clone(),
            upsampler: self.upsampler.clone(),
            train: self.train.clone(),
        }
    }
}

impl ModelConfig {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).context("parsing the configuration stored in the checkpoint")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_uses_defaults() {
        let c: RunConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(c.featurizer.input_resolution, 64);
        assert_eq!(c.train.learning_rate, 1e-4);
        assert_eq!(c.upsampler.kind, UpsamplerKind::FeatSharp);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trian": {}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
    }

    #[test]
    fn missing_paths_fail_validation() {
        let c: RunConfig =
            serde_json::from_str(r#"{"data": {"train": {"kind": "folder", "path": "/no/such/dir"}}}"#).unwrap();
        assert!(c.validate().is_err());
    }

    #[test]
    fn overrides_apply() {
        let mut c = RunConfig::default();
        c.apply_overrides(Some(9), Some(UpsamplerKind::S2), Some(3));
        assert_eq!((c.train.seed, c.upsampler.kind, c.train.factor), (9, UpsamplerKind::S2, 3));
    }

    #[test]
    fn model_config_round_trips() {
        let m = RunConfig::default().model();
        assert_eq!(ModelConfig::from_json(&m.to_json()).unwrap(), m);
    }
}
