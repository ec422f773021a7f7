//! The five upsampling paths behind one interface.
//!
//! Every path maps a guidance image of side `R·z` to a feature map of side
//! `(R/p)·z` in PHI-S normalized space:
//!
//! * `bilinear`: the global view's features, bilinearly resized.
//! * `jbu`: the global view's features through a prime-factor JBU stack.
//! * `tile`: the stitched `z × z` tile mosaic.
//! * `s2`: `0.5 · bilinear + 0.5 · tile`.
//! * `featsharp`: the refinement block over the residual path (bilinear or
//!   JBU) and the tile mosaic.
//!
//! All paths share a learnable attention downsampler and, optionally, the
//! de-bias buffer, which is added to the global view and to every tile.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::downsample::DownsamplerParams;
use crate::error::{ensure, Error, Result};
use crate::featurizer::{phi_s_apply_var, DebiasBuffer, DistributionStats, Featurizer, DEBIAS_PARAM};
use crate::jbu::{JbuConfig, JbuStack};
use crate::numerics::{bilinear_resample, bilinear_resample_var, ops, Grid, ParamStore, Tape, Var};
use crate::sharpen::{SharpenConfig, SharpenParams};
use crate::tiler::{check_beta, make_tiles};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerKind {
    Bilinear,
    Jbu,
    Tile,
    S2,
    #[serde(rename = "featsharp")]
    FeatSharp,
}

impl UpsamplerKind {
    pub const ALL: [UpsamplerKind; 5] = [
        UpsamplerKind::Bilinear,
        UpsamplerKind::Jbu,
        UpsamplerKind::Tile,
        UpsamplerKind::S2,
        UpsamplerKind::FeatSharp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            UpsamplerKind::Bilinear => "bilinear",
            UpsamplerKind::Jbu => "jbu",
            UpsamplerKind::Tile => "tile",
            UpsamplerKind::S2 => "s2",
            UpsamplerKind::FeatSharp => "featsharp",
        }
    }

    /// Whether the path featurizes the `z × z` tiles.
    pub fn uses_tiles(self) -> bool {
        matches!(self, UpsamplerKind::Tile | UpsamplerKind::S2 | UpsamplerKind::FeatSharp)
    }

    /// Featurizer evaluations per image: the global view plus `u²` tiles.
    pub fn featurizer_calls(self, u: usize) -> usize {
        match self {
            UpsamplerKind::Bilinear | UpsamplerKind::Jbu => 1,
            UpsamplerKind::Tile => u * u,
            UpsamplerKind::S2 | UpsamplerKind::FeatSharp => 1 + u * u,
        }
    }
}

impl fmt::Display for UpsamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for UpsamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UpsamplerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown upsampler '{s}'")))
    }
}

/// Residual input of the refinement block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPath {
    Bilinear,
    #[default]
    Jbu,
}

fn default_kernel() -> usize {
    7
}

fn default_beta() -> f64 {
    0.5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerConfig {
    pub kind: UpsamplerKind,
    #[serde(default)]
    pub residual: ResidualPath,
    #[serde(default)]
    pub jbu: JbuConfig,
    #[serde(default)]
    pub sharpen: SharpenConfig,
    #[serde(default = "default_kernel")]
    pub downsample_kernel: usize,
    #[serde(default = "default_beta")]
    pub s2_beta: f64,
    #[serde(default = "default_true")]
    pub debias: bool,
}

impl UpsamplerConfig {
    pub fn new(kind: UpsamplerKind) -> Self {
        Self {
            kind,
            residual: ResidualPath::default(),
            jbu: JbuConfig::default(),
            sharpen: SharpenConfig::default(),
            downsample_kernel: default_kernel(),
            s2_beta: default_beta(),
            debias: true,
        }
    }
}

/// Featurizer outputs for one image that do not depend on any learnable
/// state, so they can be computed once and reused every step.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedImage {
    /// Guidance image of side `R·z`.
    pub image: Grid,
    /// Raw features of the image resized to `R`.
    pub global: Grid,
    /// Raw features of the `z × z` tiles in row-major order; empty for paths
    /// that do not tile.
    pub tiles: Vec<Grid>,
}

/// The structure of one upsampler; its learnable values live in a
/// [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Upsampler {
    pub config: UpsamplerConfig,
    pub factor: usize,
    pub channels: usize,
    pub grid_side: usize,
    pub resolution: usize,
    pub jbu: Option<JbuStack>,
    pub sharpen: Option<SharpenParams>,
    pub downsampler: DownsamplerParams,
}

impl Upsampler {
    pub fn new(config: UpsamplerConfig, featurizer: &dyn Featurizer, factor: usize) -> Result<Self> {
        ensure!(
            factor >= 1,
            Error::InvalidArgument(format!("upsample factor must be positive, got {factor}"))
        );
        check_beta(config.s2_beta)?;
        let channels = featurizer.channels();
        let needs_jbu = config.kind == UpsamplerKind::Jbu
            || (config.kind == UpsamplerKind::FeatSharp && config.residual == ResidualPath::Jbu);
        let jbu = if needs_jbu {
            Some(JbuStack::for_factor("jbu", factor, &config.jbu)?)
        } else {
            None
        };
        let sharpen = if config.kind == UpsamplerKind::FeatSharp {
            Some(SharpenParams::new("sharpen", channels, config.sharpen.clone())?)
        } else {
            None
        };
        let downsampler = DownsamplerParams::new("down", channels, config.downsample_kernel.max(factor | 1), factor)?;
        Ok(Self {
            factor,
            channels,
            grid_side: featurizer.grid_side(),
            resolution: featurizer.input_resolution(),
            jbu,
            sharpen,
            downsampler,
            config,
        })
    }

    pub fn kind(&self) -> UpsamplerKind {
        self.config.kind
    }

    /// Side of the guidance image.
    pub fn image_side(&self) -> usize {
        self.resolution * self.factor
    }

    /// Side of the upsampled feature map.
    pub fn output_side(&self) -> usize {
        self.grid_side * self.factor
    }

    pub fn debias_buffer(&self) -> Option<DebiasBuffer> {
        self.config
            .debias
            .then(|| DebiasBuffer::new(self.grid_side, self.channels))
    }

    /// Registers every learnable parameter of this upsampler.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        if let Some(j) = &self.jbu {
            j.init(store, rng);
        }
        if let Some(s) = &self.sharpen {
            s.init(store, rng);
        }
        self.downsampler.init(store);
        if let Some(d) = self.debias_buffer() {
            d.init(store);
        }
    }

    pub fn init_store(&self, rng: &mut impl Rng) -> ParamStore {
        let mut store = ParamStore::new();
        self.init(&mut store, rng);
        store
    }

    /// Runs the frozen featurizer on the global view and, when needed, the
    /// tiles of `image`.
    pub fn prepare(&self, featurizer: &dyn Featurizer, image: &Grid) -> Result<PreparedImage> {
        let side = self.image_side();
        ensure!(
            image.height() == side && image.width() == side && image.channels() == 3,
            Error::ResolutionMismatch {
                expected: side,
                height: image.height(),
                width: image.width(),
            }
        );
        let global = featurizer.featurize(&bilinear_resample(image, self.resolution, self.resolution)?)?;
        let tiles = if self.kind().uses_tiles() {
            make_tiles(image, self.factor, self.resolution)?
                .iter()
                .map(|t| featurizer.featurize(t))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(PreparedImage {
            image: image.clone(),
            global,
            tiles,
        })
    }

    /// De-biases and normalizes one raw featurizer output on the tape.
    pub fn normalize(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        raw: &Grid,
        stats: &DistributionStats,
    ) -> Result<Var> {
        let mut v = tape.constant(raw.clone());
        if self.config.debias {
            let g = tape.param(store, DEBIAS_PARAM)?;
            v = ops::add(tape, v, g)?;
        }
        phi_s_apply_var(tape, v, stats)
    }

    fn mosaic(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prep: &PreparedImage,
        stats: &DistributionStats,
    ) -> Result<Var> {
        ensure!(
            prep.tiles.len() == self.factor * self.factor,
            Error::InvalidArgument(format!(
                "prepared image holds {} tiles, the {} path needs {}",
                prep.tiles.len(),
                self.kind(),
                self.factor * self.factor
            ))
        );
        let blocks = prep
            .tiles
            .iter()
            .map(|t| self.normalize(tape, store, t, stats))
            .collect::<Result<Vec<_>>>()?;
        ops::tile_blocks(tape, &blocks, self.factor, self.factor)
    }

    /// The high-resolution prediction `F_hr` on the tape.
    pub fn upsample(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        prep: &PreparedImage,
        stats: &DistributionStats,
    ) -> Result<Var> {
        let out = self.output_side();
        let lowres = |tape: &mut Tape| self.normalize(tape, store, &prep.global, stats);
        let residual = |tape: &mut Tape, path: ResidualPath| -> Result<Var> {
            let f = lowres(tape)?;
            match (path, &self.jbu) {
                (ResidualPath::Jbu, Some(stack)) => stack.upsample(tape, store, f, &prep.image),
                _ => bilinear_resample_var(tape, f, out, out),
            }
        };
        match self.kind() {
            UpsamplerKind::Bilinear => residual(tape, ResidualPath::Bilinear),
            UpsamplerKind::Jbu => residual(tape, ResidualPath::Jbu),
            UpsamplerKind::Tile => self.mosaic(tape, store, prep, stats),
            UpsamplerKind::S2 => {
                let lo = residual(tape, ResidualPath::Bilinear)?;
                let hi = self.mosaic(tape, store, prep, stats)?;
                ops::lerp(tape, lo, hi, self.config.s2_beta)
            }
            UpsamplerKind::FeatSharp => {
                let r = residual(tape, self.config.residual)?;
                let m = self.mosaic(tape, store, prep, stats)?;
                self.sharpen
                    .as_ref()
                    .expect("featsharp upsampler without a refinement block")
                    .combine(tape, store, r, m)
            }
        }
    }

    /// Forward-only [`Upsampler::upsample`].
    pub fn upsample_grid(&self, store: &ParamStore, prep: &PreparedImage, stats: &DistributionStats) -> Result<Grid> {
        let mut tape = Tape::new();
        let v = self.upsample(&mut tape, store, prep, stats)?;
        Ok(tape.value(v).clone())
    }
}
