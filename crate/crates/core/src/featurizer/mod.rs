//! Frozen encoders mapping an `R × R × 3` image to an `R/p × R/p × C`
//! feature grid, plus the normalization and de-bias stages wrapped around
//! them.
//!
//! The toy featurizers stand in for pretrained backbones and have exactly
//! known behavior:
//!
//! * `patch_linear`: one fixed affine map applied to each non-overlapping
//!   `p × p` patch. Featurizing a patch-aligned crop gives exactly the
//!   corresponding sub-grid of the full output.
//! * `smooth_conv`: a fixed Gaussian blur, a per-pixel `tanh` projection to
//!   `C` channels, then patch averaging. The blur crosses tile borders, so
//!   tiled featurization loses context.
//! * `wrapped`: `smooth_conv` plus a fixed additive position bias `B`.

mod debias;
mod phi_s;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

pub use debias::{debias_apply, debias_apply_var, DebiasBuffer, DEBIAS_PARAM};
pub use phi_s::{phi_s_apply, phi_s_apply_var, phi_s_fit, phi_s_invert, DistributionStats};

use crate::error::{ensure, Error, Result};
use crate::numerics::Grid;

/// Largest input side any toy featurizer accepts.
pub const MAX_RESOLUTION: usize = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturizerKind {
    PatchLinear,
    SmoothConv,
    Wrapped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[serde(deny_unknown_fields)]
pub struct FeaturizerSpec {
    pub kind: FeaturizerKind,
    pub patch: usize,
    pub channels: usize,
    pub input_resolution: usize,
    pub seed: u64,
    /// Standard deviation of the injected bias of a `wrapped` featurizer.
    #[serde(default = "default_bias_amplitude")]
    pub bias_amplitude: f64,
}

fn default_bias_amplitude() -> f64 {
    0.5
}

impl Default for FeaturizerSpec {
    fn default() -> Self {
        Self {
            kind: FeaturizerKind::SmoothConv,
            patch: 4,
            channels: 16,
            input_resolution: 64,
            seed: 0,
            bias_amplitude: default_bias_amplitude(),
        }
    }
}

impl FeaturizerSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.patch > 0 && self.channels > 0 && self.input_resolution > 0,
            Error::InvalidArgument("featurizer patch, channels and resolution must be positive".into())
        );
        ensure!(
            self.input_resolution % self.patch == 0,
            Error::InvalidArgument(format!(
                "input resolution {} is not a multiple of patch {}",
                self.input_resolution, self.patch
            ))
        );
        ensure!(
            self.input_resolution <= MAX_RESOLUTION,
            Error::InvalidArgument(format!(
                "input resolution {} exceeds {MAX_RESOLUTION}",
                self.input_resolution
            ))
        );
        Ok(())
    }

    /// Side of the output feature grid.
    pub fn grid_side(&self) -> usize {
        self.input_resolution / self.patch
    }
}

/// A frozen image encoder.
pub trait Featurizer: Send + Sync {
    fn patch(&self) -> usize;
    fn channels(&self) -> usize;
    fn input_resolution(&self) -> usize;

    fn grid_side(&self) -> usize {
        self.input_resolution() / self.patch()
    }

    /// Featurizes an image of exactly `input_resolution² × 3`.
    fn featurize(&self, image: &Grid) -> Result<Grid>;

    /// The same encoder accepting inputs of side `resolution`.
    fn at_resolution(&self, resolution: usize) -> Result<Box<dyn Featurizer>>;
}

/// Seeded implementation of the three toy featurizer kinds.
#[derive(Clone, Debug)]
pub struct ToyFeaturizer {
    spec: FeaturizerSpec,
    /// `patch_linear`: `(p·p·3) × C`; otherwise `3 × C`.
    weight: Grid,
    bias: Vec<f64>,
    blur: Vec<f64>,
    position_bias: Option<Grid>,
}

const BLUR_SIGMA: f64 = 1.0;
const BLUR_RADIUS: usize = 2;

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

impl ToyFeaturizer {
    pub fn new(spec: FeaturizerSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let c = spec.channels;
        let fan_in = match spec.kind {
            FeaturizerKind::PatchLinear => spec.patch * spec.patch * 3,
            FeaturizerKind::SmoothConv | FeaturizerKind::Wrapped => 3,
        };
        let gain = match spec.kind {
            FeaturizerKind::PatchLinear => 1.0 / (fan_in as f64).sqrt(),
            _ => 2.0,
        };
        let mut normal = |s: f64| -> f64 {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * s
        };
        let weight = Grid::matrix(fan_in, c, (0..fan_in * c).map(|_| normal(gain)).collect())?;
        let bias = (0..c).map(|_| normal(0.5)).collect();
        let position_bias = (spec.kind == FeaturizerKind::Wrapped).then(|| {
            let side = spec.grid_side();
            Grid::from_fn(side, side, c, |_, _, _| normal(spec.bias_amplitude))
        });
        Ok(Self {
            spec,
            weight,
            bias,
            blur: gaussian_kernel(BLUR_SIGMA, BLUR_RADIUS),
            position_bias,
        })
    }

    pub fn spec(&self) -> &FeaturizerSpec {
        &self.spec
    }

    /// The injected additive bias of a `wrapped` featurizer.
    pub fn position_bias(&self) -> Option<&Grid> {
        self.position_bias.as_ref()
    }

    /// The same featurizer without its injected bias.
    pub fn clean(&self) -> Self {
        let mut out = self.clone();
        if out.spec.kind == FeaturizerKind::Wrapped {
            out.spec.kind = FeaturizerKind::SmoothConv;
        }
        out.position_bias = None;
        out
    }

    fn check_input(&self, image: &Grid) -> Result<()> {
        let r = self.spec.input_resolution;
        ensure!(
            image.height() == r && image.width() == r,
            Error::ResolutionMismatch {
                expected: r,
                height: image.height(),
                width: image.width(),
            }
        );
        ensure!(
            image.channels() == 3,
            Error::ShapeMismatch(format!("expected an RGB image, got {:?}", image.shape()))
        );
        Ok(())
    }

    fn patch_linear(&self, image: &Grid) -> Grid {
        let p = self.spec.patch;
        let side = self.spec.grid_side();
        let c = self.spec.channels;
        let w = self.weight.data();
        let mut out = Grid::zeros(side, side, c);
        for gy in 0..side {
            for gx in 0..side {
                let dst = out.pixel_mut(gy, gx);
                dst.copy_from_slice(&self.bias);
                let mut k = 0;
                for py in 0..p {
                    for px in 0..p {
                        for &v in image.pixel(gy * p + py, gx * p + px) {
                            let row = &w[k * c..(k + 1) * c];
                            for (d, &wv) in dst.iter_mut().zip(row) {
                                *d += v * wv;
                            }
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Separable Gaussian blur with clamp-to-edge borders.
    fn blur(&self, image: &Grid) -> Grid {
        let (h, w, ch) = image.shape();
        let r = BLUR_RADIUS as isize;
        let mut tmp = Grid::zeros(h, w, ch);
        for y in 0..h {
            for x in 0..w {
                let dst = tmp.pixel_mut(y, x);
                for (k, &kv) in self.blur.iter().enumerate() {
                    let sx = (x as isize + k as isize - r).clamp(0, w as isize - 1) as usize;
                    for (d, &s) in dst.iter_mut().zip(image.pixel(y, sx)) {
                        *d += kv * s;
                    }
                }
            }
        }
        let mut out = Grid::zeros(h, w, ch);
        for y in 0..h {
            for x in 0..w {
                let dst = out.pixel_mut(y, x);
                for (k, &kv) in self.blur.iter().enumerate() {
                    let sy = (y as isize + k as isize - r).clamp(0, h as isize - 1) as usize;
                    for (d, &s) in dst.iter_mut().zip(tmp.pixel(sy, x)) {
                        *d += kv * s;
                    }
                }
            }
        }
        out
    }

    fn smooth_conv(&self, image: &Grid) -> Grid {
        let p = self.spec.patch;
        let side = self.spec.grid_side();
        let c = self.spec.channels;
        let blurred = self.blur(image);
        let w = self.weight.data();
        let mut out = Grid::zeros(side, side, c);
        let mut z = vec![0.0; c];
        let norm = 1.0 / (p * p) as f64;
        for y in 0..side * p {
            for x in 0..side * p {
                z.copy_from_slice(&self.bias);
                for (k, &v) in blurred.pixel(y, x).iter().enumerate() {
                    for (zz, &wv) in z.iter_mut().zip(&w[k * c..(k + 1) * c]) {
                        *zz += v * wv;
                    }
                }
                for (d, &zz) in out.pixel_mut(y / p, x / p).iter_mut().zip(&z) {
                    *d += zz.tanh() * norm;
                }
            }
        }
        out
    }
}

impl Featurizer for ToyFeaturizer {
    fn patch(&self) -> usize {
        self.spec.patch
    }

    fn channels(&self) -> usize {
        self.spec.channels
    }

    fn input_resolution(&self) -> usize {
        self.spec.input_resolution
    }

    fn featurize(&self, image: &Grid) -> Result<Grid> {
        self.check_input(image)?;
        let mut out = match self.spec.kind {
            FeaturizerKind::PatchLinear => self.patch_linear(image),
            FeaturizerKind::SmoothConv | FeaturizerKind::Wrapped => self.smooth_conv(image),
        };
        if let Some(b) = &self.position_bias {
            out.add_assign(b);
        }
        Ok(out)
    }

    fn at_resolution(&self, resolution: usize) -> Result<Box<dyn Featurizer>> {
        if resolution == self.spec.input_resolution {
            return Ok(Box::new(self.clone()));
        }
        ensure!(
            self.position_bias.is_none(),
            Error::InvalidArgument(
                "a wrapped featurizer's position bias is fixed to its native resolution".into()
            )
        );
        let spec = FeaturizerSpec {
            input_resolution: resolution,
            ..self.spec.clone()
        };
        spec.validate()?;
        let mut out = self.clone();
        out.spec = spec;
        Ok(Box::new(out))
    }
}
