use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Dense `height × width × channels` array stored row-major with channels
/// innermost. Matrices are grids with a single channel, scalars are `1×1×1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

/// A grid of per-position feature vectors.
pub type FeatureMap = Grid;

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == height * width * channels,
            Error::ShapeMismatch(format!(
                "{} values for a {height}x{width}x{channels} grid",
                data.len()
            ))
        );
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    /// `rows × cols` matrix.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::from_vec(rows, cols, 1, data)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: 1,
            data: vec![value],
        }
    }

    /// A `1×1×n` grid holding a plain vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            height: 1,
            width: 1,
            channels: data.len(),
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    #[inline]
    pub fn index(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.index(y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        let i = self.index(y, x, c);
        self.data[i] = value;
    }

    /// Feature vector at `(y, x)`.
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Feature vector at flat pixel index `p = y * width + x`.
    #[inline]
    pub fn token(&self, p: usize) -> &[f64] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn token_mut(&mut self, p: usize) -> &mut [f64] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    pub fn same_shape(&self, other: &Grid) -> bool {
        self.shape() == other.shape()
    }

    pub fn check_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        ensure!(
            self.same_shape(other),
            Error::ShapeMismatch(format!("{what}: {:?} vs {:?}", self.shape(), other.shape()))
        );
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Grid {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Grid) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn add_assign(&mut self, other: &Grid) {
        assert!(self.same_shape(other), "add_assign: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: f64) -> Grid {
        self.map(|v| v * s)
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Per-channel mean over all positions.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.channels];
        for p in 0..self.pixels() {
            for (m, v) in means.iter_mut().zip(self.token(p)) {
                *m += v;
            }
        }
        let n = self.pixels().max(1) as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    /// Copy of the `h × w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Grid> {
        ensure!(
            y0 + h <= self.height && x0 + w <= self.width,
            Error::InvalidArgument(format!(
                "crop ({y0},{x0}) {h}x{w} exceeds {}x{}",
                self.height, self.width
            ))
        );
        let mut out = Grid::zeros(h, w, self.channels);
        for y in 0..h {
            let src = self.index(y0 + y, x0, 0);
            let dst = out.index(y, 0, 0);
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        Ok(out)
    }

    /// Writes `block` into this grid with its top-left corner at `(y0, x0)`.
    pub fn paste(&mut self, block: &Grid, y0: usize, x0: usize) -> Result<()> {
        ensure!(
            block.channels == self.channels
                && y0 + block.height <= self.height
                && x0 + block.width <= self.width,
            Error::ShapeMismatch(format!(
                "paste {:?} at ({y0},{x0}) into {:?}",
                block.shape(),
                self.shape()
            ))
        );
        let row = block.width * self.channels;
        for y in 0..block.height {
            let dst = self.index(y0 + y, x0, 0);
            let src = block.index(y, 0, 0);
            self.data[dst..dst + row].copy_from_slice(&block.data[src..src + row]);
        }
        Ok(())
    }
}
