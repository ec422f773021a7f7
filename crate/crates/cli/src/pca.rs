//! Three-component PCA of feature vectors mapped to RGB.

use anyhow::{bail, Result};
use featsharp::Grid;
use image::RgbImage;
use nalgebra::{DMatrix, SymmetricEigen};

/// Below this spread a component is drawn as mid-gray.
const MIN_RANGE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PcaProjection {
    pub mean: Vec<f64>,
    /// `C × 3`, orthonormal columns in decreasing variance order.
    pub basis: DMatrix<f64>,
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl PcaProjection {
    /// Fits one projection on the union of all tokens of `maps`, so colors
    /// are comparable across them.
    pub fn fit(maps: &[&Grid]) -> Result<Self> {
        let Some(first) = maps.first() else {
            bail!("PCA needs at least one feature map");
        };
        let c = first.channels();
        if c < 3 {
            bail!("PCA to RGB needs at least 3 channels, got {c}");
        }
        if maps.iter().any(|m| m.channels() != c) {
            bail!("feature maps disagree on channel count");
        }
        let n: usize = maps.iter().map(|m| m.pixels()).sum();
        let mut mean = vec![0.0; c];
        for m in maps {
            for p in 0..m.pixels() {
                for (a, v) in mean.iter_mut().zip(m.token(p)) {
                    *a += v;
                }
            }
        }
        mean.iter_mut().for_each(|a| *a /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(c, c);
        for m in maps {
            for p in 0..m.pixels() {
                let d: Vec<f64> = m.token(p).iter().zip(&mean).map(|(v, mu)| v - mu).collect();
                for i in 0..c {
                    for j in 0..c {
                        cov[(i, j)] += d[i] * d[j];
                    }
                }
            }
        }
        cov /= n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut basis = DMatrix::<f64>::zeros(c, 3);
        for (k, &i) in order.iter().take(3).enumerate() {
            let mut col = eig.eigenvectors.column(i).into_owned();
            // Sign convention: the largest-magnitude entry is positive.
            let pivot = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
            if pivot < 0.0 {
                col.neg_mut();
            }
            basis.set_column(k, &col);
        }
        let mut proj = Self {
            mean,
            basis,
            lo: [f64::INFINITY; 3],
            hi: [f64::NEG_INFINITY; 3],
        };
        for m in maps {
            for p in 0..m.pixels() {
                let z = proj.project(m.token(p));
                for k in 0..3 {
                    proj.lo[k] = proj.lo[k].min(z[k]);
                    proj.hi[k] = proj.hi[k].max(z[k]);
                }
            }
        }
        Ok(proj)
    }

    pub fn project(&self, v: &[f64]) -> [f64; 3] {
        let mut z = [0.0; 3];
        for (k, zk) in z.iter_mut().enumerate() {
            *zk = v
                .iter()
                .zip(&self.mean)
                .enumerate()
                .map(|(i, (x, mu))| (x - mu) * self.basis[(i, k)])
                .sum();
        }
        z
    }

    pub fn to_rgb(&self, fm: &Grid) -> Result<RgbImage> {
        if fm.channels() != self.mean.len() {
            bail!(
                "projection fit on {} channels applied to {}",
                self.mean.len(),
                fm.channels()
            );
        }
        Ok(RgbImage::from_fn(fm.width() as u32, fm.height() as u32, |x, y| {
            let z = self.project(fm.pixel(y as usize, x as usize));
            image::Rgb(std::array::from_fn(|k| {
                let range = self.hi[k] - self.lo[k];
                if range < MIN_RANGE {
                    128
                } else {
                    (((z[k] - self.lo[k]) / range).clamp(0.0, 1.0) * 255.0).round() as u8
                }
            }))
        }))
    }
}

/// Renders `maps` with one shared projection.
pub fn pca_rgb(maps: &[&Grid]) -> Result<Vec<RgbImage>> {
    let proj = PcaProjection::fit(maps)?;
    maps.iter().map(|m| proj.to_rgb(m)).collect()
}

/// Nearest-neighbor enlargement so small maps stay visible.
pub fn enlarge(img: &RgbImage, side: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(side, side * h / w.max(1), |x, y| {
        *img.get_pixel((x * w / side).min(w - 1), (y * w / side).min(h - 1))
    })
}

/// Places `images` left to right with a 4-pixel white gap.
pub fn side_by_side(images: &[RgbImage]) -> RgbImage {
    let gap = 4;
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let w = images.iter().map(|i| i.width()).sum::<u32>() + gap * images.len().saturating_sub(1) as u32;
    let mut out = RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let mut x0 = 0;
    for img in images {
        image::imageops::replace(&mut out, img, x0 as i64, 0);
        x0 += img.width() + gap;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_is_uniform_gray() {
        let g = Grid::filled(4, 4, 5, 0.3);
        let img = &pca_rgb(&[&g]).unwrap()[0];
        assert!(img.pixels().all(|p| p.0 == [128, 128, 128]));
    }

    #[test]
    fn two_channels_are_rejected() {
        assert!(pca_rgb(&[&Grid::zeros(2, 2, 2)]).is_err());
    }

    #[test]
    fn basis_is_orthonormal() {
        let g = Grid::from_fn(5, 5, 4, |y, x, c| ((y * 7 + x * 3 + c * c) % 11) as f64);
        let p = PcaProjection::fit(&[&g]).unwrap();
        let gram = p.basis.transpose() * &p.basis;
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-8);
            }
        }
    }
}
