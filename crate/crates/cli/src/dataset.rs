use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use featsharp::data::{synthetic_dataset, SyntheticSpec};
use featsharp::numerics::{bilinear_resample, Grid};
use image::RgbImage;

use crate::config::DatasetSource;

/// Decoded images plus the files that could not be read.
#[derive(Debug)]
pub struct Dataset {
    pub images: Vec<Grid>,
    pub skipped: Vec<PathBuf>,
}

const EXTENSIONS: [&str; 5] = ["png", "ppm", "pgm", "pbm", "pnm"];

pub fn rgb_to_grid(img: &RgbImage) -> Grid {
    let (w, h) = img.dimensions();
    Grid::from_fn(h as usize, w as usize, 3, |y, x, c| {
        img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
    })
}

pub fn grid_to_rgb(g: &Grid) -> RgbImage {
    RgbImage::from_fn(g.width() as u32, g.height() as u32, |x, y| {
        let px = g.pixel(y as usize, x as usize);
        image::Rgb(std::array::from_fn(|c| {
            (px[c.min(g.channels() - 1)].clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

/// Size after scaling the shorter side to `side`, and the crop offsets that
/// center a `side × side` window in it.
pub fn center_crop_geometry(h: usize, w: usize, side: usize) -> ((usize, usize), (usize, usize)) {
    let scale = side as f64 / h.min(w) as f64;
    let rh = ((h as f64 * scale).round() as usize).max(side);
    let rw = ((w as f64 * scale).round() as usize).max(side);
    ((rh, rw), ((rh - side) / 2, (rw - side) / 2))
}

/// Aspect-preserving resize so the shorter side is `side`, then a centered
/// `side × side` crop.
pub fn resize_center_crop(img: &Grid, side: usize) -> Result<Grid> {
    let ((rh, rw), (y0, x0)) = center_crop_geometry(img.height(), img.width(), side);
    let resized = bilinear_resample(img, rh, rw)?;
    Ok(resized.crop(y0, x0, side, side)?)
}

pub fn load_image(path: &Path) -> Result<Grid> {
    let img = image::open(path).with_context(|| format!("decoding {}", path.display()))?;
    Ok(rgb_to_grid(&img.to_rgb8()))
}

/// Reads every PNG/PNM file of `dir` in name order. Unreadable files are
/// skipped with a warning.
pub fn load_folder(dir: &Path, side: usize) -> Result<Dataset> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    paths.sort();
    let mut images = Vec::with_capacity(paths.len());
    let mut skipped = Vec::new();
    for p in paths {
        match load_image(&p).and_then(|g| resize_center_crop(&g, side)) {
            Ok(g) => images.push(g),
            Err(e) => {
                log::warn!("skipping {}: {e:#}", p.display());
                skipped.push(p);
            }
        }
    }
    Ok(Dataset { images, skipped })
}

/// Loads images of side `side` from `source`; an empty result is an error.
pub fn ingest_dataset(source: &DatasetSource, side: usize) -> Result<Dataset> {
    let ds = match source {
        DatasetSource::Synthetic { count, seed } => Dataset {
            images: synthetic_dataset(&SyntheticSpec {
                count: *count,
                side,
                seed: *seed,
            })?,
            skipped: Vec::new(),
        },
        DatasetSource::Folder { path } => load_folder(path, side)?,
    };
    if ds.images.is_empty() {
        bail!(featsharp::Error::MissingDataset(format!("no usable images in {source:?}")));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn geometry_of_landscape_input() {
        let ((rh, rw), (y0, x0)) = center_crop_geometry(96, 128, 64);
        assert_eq!((rh, rw), (64, 85));
        assert_eq!((y0, x0), (0, 10));
    }

    #[test]
    fn rgb_round_trip() {
        let g = Grid::from_fn(3, 4, 3, |y, x, c| ((y * 4 + x) * 3 + c) as f64 / 255.0);
        assert_eq!(rgb_to_grid(&grid_to_rgb(&g)), g);
    }
}
