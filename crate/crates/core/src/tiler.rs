//! Tile mosaics: split an image into `u × u` crops, featurize each crop at
//! the featurizer's native resolution, and stitch the results into a grid
//! `u` times larger per side.

use crate::error::{ensure, Error, Result};
use crate::featurizer::{debias_apply, Featurizer};
use crate::numerics::{bilinear_resample, Grid};

/// `u²` same-shaped feature maps in row-major tile order.
#[derive(Clone, Debug, PartialEq)]
pub struct TileGrid {
    pub u: usize,
    pub tile_features: Vec<Grid>,
}

/// Bounds `(start, len)` of part `i` of `n` split into `u` parts; the last
/// part absorbs the remainder.
fn split(n: usize, u: usize, i: usize) -> (usize, usize) {
    let base = n / u;
    if i + 1 == u {
        (i * base, n - i * base)
    } else {
        (i * base, base)
    }
}

/// Partitions `image` into `u × u` regions, each resized to `r × r`.
pub fn make_tiles(image: &Grid, u: usize, r: usize) -> Result<Vec<Grid>> {
    ensure!(
        u >= 1,
        Error::InvalidArgument(format!("tiles per side must be positive, got {u}"))
    );
    ensure!(!image.is_empty(), Error::EmptyGrid);
    ensure!(
        image.height() >= u && image.width() >= u,
        Error::InvalidArgument(format!(
            "cannot cut a {}x{} image into {u}x{u} tiles",
            image.height(),
            image.width()
        ))
    );
    let mut tiles = Vec::with_capacity(u * u);
    for i in 0..u {
        let (y0, h) = split(image.height(), u, i);
        for j in 0..u {
            let (x0, w) = split(image.width(), u, j);
            let region = image.crop(y0, x0, h, w)?;
            tiles.push(bilinear_resample(&region, r, r)?);
        }
    }
    Ok(tiles)
}

/// Places tile `(i, j)` at block `(i, j)` of the output.
pub fn stitch(tg: &TileGrid) -> Result<Grid> {
    let u = tg.u;
    ensure!(
        u >= 1 && tg.tile_features.len() == u * u,
        Error::InvalidArgument(format!(
            "{} tiles for a {u}x{u} grid",
            tg.tile_features.len()
        ))
    );
    let shape = tg.tile_features[0].shape();
    ensure!(
        tg.tile_features.iter().all(|t| t.shape() == shape),
        Error::ShapeMismatch("heterogeneous tiles".into())
    );
    let (th, tw, c) = shape;
    let mut out = Grid::zeros(u * th, u * tw, c);
    for (k, t) in tg.tile_features.iter().enumerate() {
        out.paste(t, (k / u) * th, (k % u) * tw)?;
    }
    Ok(out)
}

/// Featurized tile mosaic together with the number of featurizer calls.
#[derive(Clone, Debug)]
pub struct TileMosaic {
    pub tiles: TileGrid,
    pub evaluations: usize,
}

impl TileMosaic {
    pub fn stitched(&self) -> Result<Grid> {
        stitch(&self.tiles)
    }
}

/// Featurizes the `u × u` tiles of `image`, adding the de-bias grid to each
/// tile when given.
pub fn featurize_tiles(
    featurizer: &dyn Featurizer,
    image: &Grid,
    u: usize,
    debias: Option<&Grid>,
) -> Result<TileMosaic> {
    let tiles = make_tiles(image, u, featurizer.input_resolution())?;
    let tile_features = tiles
        .iter()
        .map(|t| {
            let f = featurizer.featurize(t)?;
            match debias {
                Some(g) => debias_apply(&f, g),
                None => Ok(f),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TileMosaic {
        evaluations: tile_features.len(),
        tiles: TileGrid { u, tile_features },
    })
}

/// The tiling baseline: stitched tile features.
pub fn tile_upsample(
    featurizer: &dyn Featurizer,
    image: &Grid,
    u: usize,
    debias: Option<&Grid>,
) -> Result<Grid> {
    featurize_tiles(featurizer, image, u, debias)?.stitched()
}

/// `β · lowres_up + (1 − β) · mosaic`.
pub fn s2_combine(lowres_up: &Grid, mosaic: &Grid, beta: f64) -> Result<Grid> {
    check_beta(beta)?;
    lowres_up.zip_map(mosaic, |a, b| beta * a + (1.0 - beta) * b)
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&beta),
        Error::InvalidArgument(format!("beta must lie in [0, 1], got {beta}"))
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurizer::{FeaturizerKind, FeaturizerSpec, ToyFeaturizer};

    fn image(n: usize) -> Grid {
        Grid::from_fn(n, n, 3, |y, x, c| ((y * 7 + x * 11 + c * 5) % 13) as f64 / 13.0)
    }

    #[test]
    fn single_tile_is_resized_image() {
        let img = image(12);
        let tiles = make_tiles(&img, 1, 8).unwrap();
        assert_eq!(tiles.len(), 1);
        assert_eq!(tiles[0], bilinear_resample(&img, 8, 8).unwrap());
    }

    #[test]
    fn constant_image_gives_identical_tiles() {
        let tiles = make_tiles(&Grid::filled(10, 10, 3, 0.25), 3, 4).unwrap();
        assert!(tiles.iter().all(|t| *t == tiles[0]));
    }

    #[test]
    fn quadrants_need_no_resize() {
        let img = image(16);
        let tiles = make_tiles(&img, 2, 8).unwrap();
        for (k, t) in tiles.iter().enumerate() {
            let direct = img.crop((k / 2) * 8, (k % 2) * 8, 8, 8).unwrap();
            assert_eq!(*t, direct);
        }
    }

    #[test]
    fn remainder_goes_to_last_row_and_column() {
        assert_eq!(split(10, 3, 0), (0, 3));
        assert_eq!(split(10, 3, 2), (6, 4));
    }

    #[test]
    fn zero_tiles_is_an_error() {
        assert!(make_tiles(&image(8), 0, 4).is_err());
    }

    #[test]
    fn stitch_inverts_block_partition() {
        let fm = Grid::from_fn(6, 6, 2, |y, x, c| (y * 6 + x) as f64 + 0.1 * c as f64);
        let blocks = (0..9)
            .map(|k| fm.crop((k / 3) * 2, (k % 3) * 2, 2, 2).unwrap())
            .collect();
        let out = stitch(&TileGrid {
            u: 3,
            tile_features: blocks,
        })
        .unwrap();
        assert_eq!(out, fm);
        let single = stitch(&TileGrid {
            u: 1,
            tile_features: vec![fm.clone()],
        })
        .unwrap();
        assert_eq!(single, fm);
    }

    #[test]
    fn heterogeneous_tiles_are_rejected() {
        let tg = TileGrid {
            u: 2,
            tile_features: vec![
                Grid::zeros(2, 2, 1),
                Grid::zeros(2, 2, 1),
                Grid::zeros(2, 3, 1),
                Grid::zeros(2, 2, 1),
            ],
        };
        assert!(stitch(&tg).is_err());
    }

    #[test]
    fn patch_linear_mosaic_equals_high_resolution_featurization() {
        let spec = FeaturizerSpec {
            kind: FeaturizerKind::PatchLinear,
            patch: 2,
            channels: 3,
            input_resolution: 8,
            seed: 9,
            bias_amplitude: 0.0,
        };
        let f = ToyFeaturizer::new(spec).unwrap();
        let img = image(16);
        let mosaic = featurize_tiles(&f, &img, 2, None).unwrap();
        assert_eq!(mosaic.evaluations, 4);
        let direct = f.at_resolution(16).unwrap().featurize(&img).unwrap();
        assert_eq!(mosaic.stitched().unwrap(), direct);
    }

    #[test]
    fn stitching_conserves_values() {
        let tiles: Vec<Grid> = (0..4)
            .map(|k| Grid::from_fn(2, 2, 1, |y, x, _| (k * 4 + y * 2 + x) as f64))
            .collect();
        let out = stitch(&TileGrid {
            u: 2,
            tile_features: tiles.clone(),
        })
        .unwrap();
        let mut a: Vec<f64> = tiles.iter().flat_map(|t| t.data().to_vec()).collect();
        let mut b = out.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn s2_endpoints_and_midpoint() {
        let lo = Grid::filled(2, 2, 1, 2.0);
        let hi = Grid::filled(2, 2, 1, 4.0);
        assert_eq!(s2_combine(&lo, &hi, 1.0).unwrap(), lo);
        assert_eq!(s2_combine(&lo, &hi, 0.0).unwrap(), hi);
        assert_eq!(s2_combine(&lo, &hi, 0.5).unwrap(), Grid::filled(2, 2, 1, 3.0));
        assert!(s2_combine(&lo, &hi, 1.5).is_err());
        assert!(s2_combine(&lo, &hi, -0.1).is_err());
    }
}
