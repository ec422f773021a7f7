use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Parametric view jitter, applied identically to images and feature maps.
///
/// Coordinates are normalized to `[-1, 1]` on both axes with the origin at
/// the image center and `y` pointing down. The forward map from source to
/// view is `P · T · R · S · F`: horizontal flip, isotropic zoom, rotation,
/// translation, then a projective perturbation `I + Δ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewTransform {
    /// Zoom factor; values above 1 magnify the center of the source.
    pub scale: f64,
    /// Translation as a fraction of the image extent.
    pub shift: (f64, f64),
    pub hflip: bool,
    /// Rotation in radians.
    pub rotation: f64,
    /// Row-major entries of `Δ`, excluding the bottom-right one.
    pub perspective: [f64; 8],
}

impl Default for ViewTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl ViewTransform {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            shift: (0.0, 0.0),
            hflip: false,
            rotation: 0.0,
            perspective: [0.0; 8],
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    /// Source-to-view homography.
    pub fn homography(&self) -> Matrix3<f64> {
        let flip = if self.hflip { -1.0 } else { 1.0 };
        let f = Matrix3::new(flip, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        let s = Matrix3::new(self.scale, 0.0, 0.0, 0.0, self.scale, 0.0, 0.0, 0.0, 1.0);
        let (sin, cos) = self.rotation.sin_cos();
        let r = Matrix3::new(cos, -sin, 0.0, sin, cos, 0.0, 0.0, 0.0, 1.0);
        let t = Matrix3::new(
            1.0,
            0.0,
            2.0 * self.shift.0,
            0.0,
            1.0,
            2.0 * self.shift.1,
            0.0,
            0.0,
            1.0,
        );
        let d = &self.perspective;
        let p = Matrix3::new(
            1.0 + d[0],
            d[1],
            d[2],
            d[3],
            1.0 + d[4],
            d[5],
            d[6],
            d[7],
            1.0,
        );
        p * t * r * s * f
    }

    /// View-to-source homography used for inverse warping.
    pub fn inverse_homography(&self) -> Result<Matrix3<f64>> {
        let h = self.homography();
        let det = h.determinant();
        ensure!(
            det.is_finite() && det.abs() > 1e-12,
            Error::DegenerateTransform(det)
        );
        h.try_inverse().ok_or(Error::DegenerateTransform(det))
    }
}

/// Maps a normalized view coordinate back to the source through `inv`.
pub(crate) fn apply_homography(inv: &Matrix3<f64>, u: f64, v: f64) -> Result<(f64, f64)> {
    let p = inv * Vector3::new(u, v, 1.0);
    ensure!(
        p.z.abs() > 1e-12,
        Error::DegenerateTransform(p.z)
    );
    Ok((p.x / p.z, p.y / p.z))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_parameters_give_identity_matrix() {
        assert_eq!(ViewTransform::identity().homography(), Matrix3::identity());
    }

    #[test]
    fn zero_scale_is_degenerate() {
        let t = ViewTransform {
            scale: 0.0,
            ..ViewTransform::identity()
        };
        assert!(matches!(
            t.inverse_homography(),
            Err(Error::DegenerateTransform(_))
        ));
        assert!(t
            .inverse_homography()
            .unwrap_err()
            .to_string()
            .contains("degenerate transform"));
    }
}
