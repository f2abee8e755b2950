use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::{LOW_PASS_DILATION, NEAR_PLANE, SUPPORT_SIGMA};
use crate::gaussian::Covariance3D;
use crate::scene::{Camera, GaussianPrimitive, Vec3};

/// Screen-space footprint of one primitive.
#[derive(Clone, Debug, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vector2<f64>,
    /// Dilated 2D covariance.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    /// Camera-space z of the center.
    pub depth: f64,
    pub source_index: usize,
    pub opacity: f64,
    /// Inclusive pixel bounds `(x0, y0, x1, y1)` of the support ellipse, possibly off-image.
    pub bounds: (i64, i64, i64, i64),
    pub(crate) cam_point: Vec3,
    pub(crate) jacobian: Matrix2x3<f64>,
}

impl Splat2D {
    /// Exponent of the kernel at `(px, py)`, i.e. `-½ dᵀ Σ'⁻¹ d`.
    #[inline]
    pub fn power(&self, px: f64, py: f64) -> (f64, f64, f64) {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let c = &self.conic;
        let power = -0.5 * (c[(0, 0)] * dx * dx + c[(1, 1)] * dy * dy) - c[(0, 1)] * dx * dy;
        (power, dx, dy)
    }
}

/// Perspective projection of a primitive with its 3D covariance.
///
/// Returns `None` when the center is at or behind the near plane or the
/// projected covariance is degenerate.
pub fn project_gaussian(
    primitive: &GaussianPrimitive,
    cov: &Covariance3D,
    camera: &Camera,
    source_index: usize,
) -> Option<Splat2D> {
    let t = camera.to_camera(&primitive.center);
    if !(t.z > NEAR_PLANE) {
        return None;
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t.z;
    let jacobian = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z * inv_z,
    );
    let tw = jacobian * camera.rotation;
    let cov2d = tw * cov.matrix * tw.transpose() + Matrix2::identity() * LOW_PASS_DILATION;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(fx * t.x * inv_z + camera.cx, fy * t.y * inv_z + camera.cy);
    let rx = SUPPORT_SIGMA * cov2d[(0, 0)].sqrt();
    let ry = SUPPORT_SIGMA * cov2d[(1, 1)].sqrt();
    // One pixel of slack; the per-pixel support test is exact.
    let bounds = (
        (mean2d.x - rx).floor() as i64 - 1,
        (mean2d.y - ry).floor() as i64 - 1,
        (mean2d.x + rx).ceil() as i64 + 1,
        (mean2d.y + ry).ceil() as i64 + 1,
    );
    Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: t.z,
        source_index,
        opacity: primitive.opacity,
        bounds,
        cam_point: t,
        jacobian,
    })
}

/// Unnormalized kernel value `exp(-½ (p−m)ᵀ Σ'⁻¹ (p−m))`.
pub fn gaussian_weight(splat: &Splat2D, pixel: Vector2<f64>) -> f64 {
    splat.power(pixel.x, pixel.y).0.exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::build_covariance;
    use crate::scene::Quat;
    use approx::assert_relative_eq;
    use nalgebra::Matrix3;

    fn prim_at(center: Vec3) -> GaussianPrimitive {
        GaussianPrimitive::from_raw(
            center,
            0.0,
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::zeros(),
            Quat::new(1.0, 0.0, 0.0, 0.0),
            vec![],
            1.0,
        )
        .unwrap()
    }

    #[test]
    fn axis_point_maps_to_principal_point() {
        let cam = Camera::identity(100.0, 100.0, 64.0, 64.0, 128, 128);
        let p = prim_at(Vec3::new(0.0, 0.0, 1.0));
        let cov = build_covariance(&p.scale, &p.rotation);
        let s = project_gaussian(&p, &cov, &cam, 0).unwrap();
        assert_eq!(s.mean2d, Vector2::new(64.0, 64.0));
    }

    #[test]
    fn isotropic_covariance_at_depth_two() {
        let cam = Camera::identity(100.0, 100.0, 64.0, 64.0, 128, 128);
        let p = prim_at(Vec3::new(0.0, 0.0, 2.0));
        let cov = Covariance3D {
            matrix: Matrix3::identity(),
        };
        let s = project_gaussian(&p, &cov, &cam, 0).unwrap();
        // J at the axis point is diag(fx/z, fy/z) with a zero third column.
        let j = Matrix2x3::new(50.0, 0.0, 0.0, 0.0, 50.0, 0.0);
        let expected = j * j.transpose() + Matrix2::identity() * 0.3;
        assert_relative_eq!(expected, Matrix2::identity() * 2500.3);
        assert_relative_eq!(s.cov2d, expected, epsilon = 1e-9);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = Camera::identity(100.0, 100.0, 64.0, 64.0, 128, 128);
        let p = prim_at(Vec3::new(0.0, 0.0, -1.0));
        let cov = build_covariance(&p.scale, &p.rotation);
        assert!(project_gaussian(&p, &cov, &cam, 0).is_none());
    }

    fn splat_with_cov(cov2d: Matrix2<f64>) -> Splat2D {
        Splat2D {
            mean2d: Vector2::new(10.0, 10.0),
            cov2d,
            conic: cov2d.try_inverse().unwrap(),
            depth: 1.0,
            source_index: 0,
            opacity: 1.0,
            bounds: (0, 0, 20, 20),
            cam_point: Vec3::new(0.0, 0.0, 1.0),
            jacobian: Matrix2x3::zeros(),
        }
    }

    #[test]
    fn kernel_values() {
        let s = splat_with_cov(Matrix2::identity());
        assert_eq!(gaussian_weight(&s, Vector2::new(10.0, 10.0)), 1.0);
        assert_relative_eq!(
            gaussian_weight(&s, Vector2::new(11.0, 10.0)),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
        let s = splat_with_cov(Matrix2::new(4.0, 0.0, 0.0, 1.0));
        // Mahalanobis distance 2/sqrt(4) = 1.
        assert_relative_eq!(
            gaussian_weight(&s, Vector2::new(12.0, 10.0)),
            (-0.5f64).exp(),
            epsilon = 1e-15
        );
    }
}
