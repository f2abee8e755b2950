//! Activations from raw latents to Gaussian parameters, 3D covariance
//! construction, and their derivatives.
//!
//! Quaternions are `(w, x, y, z)` with the Hamilton convention throughout.

use nalgebra::{Matrix3, Matrix4};

use crate::error::{Error, Result};
use crate::scene::{Quat, Vec3};

/// Input norm below which a rotation latent cannot be normalized.
pub const DEGENERATE_QUATERNION_NORM: f64 = 1e-12;

/// Symmetric positive-semidefinite 3x3 covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Covariance3D {
    pub matrix: Matrix3<f64>,
}

pub fn activate_opacity(f_alpha: f64) -> f64 {
    1.0 / (1.0 + (-f_alpha).exp())
}

pub fn activate_scale(f_s: &Vec3, median_depth: f64) -> Vec3 {
    f_s.map(|v| v.exp() * median_depth)
}

pub fn activate_rotation(f_r: &Quat) -> Result<Quat> {
    let n = f_r.norm();
    if !(n > DEGENERATE_QUATERNION_NORM) {
        return Err(Error::DegenerateQuaternion);
    }
    Ok(f_r / n)
}

/// Rotation matrix of a unit quaternion.
pub fn rotation_matrix(q: &Quat) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// `Σ = R(q) diag(s)² R(q)ᵀ`.
pub fn build_covariance(scale: &Vec3, rotation: &Quat) -> Covariance3D {
    let m = rotation_matrix(rotation) * Matrix3::from_diagonal(scale);
    Covariance3D {
        matrix: m * m.transpose(),
    }
}

/// dα/df_α.
pub fn opacity_derivative(f_alpha: f64) -> f64 {
    let s = activate_opacity(f_alpha);
    s * (1.0 - s)
}

/// Diagonal of ds/df_s (the Jacobian is diagonal).
pub fn scale_jacobian_diag(f_s: &Vec3, median_depth: f64) -> Vec3 {
    activate_scale(f_s, median_depth)
}

/// d normalize(f)/df = (I − q qᵀ)/‖f‖, with q the normalized input.
pub fn rotation_jacobian(f_r: &Quat) -> Result<Matrix4<f64>> {
    let q = activate_rotation(f_r)?;
    let n = f_r.norm();
    Ok((Matrix4::identity() - q * q.transpose()) / n)
}

/// Pulls an upstream gradient on `R(q)` back to the four quaternion entries,
/// treating `q` as a free 4-vector in the polynomial formula.
pub fn rotation_matrix_vjp(q: &Quat, g: &Matrix3<f64>) -> Quat {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)]
            + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    Quat::new(dw, dx, dy, dz)
}

/// Vector-Jacobian product of [`build_covariance`]: given `dL/dΣ` (any 3x3,
/// entries treated independently) returns `(dL/ds, dL/dq)`.
pub fn covariance_vjp(scale: &Vec3, rotation: &Quat, d_sigma: &Matrix3<f64>) -> (Vec3, Quat) {
    let r = rotation_matrix(rotation);
    let m = r * Matrix3::from_diagonal(scale);
    // Σ = M Mᵀ  =>  dL/dM = (G + Gᵀ) M
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    // M_ij = R_ij s_j
    let d_scale = Vec3::from_fn(|j, _| (0..3).map(|i| d_m[(i, j)] * r[(i, j)]).sum());
    let d_r = Matrix3::from_fn(|i, j| d_m[(i, j)] * scale[j]);
    (d_scale, rotation_matrix_vjp(rotation, &d_r))
}

/// Gradients of a loss with respect to the raw latents of one primitive.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawGradients {
    pub opacity_raw: f64,
    pub scale_raw: Vec3,
    pub rotation_raw: Quat,
}

/// Chains activated-parameter gradients back through the activations.
pub fn activation_vjp(
    opacity_raw: f64,
    scale_raw: &Vec3,
    rotation_raw: &Quat,
    median_depth: f64,
    d_opacity: f64,
    d_scale: &Vec3,
    d_rotation: &Quat,
) -> Result<RawGradients> {
    Ok(RawGradients {
        opacity_raw: d_opacity * opacity_derivative(opacity_raw),
        scale_raw: d_scale.component_mul(&scale_jacobian_diag(scale_raw, median_depth)),
        rotation_raw: rotation_jacobian(rotation_raw)?.transpose() * d_rotation,
    })
}
