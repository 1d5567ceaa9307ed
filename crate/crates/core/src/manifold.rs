//! Geometry on SO(3) and S²: hat/vee, exponential and logarithm, attitude
//! error maps and the scalar configuration error functions used to grade
//! closed-loop performance.

use std::ops::Deref;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::serde_rows::Rows;

use crate::error::ManifoldError;

/// Tolerance used to accept unit vectors and rotation matrices.
pub const VALIDITY_TOL: f64 = 1e-9;

/// Distance from the angle π inside which `log_so3` refuses to pick an axis.
pub const LOG_BRANCH_TOL: f64 = 1e-6;

const SERIES_THRESHOLD: f64 = 1e-6;

pub fn e1() -> Vector3<f64> {
    Vector3::x()
}

pub fn e2() -> Vector3<f64> {
    Vector3::y()
}

pub fn e3() -> Vector3<f64> {
    Vector3::z()
}

/// Point on S², stored as a 3-vector with unit norm (within [`VALIDITY_TOL`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vector3<f64>", into = "Vector3<f64>")]
pub struct UnitVector(Vector3<f64>);

impl UnitVector {
    pub fn new(v: Vector3<f64>) -> Result<Self, ManifoldError> {
        let norm = v.norm();
        if !norm.is_finite() || (norm - 1.0).abs() > VALIDITY_TOL {
            return Err(ManifoldError::NotUnit { norm });
        }
        Ok(Self(v))
    }

    pub fn new_normalize(v: Vector3<f64>) -> Result<Self, ManifoldError> {
        let norm = v.norm();
        if !norm.is_finite() || norm < 1e-12 {
            return Err(ManifoldError::NotUnit { norm });
        }
        Ok(Self(v / norm))
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }
}

impl Deref for UnitVector {
    type Target = Vector3<f64>;

    fn deref(&self) -> &Vector3<f64> {
        &self.0
    }
}

impl TryFrom<Vector3<f64>> for UnitVector {
    type Error = ManifoldError;

    fn try_from(v: Vector3<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<UnitVector> for Vector3<f64> {
    fn from(q: UnitVector) -> Self {
        q.0
    }
}

/// Element of SO(3): orthonormal with determinant +1 (within [`VALIDITY_TOL`]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Rows<3, 3>", into = "Rows<3, 3>")]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn new(m: Matrix3<f64>) -> Result<Self, ManifoldError> {
        let orth = (m.transpose() * m - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !orth.is_finite() || orth > VALIDITY_TOL || (det - 1.0).abs() > VALIDITY_TOL {
            return Err(ManifoldError::NotRotation { orth, det });
        }
        Ok(Self(m))
    }

    /// Nearest rotation in the Frobenius sense (orthogonal polar factor).
    pub fn from_polar(m: Matrix3<f64>) -> Result<Self, ManifoldError> {
        project_to_so3(&m).map(Self)
    }

    /// Rotation by `angle` about the unit `axis`.
    pub fn about_axis(axis: &Vector3<f64>, angle: f64) -> Self {
        Self(exp_so3_raw(&(axis.normalize() * angle)))
    }

    pub fn into_inner(self) -> Matrix3<f64> {
        self.0
    }

    pub fn inverse(&self) -> Self {
        Self(self.0.transpose())
    }
}

impl Deref for RotationMatrix {
    type Target = Matrix3<f64>;

    fn deref(&self) -> &Matrix3<f64> {
        &self.0
    }
}

impl TryFrom<Matrix3<f64>> for RotationMatrix {
    type Error = ManifoldError;

    fn try_from(m: Matrix3<f64>) -> Result<Self, Self::Error> {
        Self::new(m)
    }
}

impl TryFrom<Rows<3, 3>> for RotationMatrix {
    type Error = ManifoldError;

    fn try_from(m: Rows<3, 3>) -> Result<Self, Self::Error> {
        Self::new(m.into())
    }
}

impl From<RotationMatrix> for Rows<3, 3> {
    fn from(r: RotationMatrix) -> Self {
        r.0.into()
    }
}

impl From<RotationMatrix> for Matrix3<f64> {
    fn from(r: RotationMatrix) -> Self {
        r.0
    }
}

pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Inverse of [`hat`]. Rejects matrices whose symmetric part exceeds
/// `VALIDITY_TOL` relative to their magnitude.
pub fn vee(m: &Matrix3<f64>) -> Result<Vector3<f64>, ManifoldError> {
    let asym = (m + m.transpose()).abs().max();
    let scale = m.abs().max().max(1.0);
    if !asym.is_finite() || asym > VALIDITY_TOL * scale {
        return Err(ManifoldError::NotSkew { asym });
    }
    Ok(vee_unchecked(m))
}

/// Reads the axial vector from the skew part of `m` without validation.
pub(crate) fn vee_unchecked(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Attitude error ½(R_dᵀR − RᵀR_d)^∨.
pub fn so3_error(r_d: &RotationMatrix, r: &RotationMatrix) -> Vector3<f64> {
    let a = r_d.transpose() * **r;
    0.5 * vee_unchecked(&(a - a.transpose()))
}

/// Cable direction error q_d × q.
pub fn s2_error(q_d: &UnitVector, q: &UnitVector) -> Vector3<f64> {
    q_d.cross(q)
}

/// Ψ_q = 1 − q_dᵀq, in [0, 2].
pub fn config_error_cable(q_d: &UnitVector, q: &UnitVector) -> f64 {
    (1.0 - q_d.dot(q)).clamp(0.0, 2.0)
}

/// Ψ_R = ½ tr(I − R_dᵀR), in [0, 2].
pub fn config_error_payload(r_d: &RotationMatrix, r: &RotationMatrix) -> f64 {
    let tr = (r_d.transpose() * **r).trace();
    (0.5 * (3.0 - tr)).clamp(0.0, 2.0)
}

pub fn exp_so3(v: &Vector3<f64>) -> RotationMatrix {
    RotationMatrix(exp_so3_raw(v))
}

pub(crate) fn exp_so3_raw(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SERIES_THRESHOLD {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(v);
    Matrix3::identity() + k * a + k * k * b
}

/// Principal logarithm. Fails within [`LOG_BRANCH_TOL`] of the angle π where
/// the axis sign is ambiguous.
pub fn log_so3(r: &RotationMatrix) -> Result<Vector3<f64>, ManifoldError> {
    let skew = vee_unchecked(r);
    let sin_theta = skew.norm();
    let cos_theta = 0.5 * (r.trace() - 1.0);
    let theta = sin_theta.atan2(cos_theta);
    if std::f64::consts::PI - theta < LOG_BRANCH_TOL {
        return Err(ManifoldError::LogBranch { angle: theta });
    }
    if theta < SERIES_THRESHOLD {
        return Ok(skew * (1.0 + theta * theta / 6.0));
    }
    if theta < 2.5 {
        return Ok(skew * (theta / sin_theta));
    }
    // Near π the skew part is small; read the axis from the symmetric part and
    // take its sign from the skew part.
    let s = 0.5 * (**r + r.transpose()) - Matrix3::identity() * cos_theta;
    let (mut col, mut best) = (0, s[(0, 0)]);
    for k in 1..3 {
        if s[(k, k)] > best {
            best = s[(k, k)];
            col = k;
        }
    }
    let mut axis = s.column(col).into_owned().normalize();
    if axis.dot(&skew) < 0.0 {
        axis = -axis;
    }
    Ok(axis * theta)
}

/// Right Jacobian of SO(3): if R(t) = exp(η(t)) then Ω = J_r(η) η̇.
pub fn right_jacobian(eta: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = eta.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < 1e-4 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    let k = hat(eta);
    Matrix3::identity() - k * a + k * k * b
}

/// Coefficient c(θ) of η̂² in J_r⁻¹(η) = I + ½η̂ + c(θ)η̂², and c'(θ)/θ.
fn inv_jacobian_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < 0.2 {
        let c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0 + t2 * t2 * t2 / 1_209_600.0;
        let d = 1.0 / 360.0 + t2 / 7560.0 + t2 * t2 / 201_600.0;
        (c, d)
    } else {
        let half = 0.5 * theta;
        let cot = half.cos() / half.sin();
        let csc2 = 1.0 / (half.sin() * half.sin());
        let c = 1.0 / t2 - cot / (2.0 * theta);
        let dc = -2.0 / (t2 * theta) + cot / (2.0 * t2) + csc2 / (4.0 * theta);
        (c, dc / theta)
    }
}

/// Inverse right Jacobian: η̇ = J_r⁻¹(η) Ω.
pub fn right_jacobian_inv(eta: &Vector3<f64>) -> Matrix3<f64> {
    let (c, _) = inv_jacobian_coeffs(eta.norm());
    let k = hat(eta);
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Time derivative of J_r⁻¹(η(t)) given η and η̇.
pub fn right_jacobian_inv_dot(eta: &Vector3<f64>, eta_dot: &Vector3<f64>) -> Matrix3<f64> {
    let (c, d) = inv_jacobian_coeffs(eta.norm());
    let k = hat(eta);
    let kd = hat(eta_dot);
    kd * 0.5 + k * k * (d * eta.dot(eta_dot)) + (k * kd + kd * k) * c
}

/// Orthogonal polar factor of `m` (closest rotation in Frobenius norm).
pub fn project_to_so3(m: &Matrix3<f64>) -> Result<Matrix3<f64>, ManifoldError> {
    if !m.iter().all(|x| x.is_finite()) {
        return Err(ManifoldError::NotRotation {
            orth: f64::NAN,
            det: f64::NAN,
        });
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => {
            return Err(ManifoldError::NotRotation {
                orth: f64::NAN,
                det: f64::NAN,
            })
        }
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        // Reflection: flip the direction of the smallest singular value.
        let mut s = Matrix3::identity();
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        s[(imin, imin)] = -1.0;
        r = u * s * v_t;
    }
    Ok(r)
}
