//! Rigid-body math on SO(3)/SE(3): exponential and logarithm maps,
//! composition, and point transformation.
//!
//! Rotations are stored as matrices because the solver consumes matrices
//! directly; quaternion conversion happens only at the trajectory-output
//! boundary.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

/// Tolerance for the orthonormality / determinant checks on rotation matrices.
pub const ROTATION_TOL: f64 = 1e-9;

/// Angle below which the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GeomError {
    #[error("non-finite input")]
    NonFinite,
    #[error("matrix is not a rotation (orthonormality residual {0:.3e})")]
    NotRotation(f64),
}

/// Skew-symmetric matrix of `v`, so that `skew(v) * p == v.cross(p)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Extracts the vector from a skew-symmetric matrix (inverse of [`skew`]).
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// Axis-angle rotation: direction is the axis, magnitude the angle in radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

impl RotationVector {
    pub fn new(omega: Vector3<f64>) -> Result<Self, GeomError> {
        if omega.iter().all(|x| x.is_finite()) {
            Ok(Self(omega))
        } else {
            Err(GeomError::NonFinite)
        }
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }
}

/// A 3x3 rotation matrix, validated at construction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RotationMatrix(Matrix3<f64>);

impl RotationMatrix {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `R Rᵀ = I` and `det R = 1` within [`ROTATION_TOL`].
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, GeomError> {
        let residual = orthonormality_residual(&m);
        if residual > ROTATION_TOL {
            return Err(GeomError::NotRotation(residual));
        }
        Ok(Self(m))
    }

    /// Skips validation; for internal use where the product of rotations is
    /// known to stay on the manifold.
    pub(crate) fn from_matrix_unchecked(m: Matrix3<f64>) -> Self {
        Self(m)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn inverse(&self) -> Self {
        self.transpose()
    }

    pub fn rotate(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.0 * p
    }

    pub fn compose(&self, other: &Self) -> Self {
        Self(self.0 * other.0)
    }

    /// Quaternion `(x, y, z, w)` with `w >= 0`, normalized.
    pub fn to_quaternion(&self) -> [f64; 4] {
        let m = &self.0;
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (mut x, mut y, mut z, mut w);
        if trace > 0.0 {
            let s = (trace + 1.0).sqrt() * 2.0;
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let n = (x * x + y * y + z * z + w * w).sqrt();
        x /= n;
        y /= n;
        z /= n;
        w /= n;
        if w < 0.0 {
            x = -x;
            y = -y;
            z = -z;
            w = -w;
        }
        [x, y, z, w]
    }

    /// Builds a rotation from a unit quaternion `(x, y, z, w)`.
    pub fn from_quaternion(q: [f64; 4]) -> Result<Self, GeomError> {
        let [x, y, z, w] = q;
        let n = (x * x + y * y + z * z + w * w).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(GeomError::NonFinite);
        }
        let (x, y, z, w) = (x / n, y / n, z / n, w / n);
        let m = Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        );
        Ok(Self(m))
    }
}

fn orthonormality_residual(m: &Matrix3<f64>) -> f64 {
    let gram = (m * m.transpose() - Matrix3::identity()).norm();
    let det = (m.determinant() - 1.0).abs();
    gram.max(det)
}

/// Rigid transform: rotation followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: RotationMatrix,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: RotationMatrix::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: RotationMatrix, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(RotationMatrix::identity(), t)
    }

    /// `R p + t`.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.rotate(p) + self.translation
    }

    /// `(a ∘ b)(p) = a(b(p))`.
    pub fn compose(&self, other: &Self) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.rotate(&other.translation) + self.translation,
        }
    }

    pub fn inverse(&self) -> Self {
        let rot_inv = self.rotation.inverse();
        Self {
            translation: -rot_inv.rotate(&self.translation),
            rotation: rot_inv,
        }
    }

    pub fn inverse_apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse().rotate(&(p - self.translation))
    }
}

/// Alias for the SE(3) point action, `R p + t`.
pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.apply(p)
}

/// Rodrigues coefficients without validity checks; shared by the public map
/// and the per-point hot path in motion compensation.
pub(crate) fn exp_so3_raw(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let hat = skew(omega);
    Matrix3::identity() + a * hat + b * (hat * hat)
}

/// Exponential map so(3) -> SO(3) via the Rodrigues formula.
pub fn exp_so3(omega: &RotationVector) -> Result<RotationMatrix, GeomError> {
    if !omega.0.iter().all(|x| x.is_finite()) {
        return Err(GeomError::NonFinite);
    }
    Ok(RotationMatrix::from_matrix_unchecked(exp_so3_raw(&omega.0)))
}

/// Logarithm map SO(3) -> so(3) for angles in `[0, π]`.
///
/// At θ = π, where the axis sign is ambiguous, the axis whose first nonzero
/// component is positive is chosen.
pub fn log_so3(rot: &RotationMatrix) -> Result<RotationVector, GeomError> {
    let residual = orthonormality_residual(rot.matrix());
    if residual > 1e-7 {
        return Err(GeomError::NotRotation(residual));
    }
    Ok(RotationVector(log_so3_raw(rot.matrix())))
}

pub(crate) fn log_so3_raw(m: &Matrix3<f64>) -> Vector3<f64> {
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let cos_theta = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos_theta.acos();
    let antisym = vee(&(m - m.transpose())) / 2.0; // = sin(θ) · axis

    if theta < SMALL_ANGLE {
        return antisym * (1.0 + theta * theta / 6.0);
    }
    if std::f64::consts::PI - theta > 1e-6 {
        return antisym * (theta / theta.sin());
    }

    // Near π the antisymmetric part vanishes; extract the axis from the
    // symmetric part: (R + Rᵀ - 2cosθ I) / (2(1 - cosθ)) = n nᵀ.
    let sym = (m + m.transpose() - 2.0 * cos_theta * Matrix3::identity())
        / (2.0 * (1.0 - cos_theta));
    let diag = [sym[(0, 0)], sym[(1, 1)], sym[(2, 2)]];
    let i = diag
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    let col = sym.column(i);
    let mut axis = Vector3::new(col[0], col[1], col[2]) / diag[i].sqrt();
    axis.normalize_mut();
    if antisym.norm() > 1e-12 {
        if axis.dot(&antisym) < 0.0 {
            axis = -axis;
        }
    } else {
        // θ = π exactly: first nonzero component positive.
        for k in 0..3 {
            if axis[k].abs() > 1e-12 {
                if axis[k] < 0.0 {
                    axis = -axis;
                }
                break;
            }
        }
    }
    axis * theta
}

/// Right Jacobian of SO(3): `exp(ω + δ) ≈ exp(ω) exp(Jr(ω) δ)`.
pub(crate) fn right_jacobian(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let hat = skew(omega);
    let (a, b) = if theta < 1e-5 {
        (0.5 - theta_sq / 24.0, 1.0 / 6.0 - theta_sq / 120.0)
    } else {
        (
            (1.0 - theta.cos()) / theta_sq,
            (theta - theta.sin()) / (theta_sq * theta),
        )
    };
    Matrix3::identity() - a * hat + b * (hat * hat)
}

/// Inverse of the right Jacobian of SO(3).
pub(crate) fn right_jacobian_inv(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let hat = skew(omega);
    let c = if theta < 1e-5 {
        1.0 / 12.0 + theta_sq / 720.0
    } else {
        1.0 / theta_sq - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + 0.5 * hat + c * (hat * hat)
}
