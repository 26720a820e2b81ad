//! Rotation arithmetic on SO(3).
//!
//! Rotations are carried as unit quaternions kept in a canonical hemisphere
//! so that the two antipodal representatives of a rotation never coexist:
//! `w >= 0`, and when `w == 0` the first nonzero component among `(x, y, z)`
//! is positive. Component order is always `(w, x, y, z)`, including in
//! serialized form.
//!
//! The module also provides the exponential/logarithm maps between axis-angle
//! tangent vectors and quaternions, conversions to and from 3x3 rotation
//! matrices, and uniform random rotation sampling.

use std::fmt;

use nalgebra::Matrix3;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// 3-vector of doubles. Positions are meters; direction vectors are unit norm.
pub type Vec3 = nalgebra::Vector3<f64>;

/// Axis-angle tangent vector: the direction is the rotation axis and the
/// norm is the rotation angle in radians. [`log_map`] keeps the norm in
/// `[0, pi]`.
pub type TangentVec = Vec3;

/// Maximum norm deviation tolerated when accepting an external quaternion.
const UNIT_NORM_EPS: f64 = 1e-9;

/// Maximum orthonormality / determinant defect accepted by [`matrix_to_quat`].
const MATRIX_EPS: f64 = 1e-6;

/// Errors from rotation constructors and matrix conversion.
#[derive(Debug, Clone, PartialEq)]
pub enum So3Error {
    /// The supplied components have (near-)zero or non-finite norm.
    ZeroNorm { norm: f64 },
    /// The supplied matrix is not a proper rotation.
    NotARotation {
        orthogonality_error: f64,
        determinant: f64,
    },
}

impl fmt::Display for So3Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            So3Error::ZeroNorm { norm } => {
                write!(f, "quaternion norm {norm} is too close to zero")
            }
            So3Error::NotARotation {
                orthogonality_error,
                determinant,
            } => write!(
                f,
                "matrix is not a rotation: orthogonality error {orthogonality_error:.3e}, \
                 determinant {determinant:.6}"
            ),
        }
    }
}

impl std::error::Error for So3Error {}

/// Unit quaternion in canonical form representing a rotation.
///
/// Construction always normalizes and canonicalizes, so two values comparing
/// equal represent the same rotation with identical bits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl UnitQuaternion {
    /// The identity rotation `(1, 0, 0, 0)`.
    pub fn identity() -> Self {
        UnitQuaternion {
            w: 1.0,
            x: 0.0,
            y: 0.0,
            z: 0.0,
        }
    }

    /// Builds a rotation from raw components, normalizing and canonicalizing.
    ///
    /// Fails when the norm is below `1e-9` or any component is non-finite.
    pub fn new_normalize(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        let n2 = w * w + x * x + y * y + z * z;
        let norm = n2.sqrt();
        if !norm.is_finite() || norm < UNIT_NORM_EPS {
            return Err(So3Error::ZeroNorm { norm });
        }
        // Skip the division when the defect is below representable
        // precision: dividing by a norm of 1-epsilon only perturbs bits,
        // and bit-stability is what makes canonical forms deduplicable and
        // serialization round trips exact.
        if (n2 - 1.0).abs() <= 1e-14 {
            return Ok(Self::canonicalized(w, x, y, z));
        }
        Ok(Self::canonicalized(w / norm, x / norm, y / norm, z / norm))
    }

    /// Rotation of `angle` radians about `axis` (need not be unit length).
    ///
    /// Panics if the axis has (near-)zero norm.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        assert!(n > UNIT_NORM_EPS, "rotation axis must be nonzero");
        let half = 0.5 * angle;
        let k = half.sin() / n;
        Self::canonicalized(half.cos(), k * axis.x, k * axis.y, k * axis.z)
    }

    /// Applies the canonical-hemisphere rule to already-normalized components.
    fn canonicalized(w: f64, x: f64, y: f64, z: f64) -> Self {
        let flip = if w != 0.0 {
            w < 0.0
        } else if x != 0.0 {
            x < 0.0
        } else if y != 0.0 {
            y < 0.0
        } else {
            z < 0.0
        };
        let (w, x, y, z) = if flip { (-w, -x, -y, -z) } else { (w, x, y, z) };
        // Squash negative zeros so serialization is byte-stable.
        UnitQuaternion {
            w: w + 0.0,
            x: x + 0.0,
            y: y + 0.0,
            z: z + 0.0,
        }
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn x(&self) -> f64 {
        self.x
    }

    pub fn y(&self) -> f64 {
        self.y
    }

    pub fn z(&self) -> f64 {
        self.z
    }

    /// Components in serialization order.
    pub fn wxyz(&self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Four-dimensional dot product of the canonical representatives.
    pub fn dot(&self, other: &UnitQuaternion) -> f64 {
        self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z
    }

    /// Hamilton product `self * other`: the rotation `other` followed by
    /// `self`. The result is canonicalized but not re-normalized, so products
    /// with exact inputs stay exact.
    pub fn compose(&self, other: &UnitQuaternion) -> UnitQuaternion {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (other.w, other.x, other.y, other.z);
        Self::canonicalized(
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        )
    }

    /// Inverse rotation (conjugate for unit quaternions).
    pub fn inverse(&self) -> UnitQuaternion {
        Self::canonicalized(self.w, -self.x, -self.y, -self.z)
    }

    /// Rotates a point: `q p q*`.
    pub fn rotate(&self, p: Vec3) -> Vec3 {
        let v = Vec3::new(self.x, self.y, self.z);
        let t = 2.0 * v.cross(&p);
        p + self.w * t + v.cross(&t)
    }

    /// Geodesic distance to `other` in radians, in `[0, pi]`.
    pub fn geodesic_angle(&self, other: &UnitQuaternion) -> f64 {
        2.0 * self.dot(other).abs().min(1.0).acos()
    }

    /// Rotation angle in radians, in `[0, pi]`.
    pub fn angle(&self) -> f64 {
        2.0 * self.w.abs().min(1.0).acos()
    }

    /// Squared-norm defect, useful for drift checks after long compositions.
    pub fn norm_defect(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z - 1.0).abs()
    }
}

impl Serialize for UnitQuaternion {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.wxyz().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for UnitQuaternion {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let [w, x, y, z] = <[f64; 4]>::deserialize(deserializer)?;
        UnitQuaternion::new_normalize(w, x, y, z).map_err(D::Error::custom)
    }
}

/// Exponential map from an axis-angle tangent vector to a rotation.
///
/// The angle is the norm of `omega`; angles above `pi` wrap onto the
/// canonical hemisphere.
pub fn exp_map(omega: TangentVec) -> UnitQuaternion {
    let theta = omega.norm();
    let half = 0.5 * theta;
    // sin(theta/2) / theta, with the 0/0 limit handled by a series.
    let k = if theta < 1e-8 {
        0.5 - theta * theta / 48.0
    } else {
        half.sin() / theta
    };
    UnitQuaternion::canonicalized(half.cos(), k * omega.x, k * omega.y, k * omega.z)
}

/// Logarithm map: axis-angle tangent vector with norm in `[0, pi]`.
///
/// At exactly `pi` the axis sign is ambiguous; the canonical hemisphere makes
/// the choice deterministic (the returned axis is the lexicographically
/// larger of the two candidates).
pub fn log_map(q: &UnitQuaternion) -> TangentVec {
    let v = Vec3::new(q.x(), q.y(), q.z());
    let s = v.norm();
    if s < 1e-9 {
        // Near the identity: theta/sin(theta/2)*... collapses to 2/w.
        return v * (2.0 / q.w());
    }
    let theta = 2.0 * s.atan2(q.w());
    v * (theta / s)
}

/// Rotation matrix of `q` (column-vector convention, `m * p == rotate(q, p)`).
pub fn quat_to_matrix(q: &UnitQuaternion) -> Matrix3<f64> {
    let (w, x, y, z) = (q.w(), q.x(), q.y(), q.z());
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

/// Extracts the canonical quaternion of a rotation matrix.
///
/// Rejects matrices that are not orthonormal with determinant +1 within
/// `1e-6` (improper rotations such as reflections included).
pub fn matrix_to_quat(m: &Matrix3<f64>) -> Result<UnitQuaternion, So3Error> {
    let defect = (m.transpose() * m - Matrix3::identity()).abs().max();
    let det = m.determinant();
    if !defect.is_finite() || defect > MATRIX_EPS || (det - 1.0).abs() > MATRIX_EPS {
        return Err(So3Error::NotARotation {
            orthogonality_error: defect,
            determinant: det,
        });
    }

    // Shepperd's method: pick the largest diagonal combination for stability.
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let (w, x, y, z) = if trace > m[(0, 0)] && trace > m[(1, 1)] && trace > m[(2, 2)] {
        let r = (1.0 + trace).sqrt();
        let s = 0.5 / r;
        (
            0.5 * r,
            (m[(2, 1)] - m[(1, 2)]) * s,
            (m[(0, 2)] - m[(2, 0)]) * s,
            (m[(1, 0)] - m[(0, 1)]) * s,
        )
    } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
        let r = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
        let s = 0.5 / r;
        (
            (m[(2, 1)] - m[(1, 2)]) * s,
            0.5 * r,
            (m[(0, 1)] + m[(1, 0)]) * s,
            (m[(0, 2)] + m[(2, 0)]) * s,
        )
    } else if m[(1, 1)] > m[(2, 2)] {
        let r = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
        let s = 0.5 / r;
        (
            (m[(0, 2)] - m[(2, 0)]) * s,
            (m[(0, 1)] + m[(1, 0)]) * s,
            0.5 * r,
            (m[(1, 2)] + m[(2, 1)]) * s,
        )
    } else {
        let r = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
        let s = 0.5 / r;
        (
            (m[(1, 0)] - m[(0, 1)]) * s,
            (m[(0, 2)] + m[(2, 0)]) * s,
            (m[(1, 2)] + m[(2, 1)]) * s,
            0.5 * r,
        )
    };
    UnitQuaternion::new_normalize(w, x, y, z)
}

/// Uniformly distributed random rotation (normalized 4D Gaussian sample).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> UnitQuaternion {
    loop {
        let w: f64 = rng.sample(StandardNormal);
        let x: f64 = rng.sample(StandardNormal);
        let y: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        if let Ok(q) = UnitQuaternion::new_normalize(w, x, y, z) {
            return q;
        }
    }
}
