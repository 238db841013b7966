use nalgebra::{Matrix3, Unit, Vector3};

use super::MotionError;

/// Continuous 6D rotation: the first two columns of a rotation matrix,
/// column-major (`[c1x, c1y, c1z, c2x, c2y, c2z]`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation6D(pub [f64; 6]);

impl Rotation6D {
    pub const IDENTITY: Rotation6D = Rotation6D([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
}

/// Gram-Schmidt orthonormalization of the two stored columns.
pub fn rot6d_to_matrix(r: &Rotation6D) -> Result<Matrix3<f64>, MotionError> {
    let a = Vector3::new(r.0[0], r.0[1], r.0[2]);
    let b = Vector3::new(r.0[3], r.0[4], r.0[5]);
    let na = a.norm();
    if !(na > 1e-12) {
        return Err(MotionError::DegenerateRotation);
    }
    let c1 = a / na;
    let resid = b - c1 * c1.dot(&b);
    let nr = resid.norm();
    if !(nr > 1e-9 * b.norm().max(1e-300)) || !(nr > 1e-12) {
        return Err(MotionError::DegenerateRotation);
    }
    let c2 = resid / nr;
    let c3 = c1.cross(&c2);
    Ok(Matrix3::from_columns(&[c1, c2, c3]))
}

/// Extracts the first two columns. Rejects inputs that are not a proper
/// rotation within `1e-6`.
pub fn matrix_to_rot6d(m: &Matrix3<f64>) -> Result<Rotation6D, MotionError> {
    let err = (m.transpose() * m - Matrix3::identity()).abs().max();
    if !(err <= 1e-6) || !((m.determinant() - 1.0).abs() <= 1e-6) {
        return Err(MotionError::NotARotation(err));
    }
    Ok(Rotation6D([m[(0, 0)], m[(1, 0)], m[(2, 0)], m[(0, 1)], m[(1, 1)], m[(2, 1)]]))
}

/// Rotation about the vertical (+Y) axis.
pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Heading of a rotation: `atan2` of the rotated forward axis (+Z) projected
/// on the ground plane. Returns 0 when the forward axis is vertical.
pub fn yaw_of(m: &Matrix3<f64>) -> f64 {
    let f = m * Vector3::z();
    if f.x.hypot(f.z) < 1e-12 {
        0.0
    } else {
        f.x.atan2(f.z)
    }
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let tau = std::f64::consts::TAU;
    let mut w = a.rem_euclid(tau);
    if w > std::f64::consts::PI {
        w -= tau;
    }
    w
}

pub fn axis_angle(axis: Vector3<f64>, angle: f64) -> Matrix3<f64> {
    if angle == 0.0 || axis.norm() == 0.0 {
        return Matrix3::identity();
    }
    *nalgebra::Rotation3::from_axis_angle(&Unit::new_normalize(axis), angle).matrix()
}

/// Minimal rotation taking direction `from` onto direction `to`.
pub fn align_vectors(from: &Vector3<f64>, to: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b) = (from.normalize(), to.normalize());
    let axis = a.cross(&b);
    let sin = axis.norm();
    let cos = a.dot(&b);
    if sin > 1e-12 {
        return axis_angle(axis, sin.atan2(cos));
    }
    if cos > 0.0 {
        return Matrix3::identity();
    }
    // antiparallel: rotate by π about any axis orthogonal to `from`
    let ortho = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    axis_angle(a.cross(&ortho), std::f64::consts::PI)
}
