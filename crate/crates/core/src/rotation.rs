//! Rotation utilities: quaternion canonicalization, the 6D continuous encoding
//! used on the network side, and geodesic distances.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};

use crate::autograd::sixd_to_matrix;
use crate::error::{Error, Result};

/// Tolerance on `|q| - 1` accepted for stored orientations.
pub const UNIT_TOLERANCE: f64 = 1e-6;

/// Flips the sign of `q` so its scalar part is nonnegative.
pub fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Builds a canonical unit quaternion from `(w, x, y, z)`, rejecting inputs
/// whose norm is more than [`UNIT_TOLERANCE`] away from one.
pub fn quaternion_from_wxyz(wxyz: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(wxyz[0], wxyz[1], wxyz[2], wxyz[3]);
    let n = q.norm();
    if !n.is_finite() || (n - 1.0).abs() > UNIT_TOLERANCE {
        return Err(Error::invalid(format!(
            "orientation quaternion has norm {n}, expected 1"
        )));
    }
    // Stored as given (within tolerance) so serialization round-trips bit-exactly.
    Ok(canonical(UnitQuaternion::new_unchecked(q)))
}

pub fn quaternion_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// The first two columns of the rotation matrix, column-major.
pub fn rotation_encode(q: &UnitQuaternion<f64>) -> [f64; 6] {
    let m = q.to_rotation_matrix();
    let m = m.matrix();
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Gram-Schmidt decode of a 6D encoding. Zero or parallel halves are rejected.
pub fn rotation_decode(v: &[f64; 6]) -> Result<UnitQuaternion<f64>> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("6D rotation contains non-finite values"));
    }
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if n1 < 1e-9 {
        return Err(Error::invalid("6D rotation: first column is zero"));
    }
    let u = a2 - a1 * (a1.dot(&a2) / (n1 * n1));
    if u.norm() < 1e-9 * a2.norm().max(1.0) {
        return Err(Error::invalid(
            "6D rotation: columns are parallel or second column is zero",
        ));
    }
    Ok(matrix_to_quaternion(&sixd_to_matrix(v)))
}

/// Row-major 3×3 → canonical unit quaternion.
pub fn matrix_to_quaternion(m: &[f64; 9]) -> UnitQuaternion<f64> {
    let mat = Matrix3::from_row_slice(m);
    let rot = Rotation3::from_matrix_unchecked(mat);
    canonical(UnitQuaternion::from_rotation_matrix(&rot))
}

/// Row-major 3×3 rotation matrix.
pub fn quaternion_to_matrix(q: &UnitQuaternion<f64>) -> [f64; 9] {
    let m = q.to_rotation_matrix();
    let m = m.matrix();
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

/// Geodesic angle in radians between two orientations.
pub fn geodesic(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    a.angle_to(b)
}

/// Rotation about +z by `yaw` radians.
pub fn yaw_quaternion(yaw: f64) -> UnitQuaternion<f64> {
    canonical(UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw))
}
