//! Continuous 6D rotation parameterization.
//!
//! A 6D vector `[a1; a2]` holds two 3-vectors that are orthonormalized by
//! Gram–Schmidt into the first two columns of a rotation matrix; the third
//! column is their cross product. Matrices are row-major `m[row][col]`.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub type Mat3 = [[f64; 3]; 3];

/// Inputs whose columns are shorter than this, or whose normalized columns
/// have a cross product shorter than this, are rejected.
pub const DEGENERATE_TOL: f64 = 1e-9;

pub const IDENTITY_6D: [f64; 6] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];

pub fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn check_columns(a1: [f64; 3], a2: [f64; 3]) -> Result<()> {
    let n1 = dot(a1, a1).sqrt();
    let n2 = dot(a2, a2).sqrt();
    if !(n1 > DEGENERATE_TOL) || !(n2 > DEGENERATE_TOL) {
        return Err(Error::DegenerateRotation(format!(
            "column norms {n1:.3e}, {n2:.3e}"
        )));
    }
    let c = cross(a1, a2);
    let s = dot(c, c).sqrt() / (n1 * n2);
    if !(s > DEGENERATE_TOL) {
        return Err(Error::DegenerateRotation(format!(
            "columns are parallel (sin angle {s:.3e})"
        )));
    }
    Ok(())
}

/// Rotation matrix from a 6D vector.
pub fn rot6d_to_matrix(r: &[f64]) -> Result<Mat3> {
    if r.len() != 6 || r.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateRotation(format!("invalid input {r:?}")));
    }
    let a1 = [r[0], r[1], r[2]];
    let a2 = [r[3], r[4], r[5]];
    check_columns(a1, a2)?;
    let n1 = dot(a1, a1).sqrt();
    let b1 = [a1[0] / n1, a1[1] / n1, a1[2] / n1];
    let d = dot(b1, a2);
    let u2 = [a2[0] - d * b1[0], a2[1] - d * b1[1], a2[2] - d * b1[2]];
    let n2 = dot(u2, u2).sqrt();
    let b2 = [u2[0] / n2, u2[1] / n2, u2[2] / n2];
    let b3 = cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// The canonical 6D encoding of a rotation: its first two columns.
pub fn matrix_to_rot6d(m: &Mat3) -> [f64; 6] {
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Rodrigues' formula for a rotation vector (axis × angle).
pub fn axis_angle_to_matrix(v: [f64; 3]) -> Mat3 {
    let theta = dot(v, v).sqrt();
    if theta < 1e-15 {
        return identity();
    }
    let k = [v[0] / theta, v[1] / theta, v[2] / theta];
    let (s, c) = theta.sin_cos();
    let t = 1.0 - c;
    [
        [c + k[0] * k[0] * t, k[0] * k[1] * t - k[2] * s, k[0] * k[2] * t + k[1] * s],
        [k[1] * k[0] * t + k[2] * s, c + k[1] * k[1] * t, k[1] * k[2] * t - k[0] * s],
        [k[2] * k[0] * t - k[1] * s, k[2] * k[1] * t + k[0] * s, c + k[2] * k[2] * t],
    ]
}

pub fn identity() -> Mat3 {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

pub fn mat_vec(a: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [dot(a[0], v), dot(a[1], v), dot(a[2], v)]
}

pub fn transpose(a: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = a[j][i];
        }
    }
    out
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_angle_between(a: &Mat3, b: &Mat3) -> f64 {
    let r = mat_mul(&transpose(a), b);
    let tr = r[0][0] + r[1][1] + r[2][2];
    ((tr - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

/// Batched Gram–Schmidt on the tape: `[k, 6]` → `[k, 9]` row-major matrices.
pub fn rot6d_to_matrix_batch<'t>(r6: Var<'t>) -> Result<Var<'t>> {
    let value = r6.value();
    let [k, 6] = *value.shape() else {
        return Err(Error::Shape {
            op: "rot6d_to_matrix_batch",
            lhs: value.shape().to_vec(),
            rhs: vec![0, 6],
        });
    };
    for i in 0..k {
        let row = value.row(i);
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateRotation(format!("row {i} is not finite")));
        }
        check_columns([row[0], row[1], row[2]], [row[3], row[4], row[5]])
            .map_err(|e| Error::DegenerateRotation(format!("row {i}: {e}")))?;
    }
    let a1 = r6.narrow(1, 0, 3)?;
    let a2 = r6.narrow(1, 3, 3)?;
    let n1 = a1.square()?.sum_axis(1)?.sqrt()?;
    let b1 = a1.div(n1.expand_cols(3)?)?;
    let d = b1.mul(a2)?.sum_axis(1)?;
    let u2 = a2.sub(b1.mul(d.expand_cols(3)?)?)?;
    let n2 = u2.square()?.sum_axis(1)?.sqrt()?;
    let b2 = u2.div(n2.expand_cols(3)?)?;
    let c = |v: Var<'t>, i| v.narrow(1, i, 1);
    let (x1, y1, z1) = (c(b1, 0)?, c(b1, 1)?, c(b1, 2)?);
    let (x2, y2, z2) = (c(b2, 0)?, c(b2, 1)?, c(b2, 2)?);
    let x3 = y1.mul(z2)?.sub(z1.mul(y2)?)?;
    let y3 = z1.mul(x2)?.sub(x1.mul(z2)?)?;
    let z3 = x1.mul(y2)?.sub(y1.mul(x2)?)?;
    Var::concat(&[x1, x2, x3, y1, y2, y3, z1, z2, z3], 1)
}

/// Single rotation on the tape: `[6]` → `[3, 3]`.
pub fn rot6d_to_matrix_var<'t>(r6: Var<'t>) -> Result<Var<'t>> {
    rot6d_to_matrix_batch(r6.reshape(&[1, 6])?)?.reshape(&[3, 3])
}

/// Convenience for callers holding a tape-free 6D value.
pub fn rot6d_matrix_on<'t>(tape: &'t Tape, r: &[f64]) -> Result<Var<'t>> {
    rot6d_to_matrix_var(tape.constant(Tensor::vector(r.to_vec())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_scale_invariance() {
        assert_eq!(rot6d_to_matrix(&IDENTITY_6D).unwrap(), identity());
        assert_eq!(rot6d_to_matrix(&[2., 0., 0., 0., 5., 0.]).unwrap(), identity());
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(rot6d_to_matrix(&[0.0; 6]).is_err());
        assert!(rot6d_to_matrix(&[1., 0., 0., 2., 0., 0.]).is_err());
        assert!(rot6d_to_matrix(&[1., 0., 0., 0., 0., 0.]).is_err());
        assert!(rot6d_to_matrix(&[f64::NAN, 0., 0., 0., 1., 0.]).is_err());
        let tape = Tape::new();
        let bad = tape.leaf(Tensor::matrix(2, 6, vec![1., 0., 0., 0., 1., 0., 1., 1., 1., 2., 2., 2.]).unwrap());
        assert!(matches!(rot6d_to_matrix_batch(bad), Err(Error::DegenerateRotation(_))));
    }

    #[test]
    fn batch_matches_scalar_path() {
        let r = [0.3, -1.2, 0.5, 0.9, 0.1, -0.4];
        let tape = Tape::inference();
        let m = rot6d_matrix_on(&tape, &r).unwrap().value();
        let expect = rot6d_to_matrix(&r).unwrap();
        for (a, b) in m.data().iter().zip(expect.iter().flatten()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn axis_angle_round_trip() {
        let m = axis_angle_to_matrix([0.0, std::f64::consts::FRAC_PI_2, 0.0]);
        let v = mat_vec(&m, [1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-15 && (v[2] + 1.0).abs() < 1e-15);
        let back = rot6d_to_matrix(&matrix_to_rot6d(&m)).unwrap();
        assert!(rotation_angle_between(&m, &back) < 1e-7);
    }
}
