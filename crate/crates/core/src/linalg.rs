//! Eigen-decomposition of real symmetric 3×3 matrices.
//!
//! Eigenvalues come from the trigonometric solution of the characteristic
//! cubic. When the cubic is ill-conditioned (nearly repeated roots) or an
//! eigenvector cannot be recovered from a cross product, cyclic Jacobi
//! rotations are used instead.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SymmetricEigen3 {
    /// Ascending.
    pub values: [f64; 3],
    /// Unit eigenvectors, `vectors[k]` belongs to `values[k]`.
    pub vectors: [Vector3<f64>; 3],
}

/// Relative size of the cubic discriminant below which the closed form is
/// abandoned.
pub const DISCRIMINANT_FLOOR: f64 = 1e-12;

pub fn symmetric_eigen3(m: &Matrix3<f64>) -> SymmetricEigen3 {
    let off = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    if off == 0.0 {
        return diagonal(m);
    }
    closed_form(m).unwrap_or_else(|| jacobi_eigen3(m))
}

fn diagonal(m: &Matrix3<f64>) -> SymmetricEigen3 {
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| m[(a, a)].total_cmp(&m[(b, b)]));
    SymmetricEigen3 {
        values: idx.map(|k| m[(k, k)]),
        vectors: idx.map(|k| Vector3::ith(k, 1.0)),
    }
}

fn closed_form(m: &Matrix3<f64>) -> Option<SymmetricEigen3> {
    let q = m.trace() / 3.0;
    let off = m[(0, 1)].powi(2) + m[(0, 2)].powi(2) + m[(1, 2)].powi(2);
    let p2 = (m[(0, 0)] - q).powi(2) + (m[(1, 1)] - q).powi(2) + (m[(2, 2)] - q).powi(2) + 2.0 * off;
    let scale = m.abs().max().max(f64::MIN_POSITIVE);
    if p2 <= DISCRIMINANT_FLOOR * scale * scale {
        return None;
    }
    let p = (p2 / 6.0).sqrt();
    let b = (m - Matrix3::identity() * q) / p;
    let r = 0.5 * b.determinant();
    // The discriminant of the cubic is proportional to 1 - r².
    if 1.0 - r * r < DISCRIMINANT_FLOOR {
        return None;
    }
    let phi = r.clamp(-1.0, 1.0).acos() / 3.0;
    let hi = q + 2.0 * p * phi.cos();
    let lo = q + 2.0 * p * (phi + 2.0 * PI / 3.0).cos();
    let mid = 3.0 * q - hi - lo;
    let values = [lo, mid, hi];
    let mut vectors = [Vector3::zeros(); 3];
    for (k, &lambda) in values.iter().enumerate() {
        let shifted = m - Matrix3::identity() * lambda;
        let rows = [shifted.row(0).transpose(), shifted.row(1).transpose(), shifted.row(2).transpose()];
        let candidates = [rows[0].cross(&rows[1]), rows[0].cross(&rows[2]), rows[1].cross(&rows[2])];
        let best = candidates.iter().max_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))?;
        let row_scale = rows.iter().map(|r| r.norm_squared()).fold(0.0, f64::max);
        if best.norm_squared() <= 1e-20 * row_scale * row_scale {
            return None;
        }
        vectors[k] = best.normalize();
    }
    Some(SymmetricEigen3 { values, vectors })
}

/// Cyclic Jacobi rotations, sorted ascending.
pub fn jacobi_eigen3(m: &Matrix3<f64>) -> SymmetricEigen3 {
    let mut a = *m;
    let mut v = Matrix3::<f64>::identity();
    for _ in 0..64 {
        let off = a[(0, 1)].powi(2) + a[(0, 2)].powi(2) + a[(1, 2)].powi(2);
        let diag = a[(0, 0)].powi(2) + a[(1, 1)].powi(2) + a[(2, 2)].powi(2);
        if off <= 1e-36 * diag || off == 0.0 {
            break;
        }
        for (p, q) in [(0, 1), (0, 2), (1, 2)] {
            if a[(p, q)] == 0.0 {
                continue;
            }
            let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
            let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
            let t = if theta == 0.0 { 1.0 } else { t };
            let c = 1.0 / (t * t + 1.0).sqrt();
            let s = t * c;
            let mut rot = Matrix3::identity();
            rot[(p, p)] = c;
            rot[(q, q)] = c;
            rot[(p, q)] = s;
            rot[(q, p)] = -s;
            a = rot.transpose() * a * rot;
            a[(p, q)] = 0.0;
            a[(q, p)] = 0.0;
            v *= rot;
        }
    }
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    SymmetricEigen3 {
        values: idx.map(|k| a[(k, k)]),
        vectors: idx.map(|k| v.column(k).into_owned()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn check(m: &Matrix3<f64>, e: &SymmetricEigen3, tol: f64) {
        let scale = m.abs().max().max(1.0);
        for k in 0..3 {
            let r = m * e.vectors[k] - e.vectors[k] * e.values[k];
            assert!(r.norm() < tol * scale, "residual {} for {m}", r.norm());
            assert!((e.vectors[k].norm() - 1.0).abs() < 1e-12);
        }
        assert!(e.values[0] <= e.values[1] && e.values[1] <= e.values[2]);
    }

    #[test]
    fn diagonal_input_is_exact() {
        let m = Matrix3::from_diagonal(&Vector3::new(3.0, -1.0, 2.0));
        let e = symmetric_eigen3(&m);
        assert_eq!(e.values, [-1.0, 2.0, 3.0]);
    }

    #[test]
    fn repeated_roots_fall_back_to_jacobi() {
        // Eigenvalues 1, 1, 4.
        let m = Matrix3::new(2.0, 1.0, 1.0, 1.0, 2.0, 1.0, 1.0, 1.0, 2.0);
        assert!(closed_form(&m).is_none());
        let e = symmetric_eigen3(&m);
        check(&m, &e, 1e-13);
        assert!((e.values[0] - 1.0).abs() < 1e-14 && (e.values[2] - 4.0).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn closed_form_agrees_with_jacobi(v in prop::array::uniform6(-10.0f64..10.0)) {
            let m = Matrix3::new(v[0], v[3], v[4], v[3], v[1], v[5], v[4], v[5], v[2]);
            let e = symmetric_eigen3(&m);
            let j = jacobi_eigen3(&m);
            check(&m, &e, 1e-9);
            check(&m, &j, 1e-12);
            for k in 0..3 {
                prop_assert!((e.values[k] - j.values[k]).abs() < 1e-9 * m.abs().max().max(1.0));
            }
            prop_assert!((e.values.iter().sum::<f64>() - m.trace()).abs() < 1e-12 * m.abs().max().max(1.0));
        }
    }
}
