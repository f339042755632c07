//! Small dense linear algebra: Gaussian elimination and Jacobi eigenvalues.

use crate::error::{DuoError, Result};
use crate::tensor::Tensor;

/// Pivots smaller than this are treated as exact zeros.
pub const PIVOT_FLOOR: f64 = 1e-14;

const SYMMETRY_TOL: f64 = 1e-9;
const MAX_EIGEN_DIM: usize = 64;

fn square_dim(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(DuoError::contract(format!("expected a square matrix, got shape {s:?}"))),
    }
}

/// Solves `A x = b` by Gaussian elimination with partial pivoting.
pub fn solve_linear(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    if b.rank() != 1 || b.len() != n {
        return Err(DuoError::contract(format!(
            "rhs shape {:?} does not match {n}x{n} system",
            b.shape()
        )));
    }
    let x = solve_dense(a.data(), b.data(), n)?;
    Ok(Tensor::vector(x))
}

/// Row-major slice version of [`solve_linear`].
pub fn solve_dense(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    debug_assert_eq!(a.len(), n * n);
    debug_assert_eq!(b.len(), n);
    let mut m = a.to_vec();
    let mut x = b.to_vec();
    for col in 0..n {
        let (piv_row, piv_abs) = (col..n)
            .map(|r| (r, m[r * n + col].abs()))
            .fold((col, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
        if piv_abs < PIVOT_FLOOR || !piv_abs.is_finite() {
            return Err(DuoError::Singular { pivot: piv_abs.max(0.0) });
        }
        if piv_row != col {
            for k in 0..n {
                m.swap(col * n + k, piv_row * n + k);
            }
            x.swap(col, piv_row);
        }
        let pivot = m[col * n + col];
        for r in col + 1..n {
            let factor = m[r * n + col] / pivot;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                m[r * n + k] -= factor * m[col * n + k];
            }
            x[r] -= factor * x[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = x[col];
        for k in col + 1..n {
            acc -= m[col * n + k] * x[k];
        }
        x[col] = acc / m[col * n + col];
    }
    Ok(x)
}

/// Solves `Aᵀ x = b` for a row-major `A`.
pub fn solve_dense_transposed(a: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut at = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            at[j * n + i] = a[i * n + j];
        }
    }
    solve_dense(&at, b, n)
}

/// All eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn eigenvalues_sym(a: &Tensor) -> Result<Vec<f64>> {
    let n = square_dim(a)?;
    if n > MAX_EIGEN_DIM {
        return Err(DuoError::contract(format!("eigen solver limited to dim {MAX_EIGEN_DIM}, got {n}")));
    }
    let d = a.data();
    for i in 0..n {
        for j in i + 1..n {
            if (d[i * n + j] - d[j * n + i]).abs() > SYMMETRY_TOL {
                return Err(DuoError::contract(format!(
                    "matrix not symmetric at ({i},{j}): {} vs {}",
                    d[i * n + j],
                    d[j * n + i]
                )));
            }
        }
    }
    let mut m = d.to_vec();
    // symmetrize the tolerated residue so rotations see an exactly symmetric matrix
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let scale = m.iter().fold(0.0_f64, |s, x| s.max(x.abs())).max(1e-300);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum();
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[k * n + p];
                    let akq = m[k * n + q];
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[p * n + k];
                    let aqk = m[q * n + k];
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigen_sym(a: &Tensor) -> Result<f64> {
    Ok(eigenvalues_sym(a)?[0])
}

/// `(A + Aᵀ)/2`.
pub fn symmetrize(a: &Tensor) -> Result<Tensor> {
    let n = square_dim(a)?;
    let d = a.data();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = 0.5 * (d[i * n + j] + d[j * n + i]);
        }
    }
    Tensor::new(vec![n, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_solve() {
        let x = solve_linear(&Tensor::eye(3), &Tensor::vector(vec![1.0, 2.0, 3.0])).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn diagonal_solve() {
        let a = mat(&[&[2.0, 0.0], &[0.0, 4.0]]);
        let x = solve_linear(&a, &Tensor::vector(vec![2.0, 8.0])).unwrap();
        assert_eq!(x.data(), &[1.0, 2.0]);
    }

    #[test]
    fn symmetric_two_by_two_solve() {
        // b is an eigenvector with eigenvalue 2.5397 + 0.8466 = 3.3863
        let a = mat(&[&[2.5397, 0.8466], &[0.8466, 2.5397]]);
        let x = solve_linear(&a, &Tensor::vector(vec![0.5, 0.5])).unwrap();
        for v in x.data() {
            assert!((v - 0.5 / 3.3863).abs() < 1e-12);
            assert!((v - 0.14765).abs() < 1e-5);
        }
    }

    #[test]
    fn singular_matrix_reports_pivot() {
        let a = mat(&[&[1.0, 2.0], &[2.0, 4.0]]);
        match solve_linear(&a, &Tensor::vector(vec![1.0, 1.0])) {
            Err(DuoError::Singular { pivot }) => assert!(pivot < PIVOT_FLOOR),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let r = solve_linear(&Tensor::eye(3), &Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(r, Err(DuoError::Contract(_))));
    }

    #[test]
    fn eigen_examples() {
        assert!((min_eigen_sym(&Tensor::eye(2)).unwrap() - 1.0).abs() < 1e-12);
        let a = mat(&[&[0.7983, 0.2017], &[0.2017, 0.7983]]);
        assert!((min_eigen_sym(&a).unwrap() - 0.5966).abs() < 1e-9);
        let d = mat(&[&[-1.0, 0.0], &[0.0, 3.0]]);
        assert_eq!(min_eigen_sym(&d).unwrap(), -1.0);
    }

    #[test]
    fn asymmetric_rejected() {
        let a = mat(&[&[1.0, 0.5], &[0.4, 1.0]]);
        assert!(matches!(min_eigen_sym(&a), Err(DuoError::Contract(_))));
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2,1,0],[1,2,1],[0,1,2]] has eigenvalues 2-√2, 2, 2+√2
        let a = mat(&[&[2.0, 1.0, 0.0], &[1.0, 2.0, 1.0], &[0.0, 1.0, 2.0]]);
        let ev = eigenvalues_sym(&a).unwrap();
        let s = 2f64.sqrt();
        for (got, want) in ev.iter().zip([2.0 - s, 2.0, 2.0 + s]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }
}
