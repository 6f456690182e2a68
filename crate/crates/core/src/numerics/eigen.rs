//! Dense symmetric eigensolver for small instances (cyclic Jacobi).

use crate::matrix::Matrix;
use crate::numerics::NumericsError;
use crate::precision::Real;

/// Largest dimension the small-instance solver accepts.
pub const MAX_EIG_DIM: usize = 64;

fn check_symmetric<T: Real>(m: &Matrix<T>) -> Result<(), NumericsError> {
    if m.rows() != m.cols() {
        return Err(NumericsError::NotSymmetric);
    }
    let tol = 1e-10;
    for i in 0..m.rows() {
        for j in (i + 1)..m.cols() {
            if (m[(i, j)] - m[(j, i)]).abs().to_f64_() > tol {
                return Err(NumericsError::NotSymmetric);
            }
        }
    }
    Ok(())
}

/// All eigenvalues of a symmetric matrix, ascending.
///
/// Cyclic Jacobi rotations; the off-diagonal Frobenius mass decreases
/// quadratically per sweep, and the sweep loop stops once it falls below
/// machine precision relative to the matrix scale.
pub fn eigenvalues_sym<T: Real>(m: &Matrix<T>) -> Result<Vec<T>, NumericsError> {
    check_symmetric(m)?;
    let n = m.rows();
    assert!(n <= MAX_EIG_DIM, "small-instance solver: dimension {n} > {MAX_EIG_DIM}");
    if n == 0 {
        return Ok(vec![]);
    }
    // work in f64 regardless of T so the 1e-8 accuracy contract holds
    let mut a = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            // symmetrize so the iteration is exact on the checked input
            a[i * n + j] = 0.5 * (m[(i, j)].to_f64_() + m[(j, i)].to_f64_());
        }
    }
    let scale = a.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-300);
    let tol = 1e-15 * scale;
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off = off.max(a[i * n + j].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq.abs() <= tol * 1e-2 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eigs: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    eigs.sort_by(|x, y| x.partial_cmp(y).expect("finite eigenvalues"));
    Ok(eigs.into_iter().map(T::from_f64).collect())
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eig_sym<T: Real>(m: &Matrix<T>) -> Result<T, NumericsError> {
    Ok(eigenvalues_sym(m)?[0])
}

/// Singular values of an arbitrary small matrix, descending
/// (square roots of the eigenvalues of `A^T A`).
pub fn singular_values<T: Real>(a: &Matrix<T>) -> Vec<T> {
    let gram = a.matmul_tn(a);
    let mut eigs = eigenvalues_sym(&gram).expect("gram matrix is symmetric");
    eigs.reverse();
    eigs.into_iter()
        .map(|e| {
            let v = e.to_f64_().max(0.0);
            T::from_f64(v.sqrt())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::rng::RngStream;

    /// Independent oracle: characteristic polynomial by Faddeev–LeVerrier,
    /// roots by sign-change bisection on the Gershgorin interval.
    fn eig_oracle(m: &Matrix<f64>) -> Vec<f64> {
        let n = m.rows();
        // coefficients c[0..=n] of det(lambda I - M), c[n] = 1 leading
        let mut coeffs = vec![0.0f64; n + 1];
        coeffs[n] = 1.0;
        let mut mk = Matrix::<f64>::identity(n);
        for k in 1..=n {
            mk = m.matmul_nn(&mk);
            let trace: f64 = (0..n).map(|i| mk[(i, i)]).sum();
            let c = -trace / k as f64;
            coeffs[n - k] = c;
            for i in 0..n {
                mk[(i, i)] += c;
            }
        }
        let poly = |x: f64| -> f64 {
            let mut acc = 0.0;
            for k in (0..=n).rev() {
                acc = acc * x + coeffs[k];
            }
            acc
        };
        // Gershgorin bound
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let radius: f64 = (0..n).filter(|&j| j != i).map(|j| m[(i, j)].abs()).sum();
            lo = lo.min(m[(i, i)] - radius);
            hi = hi.max(m[(i, i)] + radius);
        }
        let (lo, hi) = (lo - 1e-6, hi + 1e-6);
        let samples = 20_000;
        let mut roots = vec![];
        let mut prev_x = lo;
        let mut prev_v = poly(lo);
        for s in 1..=samples {
            let x = lo + (hi - lo) * s as f64 / samples as f64;
            let v = poly(x);
            if prev_v == 0.0 {
                roots.push(prev_x);
            } else if prev_v.signum() != v.signum() {
                let (mut a, mut b) = (prev_x, x);
                let (mut fa, _) = (prev_v, v);
                for _ in 0..200 {
                    let mid = 0.5 * (a + b);
                    let fm = poly(mid);
                    if fa.signum() == fm.signum() {
                        a = mid;
                        fa = fm;
                    } else {
                        b = mid;
                    }
                }
                roots.push(0.5 * (a + b));
            }
            prev_x = x;
            prev_v = v;
        }
        roots
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let m = Matrix::<f64>::identity(3);
        assert_eq!(min_eig_sym(&m).unwrap(), 1.0);
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::<f64>::from_rows(&[&[2.0, 0.0][..], &[0.0, 0.5][..]]);
        assert!((min_eig_sym(&m).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn asymmetric_input_rejected() {
        let m = Matrix::<f64>::from_rows(&[&[1.0, 2.0][..], &[0.0, 1.0][..]]);
        assert!(matches!(min_eig_sym(&m), Err(NumericsError::NotSymmetric)));
    }

    #[test]
    fn random_gram_matrices_match_charpoly_oracle() {
        let mut rng = RngStream::new(31);
        for _ in 0..30 {
            let a = Matrix::<f64>::from_fn(4, 4, |_, _| rng.next_gauss());
            let m = a.matmul_tn(&a);
            let got = eigenvalues_sym(&m).unwrap();
            let want = eig_oracle(&m);
            assert_eq!(want.len(), 4, "oracle found all roots");
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() <= 1e-8, "eig {g} vs oracle {w}");
            }
        }
    }

    #[test]
    fn min_eig_below_every_diagonal_entry() {
        let mut rng = RngStream::new(77);
        for _ in 0..50 {
            let a = Matrix::<f64>::from_fn(6, 6, |_, _| rng.next_gauss());
            let m = a.matmul_tn(&a);
            let min = min_eig_sym(&m).unwrap();
            for i in 0..6 {
                assert!(min <= m[(i, i)] + 1e-10);
            }
        }
    }

    #[test]
    fn singular_values_of_diagonal() {
        let a = Matrix::<f64>::from_rows(&[&[3.0, 0.0][..], &[0.0, -2.0][..]]);
        let sv = singular_values(&a);
        assert!((sv[0] - 3.0).abs() < 1e-10);
        assert!((sv[1] - 2.0).abs() < 1e-10);
    }
}
