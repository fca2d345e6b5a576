//! Small dense helpers shared by the filters and control laws.

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

/// Replaces `a` by `(a + aᵀ) / 2`.
pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Ratio of largest to smallest singular value.
pub fn condition_estimate(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 1.0;
    }
    let sv = a.clone().singular_values();
    let max = sv.max();
    let min = sv.min();
    if min == 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

const MAX_CONDITION: f64 = 1e14;

/// Inverse of a symmetric matrix, refusing ill-conditioned input.
pub fn symmetric_inverse(a: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let mut inv = solve(a, &DMatrix::identity(a.nrows(), a.nrows()), context)?;
    symmetrize(&mut inv);
    Ok(inv)
}

/// Solves `a x = b` for general square `a` by LU with a conditioning guard.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>, context: &'static str) -> Result<DMatrix<f64>> {
    let condition = condition_estimate(a);
    if !(condition <= MAX_CONDITION) {
        return Err(Error::Singular { context, condition });
    }
    a.clone()
        .lu()
        .solve(b)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or(Error::Singular { context, condition })
}

/// Symmetric square root of a symmetric PSD matrix. Eigenvalues below
/// `-tol·max|λ|` are rejected; slightly negative round-off is clamped to zero.
pub fn psd_sqrt(a: &DMatrix<f64>, inverse: bool) -> Result<DMatrix<f64>> {
    let mut s = a.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let max = eig.eigenvalues.amax();
    let tol = 1e-10 * max.max(1.0);
    let mut d = DVector::zeros(eig.eigenvalues.len());
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -tol {
            return Err(Error::NotPositiveDefinite("square-root transform"));
        }
        let l = l.max(0.0);
        d[i] = if inverse {
            if l <= 0.0 {
                return Err(Error::Singular {
                    context: "inverse square root",
                    condition: f64::INFINITY,
                });
            }
            l.sqrt().recip()
        } else {
            l.sqrt()
        };
    }
    let q = &eig.eigenvectors;
    let mut out = q * DMatrix::from_diagonal(&d) * q.transpose();
    symmetrize(&mut out);
    Ok(out)
}

pub fn is_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&a, false).unwrap();
        assert!((&s * &s - &a).amax() < 1e-12);
        let si = psd_sqrt(&a, true).unwrap();
        assert!((&si * &s - DMatrix::identity(2, 2)).amax() < 1e-12);
    }

    #[test]
    fn singular_inverse_is_reported() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            symmetric_inverse(&a, "test"),
            Err(Error::Singular { .. })
        ));
    }

    #[test]
    fn indefinite_rejected_by_sqrt() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(psd_sqrt(&a, false).is_err());
    }
}
