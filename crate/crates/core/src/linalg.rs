//! Small dense helpers on top of nalgebra used by the filter and the
//! climatology algebra.

use nalgebra::{DMatrix, DVector, Dim, Matrix, RawStorage};

use crate::{Error, Result};

/// Eigenvalues below this are floored before taking roots or inverses.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Applies `f` to the spectrum of a symmetric matrix: `Q f(L) Q^T`.
pub fn sym_apply(m: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let sym = symmetrize(m);
    let eig = sym.symmetric_eigen();
    let mapped = eig.eigenvalues.map(f);
    let q = &eig.eigenvectors;
    let scaled = q * DMatrix::from_diagonal(&mapped);
    symmetrize(&(scaled * q.transpose()))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn check_spd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidInput(format!("{what} is not square")));
    }
    let min = symmetrize(m).symmetric_eigenvalues().min();
    if !(min > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "{what} has minimum eigenvalue {min:e}"
        )));
    }
    Ok(())
}

/// Symmetric positive square root of an SPD matrix.
pub fn spd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(m, "matrix")?;
    Ok(sym_apply(m, |l| l.max(EIGEN_FLOOR).sqrt()))
}

/// Inverse of the symmetric positive square root of an SPD matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    check_spd(m, "matrix")?;
    Ok(sym_apply(m, |l| 1.0 / l.max(EIGEN_FLOOR).sqrt()))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Solves `m x = b` for SPD `m`.
pub fn spd_solve(m: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = symmetrize(m)
        .cholesky()
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    Ok(chol.solve(b))
}

/// Column mean of a matrix whose columns are ensemble members.
pub fn column_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

/// Unbiased (k - 1) sample covariance of the columns of `m`.
pub fn sample_covariance(m: &DMatrix<f64>) -> DMatrix<f64> {
    let k = m.ncols();
    let mean = m.column_mean();
    let mut p = m.clone();
    for mut col in p.column_iter_mut() {
        col -= &mean;
    }
    (&p * p.transpose()) / (k as f64 - 1.0)
}

/// Relative Frobenius distance `|a - b| / max(|b|, floor)`.
pub fn rel_diff<R, C, S1, S2>(a: &Matrix<f64, R, C, S1>, b: &Matrix<f64, R, C, S2>) -> f64
where
    R: Dim,
    C: Dim,
    S1: RawStorage<f64, R, C>,
    S2: RawStorage<f64, R, C>,
{
    assert_eq!(a.shape(), b.shape());
    let diff: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff.sqrt() / norm.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let s = spd_sqrt(&m).unwrap();
        assert!(rel_diff(&(&s * &s), &m) < 1e-12);
        let is = spd_inv_sqrt(&m).unwrap();
        assert!(rel_diff(&(&is * &s), &DMatrix::identity(3, 3)) < 1e-12);
        assert!(rel_diff(&(spd_inverse(&m).unwrap() * &m), &DMatrix::identity(3, 3)) < 1e-12);
    }

    #[test]
    fn indefinite_rejected() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(spd_sqrt(&m), Err(Error::NotPositiveDefinite(_))));
        assert!(spd_inverse(&m).is_err());
    }

    #[test]
    fn covariance_of_known_columns() {
        let m = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]);
        assert!((sample_covariance(&m)[(0, 0)] - 1.0).abs() < 1e-15);
    }
}
