//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{LdcError, Result};

/// Diagonal jitter added when a kernel matrix is numerically semi-definite.
pub const KERNEL_JITTER: f64 = 1e-10;

pub(crate) fn ensure_square(a: &DMatrix<f64>, what: &'static str) -> Result<usize> {
    if a.nrows() != a.ncols() {
        return Err(LdcError::DimensionMismatch {
            what,
            expected: a.nrows(),
            got: a.ncols(),
        });
    }
    Ok(a.nrows())
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().min(a.ncols());
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

/// `(a + aᵀ) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky_lower(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    ensure_square(a, "cholesky input")?;
    a.clone()
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| LdcError::NotPositiveDefinite(what.to_string()))
}

/// Lower Cholesky factor, retrying once with `KERNEL_JITTER * mean(diag)` added
/// to the diagonal. Used for correlation kernels that are PSD up to rounding.
pub fn cholesky_lower_jittered(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    ensure_square(a, "cholesky input")?;
    if let Some(c) = a.clone().cholesky() {
        return Ok(c.l());
    }
    let n = a.nrows();
    let scale = (a.trace() / n.max(1) as f64).abs().max(f64::MIN_POSITIVE);
    let mut jittered = a.clone();
    for i in 0..n {
        jittered[(i, i)] += KERNEL_JITTER * scale;
    }
    jittered
        .cholesky()
        .map(|c| c.l())
        .ok_or_else(|| LdcError::NotPositiveDefinite(what.to_string()))
}

/// Eigendecomposition of the symmetric part of `a`.
pub fn sym_eigen(a: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    SymmetricEigen::new(symmetrize(a))
}

/// `tr(A A)` for symmetric `A`, i.e. the squared Frobenius norm.
pub fn trace_of_square(a: &DMatrix<f64>) -> f64 {
    a.iter().map(|x| x * x).sum()
}

/// Solves `A x = b` for SPD `A` via Cholesky.
pub fn spd_solve_vec(a: &DMatrix<f64>, b: &DVector<f64>, what: &str) -> Result<DVector<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| LdcError::NotPositiveDefinite(what.to_string()))?;
    Ok(chol.solve(b))
}

/// Inverse of an SPD matrix via Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let chol = a
        .clone()
        .cholesky()
        .ok_or_else(|| LdcError::NotPositiveDefinite(what.to_string()))?;
    Ok(chol.inverse())
}

/// Block-diagonal matrix assembled from square blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(n, n);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_rank_deficient_kernel() {
        let a = DMatrix::from_element(3, 3, 1.0);
        assert!(cholesky_lower(&a, "ones").is_err());
        let l = cholesky_lower_jittered(&a, "ones").unwrap();
        let back = &l * l.transpose();
        assert!((back - &a).amax() < 1e-8);
    }

    #[test]
    fn trace_of_square_matches_product() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        assert!((trace_of_square(&a) - (&a * &a).trace()).abs() < 1e-15);
    }

    #[test]
    fn block_diag_layout() {
        let a = DMatrix::from_element(1, 1, 2.0);
        let b = DMatrix::identity(2, 2);
        let m = block_diag(&[&a, &b]);
        assert_eq!(m.nrows(), 3);
        assert_eq!(m[(0, 0)], 2.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(m[(2, 2)], 1.0);
    }
}
