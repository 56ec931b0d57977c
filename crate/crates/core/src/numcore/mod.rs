//! Dense real linear algebra: SVD, nonsymmetric eigen-decomposition,
//! least squares and the matrix exponential.
//!
//! Everything here is pure; identical inputs give bit-identical outputs.

mod eig;
mod expm;
mod matrix;
mod svd;

pub use eig::{eig, eigenvalues, Eigen};
pub use expm::{expm, rotation_block};
pub use matrix::Matrix;
pub use svd::{singular_values, svd, Svd};

use crate::error::{Error, Result};

/// Relative cutoff below which singular values count as zero in [`lstsq`].
pub const LSTSQ_RCOND: f64 = 1e-10;

/// Minimum-norm least-squares solution of `A·X ≈ B` via the SVD pseudo-inverse.
pub fn lstsq(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Contract(format!(
            "lstsq: A has {} rows but B has {}",
            a.rows(),
            b.rows()
        )));
    }
    if !b.is_finite() {
        return Err(Error::Contract("lstsq: B contains non-finite entries".into()));
    }
    let d = svd(a)?;
    let cutoff = d.s.first().copied().unwrap_or(0.0) * LSTSQ_RCOND;
    // X = V · diag(1/s) · Uᵀ · B
    let utb = d.u.transpose().matmul(b);
    let mut scaled = utb;
    for (i, &s) in d.s.iter().enumerate() {
        let inv = if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 };
        for x in scaled.row_mut(i) {
            *x *= inv;
        }
    }
    Ok(d.v.matmul(&scaled))
}
