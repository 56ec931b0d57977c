//! Thin singular value decomposition by one-sided (Hestenes) Jacobi rotations.
//!
//! Columns of the working copy are orthogonalised pairwise until every pair is
//! orthogonal to machine precision; the column norms are then the singular values.
//! Accurate for the tall-and-skinny Hankel matrices this crate produces.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// `A = U · diag(S) · Vᵀ` with `k = min(rows, cols)` columns in `U` and `V`.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
}

impl Svd {
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.s.iter().enumerate() {
                us[(i, j)] *= s;
            }
        }
        us.matmul(&self.v.transpose())
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Svd {
        let k = k.min(self.s.len());
        Svd {
            u: self.u.columns(0, k),
            s: self.s[..k].to_vec(),
            v: self.v.columns(0, k),
        }
    }
}

pub fn svd(a: &Matrix) -> Result<Svd> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return Err(Error::Contract(format!("svd of empty {m}x{n} matrix")));
    }
    if !a.is_finite() {
        return Err(Error::Contract("svd input contains non-finite entries".into()));
    }
    if m >= n {
        let cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
        jacobi(cols, m)
    } else {
        // Aᵀ = U' S V'ᵀ  =>  A = V' S U'ᵀ
        let cols: Vec<Vec<f64>> = (0..m).map(|i| a.row(i).to_vec()).collect();
        let t = jacobi(cols, n)?;
        Ok(Svd {
            u: t.v,
            s: t.s,
            v: t.u,
        })
    }
}

/// Singular values only.
pub fn singular_values(a: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(a)?.s)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `cols` are the `n` columns (each of length `m`, `m >= n`) of the input.
fn jacobi(mut cols: Vec<Vec<f64>>, m: usize) -> Result<Svd> {
    let n = cols.len();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();
    let scale = cols
        .iter()
        .map(|c| dot(c, c))
        .sum::<f64>()
        .sqrt();
    if scale == 0.0 {
        return Ok(finish(cols, v, m));
    }
    let tol = f64::EPSILON * (m as f64).sqrt();
    // Columns whose norm is this small carry no information; skipping them keeps
    // rotations from chasing rounding noise in rank-deficient inputs.
    let negligible = (f64::EPSILON * scale).powi(2);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                if gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
                let (lo, hi) = v.split_at_mut(q);
                rotate(&mut lo[p], &mut hi[0], c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(
            "svd",
            format!("one-sided Jacobi did not converge in {MAX_SWEEPS} sweeps"),
        ));
    }
    Ok(finish(cols, v, m))
}

#[inline]
fn rotate(x: &mut [f64], y: &mut [f64], c: f64, s: f64) {
    for (a, b) in x.iter_mut().zip(y.iter_mut()) {
        let xa = *a;
        let yb = *b;
        *a = c * xa - s * yb;
        *b = s * xa + c * yb;
    }
}

fn finish(cols: Vec<Vec<f64>>, v: Vec<Vec<f64>>, m: usize) -> Svd {
    let n = cols.len();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));

    let smax = norms[order[0]];
    let cutoff = smax * f64::EPSILON * (m.max(n) as f64);
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    let mut filled: Vec<Vec<f64>> = Vec::with_capacity(n);
    for (jj, &j) in order.iter().enumerate() {
        let sigma = norms[j];
        let col = if sigma > cutoff && sigma > 0.0 {
            s.push(sigma);
            cols[j].iter().map(|x| x / sigma).collect::<Vec<f64>>()
        } else {
            s.push(if sigma > 0.0 { sigma } else { 0.0 });
            complete_basis(&filled, m)
        };
        for i in 0..m {
            u[(i, jj)] = col[i];
        }
        filled.push(col);
        for i in 0..n {
            vm[(i, jj)] = v[j][i];
        }
    }
    Svd { u, s, v: vm }
}

/// A unit vector orthogonal to every vector in `basis` (Gram-Schmidt over e_i).
fn complete_basis(basis: &[Vec<f64>], m: usize) -> Vec<f64> {
    let mut best: Option<Vec<f64>> = None;
    let mut best_norm = 0.0;
    for i in 0..m {
        let mut e = vec![0.0; m];
        e[i] = 1.0;
        for _ in 0..2 {
            for b in basis {
                let p = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= p * y;
                }
            }
        }
        let nrm = dot(&e, &e).sqrt();
        if nrm > best_norm {
            best_norm = nrm;
            best = Some(e);
        }
        if nrm > 0.5 {
            break;
        }
    }
    let e = best.expect("m >= 1");
    e.iter().map(|x| x / best_norm).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(m, n, data).unwrap()
    }

    fn orthonormality_error(q: &Matrix) -> f64 {
        let g = q.transpose().matmul(q);
        g.sub(&Matrix::identity(g.rows())).max_abs()
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let d = svd(&Matrix::identity(3)).unwrap();
        assert_eq!(d.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_singular_values_sorted() {
        let a = Matrix::from_diag(&[1.0, 3.0, 2.0]);
        let d = svd(&a).unwrap();
        assert_eq!(d.s, vec![3.0, 2.0, 1.0]);
        // U and V are the same signed permutation
        for i in 0..3 {
            for j in 0..3 {
                assert!(d.u[(i, j)].abs() == 0.0 || d.u[(i, j)].abs() == 1.0);
                assert_eq!(d.u[(i, j)], d.v[(i, j)]);
            }
        }
    }

    #[test]
    fn random_8x5_reconstructs() {
        let a = random(8, 5, 11);
        let d = svd(&a).unwrap();
        let err = a.sub(&d.reconstruct()).frobenius_norm();
        assert!(err <= 1e-10 * a.frobenius_norm().max(1.0), "err = {err}");
        assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn wide_matrix_goes_through_transpose() {
        let a = random(3, 9, 5);
        let d = svd(&a).unwrap();
        assert_eq!(d.u.shape(), (3, 3));
        assert_eq!(d.v.shape(), (9, 3));
        assert!(a.sub(&d.reconstruct()).frobenius_norm() < 1e-12);
    }

    #[test]
    fn rank_deficient_factors_stay_orthonormal() {
        let mut a = random(6, 4, 2);
        for i in 0..6 {
            a[(i, 3)] = a[(i, 0)] + 2.0 * a[(i, 1)];
        }
        let d = svd(&a).unwrap();
        assert!(d.s[3] < 1e-12);
        assert!(orthonormality_error(&d.u) < 1e-10);
        assert!(orthonormality_error(&d.v) < 1e-10);
    }

    #[test]
    fn zero_matrix() {
        let d = svd(&Matrix::zeros(3, 2)).unwrap();
        assert_eq!(d.s, vec![0.0, 0.0]);
        assert!(orthonormality_error(&d.u) < 1e-12);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = Matrix::identity(2);
        a[(0, 1)] = f64::NAN;
        assert!(svd(&a).is_err());
    }

    #[test]
    fn orthonormal_up_to_64() {
        for (k, &(m, n)) in [(64, 64), (40, 17), (13, 50)].iter().enumerate() {
            let a = random(m, n, 100 + k as u64);
            let d = svd(&a).unwrap();
            assert!(orthonormality_error(&d.u) <= 1e-10);
            assert!(orthonormality_error(&d.v) <= 1e-10);
            assert!(a.sub(&d.reconstruct()).frobenius_norm() <= 1e-10 * a.frobenius_norm());
        }
    }
}
