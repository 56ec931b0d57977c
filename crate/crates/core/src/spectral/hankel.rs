use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::numcore::{svd, Matrix};

/// Time-delay block matrix, possibly built from several trajectories side by side.
///
/// Within segment `s`, block row `i` of column `j` holds `x_{i+j}` of that
/// segment's trajectory, so column `j` is the delay vector `[x_j; …; x_{j+r−1}]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HankelMatrix {
    pub mat: Matrix,
    /// Delay count (block rows).
    pub r: usize,
    /// Windows per segment.
    pub q: usize,
    pub state_dim: usize,
    pub segments: usize,
}

pub fn build_hankel(traj: &Trajectory, r: usize, q: usize) -> Result<HankelMatrix> {
    build_hankel_multi(std::slice::from_ref(traj), r, q)
}

/// One Hankel segment per trajectory, concatenated horizontally.
pub fn build_hankel_multi(trajs: &[Trajectory], r: usize, q: usize) -> Result<HankelMatrix> {
    if r == 0 || q == 0 {
        return Err(Error::Contract(format!("hankel needs r >= 1 and q >= 1, got r={r} q={q}")));
    }
    let first = trajs
        .first()
        .ok_or_else(|| Error::Contract("hankel needs at least one trajectory".into()))?;
    let n = first.state_dim();
    let need = r + q - 1;
    for (s, t) in trajs.iter().enumerate() {
        if t.len() < need {
            return Err(Error::Contract(format!(
                "trajectory {s} has {} states; a {r}-delay Hankel with {q} windows needs {need}",
                t.len()
            )));
        }
        if t.state_dim() != n {
            return Err(Error::Contract("trajectories disagree on state dimension".into()));
        }
    }
    let cols = q * trajs.len();
    let mut mat = Matrix::zeros(r * n, cols);
    for (s, t) in trajs.iter().enumerate() {
        for i in 0..r {
            for j in 0..q {
                let x = &t.states[i + j];
                for d in 0..n {
                    mat[(i * n + d, s * q + j)] = x[d];
                }
            }
        }
    }
    Ok(HankelMatrix {
        mat,
        r,
        q,
        state_dim: n,
        segments: trajs.len(),
    })
}

impl HankelMatrix {
    /// Same layout, new entries (not necessarily Hankel-structured).
    fn with_mat(&self, mat: Matrix) -> HankelMatrix {
        HankelMatrix { mat, ..self.clone() }
    }

    /// The underlying state sequence of segment `s`, read off the first
    /// column and the last block row.
    pub fn states(&self, s: usize) -> Vec<Vec<f64>> {
        let n = self.state_dim;
        let c0 = s * self.q;
        let mut out = Vec::with_capacity(self.r + self.q - 1);
        for i in 0..self.r {
            out.push((0..n).map(|d| self.mat[(i * n + d, c0)]).collect());
        }
        for j in 1..self.q {
            out.push(
                (0..n)
                    .map(|d| self.mat[((self.r - 1) * n + d, c0 + j)])
                    .collect(),
            );
        }
        out
    }

    /// Nearest Hankel-structured matrix in Frobenius norm: every anti-diagonal
    /// block of each segment is replaced by its mean.
    pub fn project(&self, m: &Matrix) -> Matrix {
        let (r, q, n) = (self.r, self.q, self.state_dim);
        let span = r + q - 1;
        let mut out = Matrix::zeros(m.rows(), m.cols());
        let mut acc = vec![0.0; span * n];
        let mut cnt = vec![0usize; span];
        for s in 0..self.segments {
            acc.iter_mut().for_each(|v| *v = 0.0);
            cnt.iter_mut().for_each(|v| *v = 0);
            for i in 0..r {
                for j in 0..q {
                    cnt[i + j] += 1;
                    for d in 0..n {
                        acc[(i + j) * n + d] += m[(i * n + d, s * q + j)];
                    }
                }
            }
            for k in 0..span {
                let c = cnt[k] as f64;
                for d in 0..n {
                    acc[k * n + d] /= c;
                }
            }
            for i in 0..r {
                for j in 0..q {
                    for d in 0..n {
                        out[(i * n + d, s * q + j)] = acc[(i + j) * n + d];
                    }
                }
            }
        }
        out
    }

    /// True when block `(i, j)` of every segment depends only on `i + j`.
    pub fn is_structured(&self) -> bool {
        let n = self.state_dim;
        for s in 0..self.segments {
            for i in 1..self.r {
                for j in 0..self.q - 1 {
                    for d in 0..n {
                        if self.mat[(i * n + d, s * self.q + j)]
                            != self.mat[((i - 1) * n + d, s * self.q + j + 1)]
                        {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Alternates singular-value soft-thresholding at `lam` with projection back
/// onto Hankel structure. `lam == 0` or `iters == 0` returns the input untouched.
pub fn denoise_lowrank(h: &HankelMatrix, lam: f64, iters: usize) -> Result<HankelMatrix> {
    if !(lam >= 0.0) {
        return Err(Error::Contract(format!("denoise threshold must be >= 0, got {lam}")));
    }
    if lam == 0.0 || iters == 0 {
        return Ok(h.clone());
    }
    let mut x = h.mat.clone();
    for _ in 0..iters {
        let mut d = svd(&x)?;
        for s in d.s.iter_mut() {
            *s = (*s - lam).max(0.0);
        }
        x = h.project(&d.reconstruct());
    }
    Ok(h.with_mat(x))
}
