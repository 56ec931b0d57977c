//! ReLU multilayer perceptron over a borrowed flat parameter slice.
//!
//! Layer `l` stores its weights as an `in × out` row-major block followed by
//! `out` biases, so a batch `X (B × in)` maps to `X·W + b`.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mlp {
    pub widths: Vec<usize>,
    /// Start of this network inside the owning parameter vector.
    pub offset: usize,
}

/// Activations saved by a batched forward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    pub batch: usize,
    /// `acts[0]` is the input, `acts[l]` the output of layer `l` (post-ReLU for
    /// hidden layers); the last entry is the network output.
    pub acts: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().unwrap()
    }
}

/// `C = A·B + beta·C` on strided row-major views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above keep every strided access in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Mlp {
    pub fn new(widths: Vec<usize>, offset: usize) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w > 0), "bad widths {widths:?}");
        Mlp { widths, offset }
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn num_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.num_params()
    }

    /// Offsets of layer `l`'s weights and biases in the owning vector.
    fn layer_at(&self, l: usize) -> (usize, usize) {
        let mut o = self.offset;
        for w in self.widths.windows(2).take(l) {
            o += w[0] * w[1] + w[1];
        }
        (o, o + self.widths[l] * self.widths[l + 1])
    }

    /// He-uniform weights, zero biases.
    pub fn init<R: Rng>(&self, params: &mut [f64], rng: &mut R) {
        for l in 0..self.layers() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_at(l);
            let bound = (6.0 / fan_in as f64).sqrt();
            for p in &mut params[w..w + fan_in * fan_out] {
                *p = rng.gen_range(-bound..bound);
            }
            params[b..b + fan_out].iter_mut().for_each(|p| *p = 0.0);
        }
    }

    pub fn forward(&self, params: &[f64], x: &[f64], batch: usize) -> MlpCache {
        assert_eq!(x.len(), batch * self.input_dim());
        let mut acts = Vec::with_capacity(self.widths.len());
        acts.push(x.to_vec());
        for l in 0..self.layers() {
            let (din, dout) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_at(l);
            let bias = &params[b..b + dout];
            let mut z = Vec::with_capacity(batch * dout);
            for _ in 0..batch {
                z.extend_from_slice(bias);
            }
            gemm(
                batch,
                din,
                dout,
                &acts[l],
                (din, 1),
                &params[w..w + din * dout],
                (dout, 1),
                1.0,
                &mut z,
            );
            if l + 1 < self.layers() {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        MlpCache { batch, acts }
    }

    /// Output only, for evaluation.
    pub fn apply(&self, params: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        self.forward(params, x, batch).acts.pop().unwrap()
    }

    /// Accumulates parameter gradients into `grads` (same layout as `params`)
    /// and returns the gradient with respect to the input when `want_input`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        gout: &[f64],
        grads: &mut [f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let batch = cache.batch;
        let mut g = gout.to_vec();
        for l in (0..self.layers()).rev() {
            let (din, dout) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_at(l);
            if l + 1 < self.layers() {
                // ReLU: a = max(z, 0) so a > 0 exactly where z > 0
                for (gv, &a) in g.iter_mut().zip(&cache.acts[l + 1]) {
                    if a <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            // dW += Xᵀ·G
            gemm(
                din,
                batch,
                dout,
                &cache.acts[l],
                (1, din),
                &g,
                (dout, 1),
                1.0,
                &mut grads[w..w + din * dout],
            );
            let gb = &mut grads[b..b + dout];
            for row in g.chunks_exact(dout) {
                for (acc, v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            if l > 0 || want_input {
                // dX = G·Wᵀ
                let mut gin = vec![0.0; batch * din];
                gemm(
                    batch,
                    dout,
                    din,
                    &g,
                    (dout, 1),
                    &params[w..w + din * dout],
                    (1, dout),
                    0.0,
                    &mut gin,
                );
                g = gin;
            }
        }
        want_input.then_some(g)
    }

    /// Plain single-sample evaluation, independent of the batched path.
    pub fn eval_naive(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut a = x.to_vec();
        for l in 0..self.layers() {
            let (din, dout) = (self.widths[l], self.widths[l + 1]);
            let (w, b) = self.layer_at(l);
            let mut z = params[b..b + dout].to_vec();
            for i in 0..din {
                for j in 0..dout {
                    z[j] += a[i] * params[w + i * dout + j];
                }
            }
            if l + 1 < self.layers() {
                for v in z.iter_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            a = z;
        }
        a
    }
}
