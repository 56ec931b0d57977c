//! Batched training objective with a hand-written reverse pass.

use serde::{Deserialize, Serialize};

use super::mlp::MlpCache;
use super::KoopmanNet;
use crate::dynamics::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub lin: f64,
    pub fwd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            recon: 1.0,
            lin: 1.0,
            fwd: 1.0,
        }
    }
}

impl LossWeights {
    pub fn recon_only(&self) -> LossWeights {
        LossWeights {
            recon: self.recon,
            lin: 0.0,
            fwd: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Horizons {
    pub t_lin: usize,
    pub t_fwd: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons { t_lin: 8, t_fwd: 4 }
    }
}

/// Unweighted batch means of the three loss terms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Terms {
    pub recon: f64,
    pub lin: f64,
    pub fwd: f64,
}

impl Terms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        w.recon * self.recon + w.lin * self.lin + w.fwd * self.fwd
    }
}

/// Delay vectors `ξ_{r−1}, …, ξ_{len−1}` of one trajectory, stored row by row.
#[derive(Debug, Clone, PartialEq)]
pub struct DelaySeries {
    pub dim: usize,
    pub rows: Vec<f64>,
}

impl DelaySeries {
    pub fn new(traj: &Trajectory, order: usize) -> Result<Self> {
        if order == 0 || traj.len() < order {
            return Err(Error::Contract(format!(
                "trajectory of length {} cannot supply order-{order} delay vectors",
                traj.len()
            )));
        }
        let n = traj.state_dim();
        let mut rows = Vec::with_capacity((traj.len() - order + 1) * n * order);
        for k in order - 1..traj.len() {
            for x in &traj.states[k + 1 - order..=k] {
                rows.extend_from_slice(x);
            }
        }
        Ok(DelaySeries { dim: n * order, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

/// `steps` consecutive delay vectors for each of `batch` windows, step-major:
/// row `s·batch + b` is `ξ_{k_b + s}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub batch: usize,
    pub steps: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl WindowBatch {
    /// `picks` are `(series, first row)` pairs.
    pub fn gather(series: &[DelaySeries], picks: &[(usize, usize)], steps: usize) -> Self {
        let dim = series[0].dim;
        let batch = picks.len();
        let mut data = Vec::with_capacity(steps * batch * dim);
        for s in 0..steps {
            for &(i, k) in picks {
                data.extend_from_slice(series[i].row(k + s));
            }
        }
        WindowBatch {
            batch,
            steps,
            dim,
            data,
        }
    }

    pub fn step(&self, s: usize) -> &[f64] {
        let w = self.batch * self.dim;
        &self.data[s * w..(s + 1) * w]
    }

    /// The first `steps` steps as one contiguous block.
    fn head(&self, steps: usize) -> &[f64] {
        &self.data[..steps * self.batch * self.dim]
    }
}

fn diverged(what: &str) -> Error {
    Error::TrainingDivergence {
        phase: String::new(),
        epoch: 0,
        detail: format!("non-finite {what}"),
    }
}

/// Runs every auxiliary head on the `batch × m` latent block `z`, returning the
/// caches and the `batch × m` head-output block.
fn heads_forward(net: &KoopmanNet, z: &[f64], batch: usize) -> (Vec<MlpCache>, Vec<f64>) {
    let m = net.arch.latent_dim();
    let mut theta = vec![0.0; batch * m];
    let mut caches = Vec::with_capacity(net.aux.len());
    let mut col = 0;
    for head in &net.aux {
        let c = head.forward(&net.params, z, batch);
        let w = head.output_dim();
        for b in 0..batch {
            theta[b * m + col..b * m + col + w].copy_from_slice(&c.output()[b * w..(b + 1) * w]);
        }
        col += w;
        caches.push(c);
    }
    (caches, theta)
}

/// Pushes `gtheta` (batch × m) back through the heads; returns the gradient at
/// their shared input.
fn heads_backward(
    net: &KoopmanNet,
    caches: &[MlpCache],
    gtheta: &[f64],
    grads: &mut [f64],
) -> Vec<f64> {
    let m = net.arch.latent_dim();
    let batch = caches[0].batch;
    let mut gin = vec![0.0; batch * m];
    let mut col = 0;
    for (head, cache) in net.aux.iter().zip(caches) {
        let w = head.output_dim();
        let mut g = vec![0.0; batch * w];
        for b in 0..batch {
            g[b * w..(b + 1) * w].copy_from_slice(&gtheta[b * m + col..b * m + col + w]);
        }
        let gi = head.backward(&net.params, cache, &g, grads, true).unwrap();
        for (acc, v) in gin.iter_mut().zip(&gi) {
            *acc += v;
        }
        col += w;
    }
    gin
}

/// One latent step for every row of `z` under head outputs `theta`.
fn step_forward(net: &KoopmanNet, theta: &[f64], z: &[f64]) -> Vec<f64> {
    let m = net.arch.latent_dim();
    let p = net.arch.n_pairs;
    let dt = net.arch.dt;
    let mut out = vec![0.0; z.len()];
    for (row, (zr, th)) in out.chunks_exact_mut(m).zip(z.chunks_exact(m).zip(theta.chunks_exact(m))) {
        for k in 0..p {
            let rho = (th[2 * k] * dt).exp();
            let (s, c) = (th[2 * k + 1] * dt).sin_cos();
            let (a, b) = (zr[2 * k], zr[2 * k + 1]);
            row[2 * k] = rho * (c * a - s * b);
            row[2 * k + 1] = rho * (s * a + c * b);
        }
        for j in 2 * p..m {
            row[j] = (th[j] * dt).exp() * zr[j];
        }
    }
    out
}

/// Reverse of [`step_forward`]: given `g_next` at the output `next`, adds the
/// input gradient into `g_prev` and the head-output gradient into `g_theta`.
fn step_backward(
    net: &KoopmanNet,
    theta: &[f64],
    next: &[f64],
    g_next: &[f64],
    g_prev: &mut [f64],
    g_theta: &mut [f64],
) {
    let m = net.arch.latent_dim();
    let p = net.arch.n_pairs;
    let dt = net.arch.dt;
    for i in 0..next.len() / m {
        let o = i * m;
        for k in 0..p {
            let (ia, ib) = (o + 2 * k, o + 2 * k + 1);
            let rho = (theta[ia] * dt).exp();
            let (s, c) = (theta[ib] * dt).sin_cos();
            let (ga, gb) = (g_next[ia], g_next[ib]);
            let (a1, b1) = (next[ia], next[ib]);
            g_theta[ia] += dt * (ga * a1 + gb * b1);
            g_theta[ib] += dt * (-ga * b1 + gb * a1);
            g_prev[ia] += rho * (c * ga + s * gb);
            g_prev[ib] += rho * (-s * ga + c * gb);
        }
        for j in o + 2 * p..o + m {
            g_theta[j] += dt * g_next[j] * next[j];
            g_prev[j] += (theta[j] * dt).exp() * g_next[j];
        }
    }
}

fn add_into(acc: &mut [f64], v: &[f64], scale: f64) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += scale * b;
    }
}

/// Batch-mean loss terms; when `grads` is given, adds the gradient of
/// `terms.weighted(w)` with respect to every parameter.
///
/// Terms with zero weight are skipped and reported as 0.
pub fn objective(
    net: &KoopmanNet,
    wb: &WindowBatch,
    w: &LossWeights,
    h: Horizons,
    mut grads: Option<&mut [f64]>,
) -> Result<Terms> {
    let use_recon = w.recon > 0.0;
    let t_lin = if w.lin > 0.0 { h.t_lin } else { 0 };
    let t_fwd = if w.fwd > 0.0 { h.t_fwd } else { 0 };
    let horizon = t_lin.max(t_fwd);
    if wb.steps < horizon + 1 {
        return Err(Error::Contract(format!(
            "window batch has {} steps, horizon {horizon} needs {}",
            wb.steps,
            horizon + 1
        )));
    }
    if wb.dim != net.arch.input_dim() {
        return Err(Error::Contract(format!(
            "window dimension {} does not match network input {}",
            wb.dim,
            net.arch.input_dim()
        )));
    }
    let bsz = wb.batch;
    let m = net.arch.latent_dim();
    let n_in = wb.dim;
    let bf = bsz as f64;
    let frozen = net.arch.net.koopman_frozen_per_window;
    let mut terms = Terms::default();
    if !use_recon && horizon == 0 {
        return Ok(terms);
    }

    // encode every step that a loss looks at
    let enc_steps = if t_lin > 0 { t_lin + 1 } else { 1 };
    let enc = net.encoder.forward(&net.params, wb.head(enc_steps), enc_steps * bsz);
    let y = enc.output();
    if y.iter().any(|v| !v.is_finite()) {
        return Err(diverged("encoder output"));
    }
    let yblk = |s: usize| &y[s * bsz * m..(s + 1) * bsz * m];

    // propagate
    let mut z: Vec<Vec<f64>> = vec![yblk(0).to_vec()];
    let mut head_caches: Vec<Vec<MlpCache>> = Vec::new();
    let mut thetas: Vec<Vec<f64>> = Vec::new();
    for s in 1..=horizon {
        if !frozen || s == 1 {
            let (c, th) = heads_forward(net, &z[s - 1], bsz);
            if th.iter().any(|v| !v.is_finite()) {
                return Err(diverged("eigenvalue head output"));
            }
            head_caches.push(c);
            thetas.push(th);
        }
        let th = &thetas[if frozen { 0 } else { s - 1 }];
        let next = step_forward(net, th, &z[s - 1]);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(diverged("propagated latent state"));
        }
        z.push(next);
    }

    // decode the reconstruction input and the forward predictions together
    let mut dec_in = Vec::with_capacity((1 + t_fwd) * bsz * m);
    if use_recon {
        dec_in.extend_from_slice(yblk(0));
    }
    for zs in z.iter().take(t_fwd + 1).skip(1) {
        dec_in.extend_from_slice(zs);
    }
    let dec_rows = dec_in.len() / m;
    let dec = (dec_rows > 0).then(|| net.decoder.forward(&net.params, &dec_in, dec_rows));
    let mut g_dec = vec![0.0; dec_rows * n_in];
    if let Some(dec) = &dec {
        let out = dec.output();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(diverged("decoder output"));
        }
        let mut blk = 0;
        let w_blk = bsz * n_in;
        if use_recon {
            let target = wb.step(0);
            let pred = &out[..w_blk];
            let mut acc = 0.0;
            for i in 0..w_blk {
                let d = pred[i] - target[i];
                acc += d * d;
                g_dec[i] = w.recon * 2.0 / bf * d;
            }
            terms.recon = acc / bf;
            blk = 1;
        }
        let mut acc = 0.0;
        for s in 1..=t_fwd {
            let target = wb.step(s);
            let o = (blk + s - 1) * w_blk;
            for i in 0..w_blk {
                let d = out[o + i] - target[i];
                acc += d * d;
                g_dec[o + i] = w.fwd * 2.0 / (bf * t_fwd as f64) * d;
            }
        }
        if t_fwd > 0 {
            terms.fwd = acc / (bf * t_fwd as f64);
        }
    }

    let mut lin_acc = 0.0;
    for s in 1..=t_lin {
        let ys = yblk(s);
        for i in 0..bsz * m {
            let d = ys[i] - z[s][i];
            lin_acc += d * d;
        }
    }
    if t_lin > 0 {
        terms.lin = lin_acc / (bf * t_lin as f64);
    }

    let Some(grads) = grads.as_deref_mut() else {
        return Ok(terms);
    };

    // reverse pass
    let mut g_y = vec![0.0; enc_steps * bsz * m];
    let mut g_z: Vec<Vec<f64>> = (0..=horizon).map(|_| vec![0.0; bsz * m]).collect();
    if let Some(dec) = &dec {
        let g_in = net.decoder.backward(&net.params, dec, &g_dec, grads, true).unwrap();
        let w_blk = bsz * m;
        let mut blk = 0;
        if use_recon {
            add_into(&mut g_y[..w_blk], &g_in[..w_blk], 1.0);
            blk = 1;
        }
        for s in 1..=t_fwd {
            let o = (blk + s - 1) * w_blk;
            add_into(&mut g_z[s], &g_in[o..o + w_blk], 1.0);
        }
    }
    if t_lin > 0 {
        let c = w.lin * 2.0 / (bf * t_lin as f64);
        for s in 1..=t_lin {
            let o = s * bsz * m;
            for i in 0..bsz * m {
                let d = c * (y[o + i] - z[s][i]);
                g_y[o + i] += d;
                g_z[s][i] -= d;
            }
        }
    }
    let mut g_theta_frozen = vec![0.0; bsz * m];
    for s in (1..=horizon).rev() {
        let ti = if frozen { 0 } else { s - 1 };
        let mut g_theta = vec![0.0; bsz * m];
        let (lo, hi) = g_z.split_at_mut(s);
        step_backward(net, &thetas[ti], &z[s], &hi[0], &mut lo[s - 1], &mut g_theta);
        if frozen {
            add_into(&mut g_theta_frozen, &g_theta, 1.0);
        } else {
            let g_in = heads_backward(net, &head_caches[s - 1], &g_theta, grads);
            add_into(&mut g_z[s - 1], &g_in, 1.0);
        }
    }
    if frozen && horizon > 0 {
        let g_in = heads_backward(net, &head_caches[0], &g_theta_frozen, grads);
        add_into(&mut g_z[0], &g_in, 1.0);
    }
    add_into(&mut g_y[..bsz * m], &g_z[0], 1.0);
    net.encoder.backward(&net.params, &enc, &g_y, grads, false);
    Ok(terms)
}

/// Squared error between head outputs at the encoded `ξ_k` and fixed targets
/// (laid out like the latent vector), averaged over the batch. Gradients reach
/// only the heads.
pub fn pretrain_objective(
    net: &KoopmanNet,
    xi: &[f64],
    batch: usize,
    targets: &[f64],
    grads: Option<&mut [f64]>,
) -> Result<f64> {
    let m = net.arch.latent_dim();
    if targets.len() != m {
        return Err(Error::Contract(format!("expected {m} head targets, got {}", targets.len())));
    }
    let y = net.encoder.apply(&net.params, xi, batch);
    let (caches, theta) = heads_forward(net, &y, batch);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(diverged("eigenvalue head output"));
    }
    let bf = batch as f64;
    let mut loss = 0.0;
    let mut g = vec![0.0; batch * m];
    for (i, v) in theta.iter().enumerate() {
        let d = v - targets[i % m];
        loss += d * d;
        g[i] = 2.0 * d / bf;
    }
    if let Some(grads) = grads {
        heads_backward(net, &caches, &g, grads);
    }
    Ok(loss / bf)
}

/// Decoded one-step predictions `φ⁻¹(K(φ(ξ))·φ(ξ))` for `rows` stacked delay
/// vectors.
pub fn one_step(net: &KoopmanNet, xi: &[f64], rows: usize) -> Result<Vec<f64>> {
    if rows == 0 {
        return Ok(vec![]);
    }
    let y = net.encoder.apply(&net.params, xi, rows);
    let (_, theta) = heads_forward(net, &y, rows);
    let z = step_forward(net, &theta, &y);
    let out = net.decoder.apply(&net.params, &z, rows);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(diverged("one-step prediction"));
    }
    Ok(out)
}
