//! Autoencoder with state-dependent Koopman latent dynamics.
//!
//! The latent vector is laid out as `m_c / 2` rotation pairs followed by `m_r`
//! real coordinates. One auxiliary head per pair predicts `(μ, ω)`, one per real
//! coordinate predicts `μ`, and one step multiplies each pair by
//! `exp(μ·dt)·R(ω·dt)` and each real coordinate by `exp(μ·dt)`.

mod batch;
mod checkpoint;
mod mlp;
mod optim;

pub use batch::{
    objective, one_step, pretrain_objective, DelaySeries, Horizons, LossWeights, Terms, WindowBatch,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointMeta};
pub use mlp::{Mlp, MlpCache};
pub use optim::Adam;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Trajectory;
use crate::error::{Error, Result};
use crate::numcore::{expm, Matrix};
use crate::spectral::SpectralConfig;

/// Layer widths and propagation semantics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub aux_hidden: Vec<usize>,
    /// Evaluate the heads once per window instead of at every propagated state.
    pub koopman_frozen_per_window: bool,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: vec![80, 80],
            aux_hidden: vec![32, 32],
            koopman_frozen_per_window: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub order: usize,
    pub state_dim: usize,
    pub n_pairs: usize,
    pub n_reals: usize,
    pub dt: f64,
    pub net: NetConfig,
}

impl Architecture {
    pub fn from_spectral(spec: &SpectralConfig, net: NetConfig) -> Self {
        Architecture {
            order: spec.order_r,
            state_dim: spec.state_dim,
            n_pairs: spec.m_c / 2,
            n_reals: spec.m_r,
            dt: spec.dt,
            net,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.order * self.state_dim
    }

    pub fn latent_dim(&self) -> usize {
        2 * self.n_pairs + self.n_reals
    }

    pub fn n_heads(&self) -> usize {
        self.n_pairs + self.n_reals
    }

    fn validate(&self) -> Result<()> {
        if self.order == 0 || self.state_dim == 0 {
            return Err(Error::Config("order and state_dim must be positive".into()));
        }
        if self.latent_dim() == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("dt must be positive".into()));
        }
        if self.net.hidden.iter().chain(&self.net.aux_hidden).any(|&w| w == 0) {
            return Err(Error::Config("hidden widths must be positive".into()));
        }
        Ok(())
    }
}

/// Parameter blocks that phases freeze independently.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Aux,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanNet {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub decoder: Mlp,
    /// Pair heads first, then real heads.
    pub aux: Vec<Mlp>,
    pub params: Vec<f64>,
}

impl KoopmanNet {
    /// Layout only, all parameters zero.
    pub fn zeros(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let (n_in, m) = (arch.input_dim(), arch.latent_dim());
        let mut widths = vec![n_in];
        widths.extend(&arch.net.hidden);
        widths.push(m);
        let encoder = Mlp::new(widths.clone(), 0);
        widths.reverse();
        let decoder = Mlp::new(widths, encoder.range().end);
        let mut offset = decoder.range().end;
        let mut aux = Vec::with_capacity(arch.n_heads());
        for h in 0..arch.n_heads() {
            let out = if h < arch.n_pairs { 2 } else { 1 };
            let mut w = vec![m];
            w.extend(&arch.net.aux_hidden);
            w.push(out);
            let head = Mlp::new(w, offset);
            offset = head.range().end;
            aux.push(head);
        }
        Ok(KoopmanNet {
            arch,
            encoder,
            decoder,
            aux,
            params: vec![0.0; offset],
        })
    }

    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut net = KoopmanNet::zeros(arch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = std::mem::take(&mut net.params);
        net.encoder.init(&mut params, &mut rng);
        net.decoder.init(&mut params, &mut rng);
        for head in &net.aux {
            head.init(&mut params, &mut rng);
        }
        net.params = params;
        Ok(net)
    }

    pub fn from_spectral(spec: &SpectralConfig, cfg: NetConfig, seed: u64) -> Result<Self> {
        KoopmanNet::new(Architecture::from_spectral(spec, cfg), seed)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn group_range(&self, g: ParamGroup) -> std::ops::Range<usize> {
        match g {
            ParamGroup::Encoder => self.encoder.range(),
            ParamGroup::Decoder => self.decoder.range(),
            ParamGroup::Aux => self.decoder.range().end..self.params.len(),
        }
    }

    pub fn encode(&self, xi: &[f64]) -> Vec<f64> {
        self.encoder.eval_naive(&self.params, xi)
    }

    pub fn decode(&self, y: &[f64]) -> Vec<f64> {
        self.decoder.eval_naive(&self.params, y)
    }

    /// Head outputs at `y`, laid out like the latent vector: `(μ, ω)` per pair,
    /// then `μ` per real coordinate.
    pub fn eigen_params(&self, y: &[f64]) -> Vec<f64> {
        self.aux
            .iter()
            .flat_map(|h| h.eval_naive(&self.params, y))
            .collect()
    }

    /// One latent step under head outputs `theta`.
    fn step_with(&self, theta: &[f64], z: &[f64]) -> Vec<f64> {
        let dt = self.arch.dt;
        let p = self.arch.n_pairs;
        let mut out = z.to_vec();
        for k in 0..p {
            let r = crate::numcore::rotation_block(theta[2 * k] * dt, theta[2 * k + 1] * dt);
            let (a, b) = (z[2 * k], z[2 * k + 1]);
            out[2 * k] = r[0][0] * a + r[0][1] * b;
            out[2 * k + 1] = r[1][0] * a + r[1][1] * b;
        }
        for j in 2 * p..z.len() {
            out[j] = (theta[j] * dt).exp() * z[j];
        }
        out
    }

    /// Latent states `z_1..z_t` reached from `y0`, per the configured semantics.
    pub fn propagate(&self, y0: &[f64], t: usize) -> Vec<Vec<f64>> {
        let frozen = self.eigen_params(y0);
        let mut out = Vec::with_capacity(t);
        let mut z = y0.to_vec();
        for _ in 0..t {
            let theta = if self.arch.net.koopman_frozen_per_window {
                frozen.clone()
            } else {
                self.eigen_params(&z)
            };
            z = self.step_with(&theta, &z);
            out.push(z.clone());
        }
        out
    }
}

/// `ξ_k = [x_{k−r+1}; …; x_k]`.
pub fn delay_stack(traj: &Trajectory, k: usize, r: usize) -> Result<Vec<f64>> {
    if r == 0 || k + 1 < r || k >= traj.len() {
        return Err(Error::Contract(format!(
            "delay_stack needs r-1 <= k < len (r={r}, k={k}, len={})",
            traj.len()
        )));
    }
    Ok(traj.states[k + 1 - r..=k].concat())
}

/// Koopman matrix at latent state `y`: the exponential of the block-diagonal
/// generator built from the head outputs.
pub fn assemble_koopman(net: &KoopmanNet, y: &[f64]) -> Result<Matrix> {
    let theta = net.eigen_params(y);
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::TrainingDivergence {
            phase: "assemble".into(),
            epoch: 0,
            detail: format!("non-finite eigenvalue head output {theta:?}"),
        });
    }
    let dt = net.arch.dt;
    let m = net.arch.latent_dim();
    let p = net.arch.n_pairs;
    let mut gen = Matrix::zeros(m, m);
    for k in 0..p {
        let (mu, om) = (theta[2 * k] * dt, theta[2 * k + 1] * dt);
        gen[(2 * k, 2 * k)] = mu;
        gen[(2 * k, 2 * k + 1)] = -om;
        gen[(2 * k + 1, 2 * k)] = om;
        gen[(2 * k + 1, 2 * k + 1)] = mu;
    }
    for j in 2 * p..m {
        gen[(j, j)] = theta[j] * dt;
    }
    Ok(expm(&gen))
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `‖ξ − φ⁻¹(φ(ξ))‖²`
pub fn loss_reconstruct(net: &KoopmanNet, xi: &[f64]) -> f64 {
    sq_dist(xi, &net.decode(&net.encode(xi)))
}

/// `‖φ(ξ_{k+t}) − K_t·φ(ξ_k)‖²` for `window = [ξ_k, …, ξ_{k+t}]`.
pub fn loss_linearity(net: &KoopmanNet, window: &[Vec<f64>], t: usize) -> f64 {
    if t == 0 {
        return 0.0;
    }
    let y0 = net.encode(&window[0]);
    let z = net.propagate(&y0, t);
    sq_dist(&net.encode(&window[t]), &z[t - 1])
}

/// `‖ξ_{k+t} − φ⁻¹(K_t·φ(ξ_k))‖²`
pub fn loss_forward(net: &KoopmanNet, window: &[Vec<f64>], t: usize) -> f64 {
    let y0 = net.encode(&window[0]);
    let zt = if t == 0 {
        y0
    } else {
        net.propagate(&y0, t).pop().unwrap()
    };
    sq_dist(&window[t], &net.decode(&zt))
}

/// Training objective for one window, written with the per-sample losses:
/// reconstruction of `ξ_k` plus linearity and forward losses averaged over
/// horizons `1..=t`.
pub fn objective_naive(net: &KoopmanNet, window: &[Vec<f64>], w: &LossWeights, h: Horizons) -> Terms {
    let mean_over = |t: usize, f: &dyn Fn(usize) -> f64| {
        if t == 0 {
            0.0
        } else {
            (1..=t).map(f).sum::<f64>() / t as f64
        }
    };
    Terms {
        recon: if w.recon > 0.0 { loss_reconstruct(net, &window[0]) } else { 0.0 },
        lin: if w.lin > 0.0 {
            mean_over(h.t_lin, &|s| loss_linearity(net, window, s))
        } else {
            0.0
        },
        fwd: if w.fwd > 0.0 {
            mean_over(h.t_fwd, &|s| loss_forward(net, window, s))
        } else {
            0.0
        },
    }
}
