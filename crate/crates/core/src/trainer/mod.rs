//! Staged training, evaluation metrics and the two sweep drivers.

mod eval;
mod record;
mod sweep;

pub use eval::{eval_one_step_mse, eval_one_step_mse_raw, eval_trajectory_l2};
pub use record::{write_l2_csv, write_metrics_csv, EpochRow, ExperimentRecord, PhaseTime, METRICS_HEADER};
pub use sweep::{
    eig_sweep_configs, sweep_eigs, sweep_order, write_curves_csv, write_eig_sweep_csv,
    write_order_sweep_csv, EigSweepRow, OrderSweepRow, EIG_SWEEP_HEADER, ORDER_SWEEP_HEADER,
};

use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{Dataset, SystemKind, Trajectory};
use crate::error::{Error, Result};
use crate::koopnet::{
    objective, pretrain_objective, Adam, DelaySeries, Horizons, KoopmanNet, LossWeights, NetConfig,
    ParamGroup, Terms, WindowBatch,
};
use crate::spectral::SpectralConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Baseline: manual spectral configuration, no extraction, no pretraining.
    Lusch,
    /// Extracted dimensions and order, heads trained from scratch.
    NoPretrain,
    /// Extracted dimensions and order, heads first fitted to the extracted eigenvalues.
    WithPretrain,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Lusch => "lusch",
            Mode::NoPretrain => "no-pretrain",
            Mode::WithPretrain => "with-pretrain",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Mode::Lusch, Mode::NoPretrain, Mode::WithPretrain]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::Config(format!("unknown mode '{s}'; expected lusch, no-pretrain or with-pretrain"))
            })
    }
}

/// Baseline `(m_r, m_c)` per system, all at order 1.
pub fn lusch_config(kind: SystemKind) -> (usize, usize) {
    match kind {
        SystemKind::DiscreteSpectrum => (2, 0),
        SystemKind::FluidFlow => (0, 2),
        SystemKind::Pendulum => (0, 2),
        SystemKind::Lorenz => (2, 4),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhaseEpochs {
    pub recon: usize,
    pub pretrain: usize,
    pub frozen: usize,
    pub joint: usize,
}

impl Default for PhaseEpochs {
    fn default() -> Self {
        PhaseEpochs {
            recon: 100,
            pretrain: 100,
            frozen: 200,
            joint: 600,
        }
    }
}

impl PhaseEpochs {
    pub fn scaled(&self, num: usize, den: usize) -> PhaseEpochs {
        let f = |e: usize| (e * num).div_ceil(den);
        PhaseEpochs {
            recon: f(self.recon),
            pretrain: f(self.pretrain),
            frozen: f(self.frozen),
            joint: f(self.joint),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: PhaseEpochs,
    pub batch_size: usize,
    /// Mini-batches per epoch; `None` makes each epoch one pass over every window.
    pub batches_per_epoch: Option<usize>,
    pub lr: f64,
    /// Each phase anneals the learning rate from `lr` to `lr · lr_final_frac`
    /// along a half cosine.
    pub lr_final_frac: f64,
    pub weights: LossWeights,
    pub horizons: Horizons,
    pub seed: u64,
    pub net: NetConfig,
    pub order: Option<usize>,
    pub m_r: Option<usize>,
    pub m_c: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::WithPretrain,
            epochs: PhaseEpochs::default(),
            batch_size: 128,
            batches_per_epoch: None,
            lr: 1e-3,
            lr_final_frac: 0.01,
            weights: LossWeights::default(),
            horizons: Horizons::default(),
            seed: 0,
            net: NetConfig::default(),
            order: None,
            m_r: None,
            m_c: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batches_per_epoch == Some(0) {
            return Err(Error::Config("batch_size and batches_per_epoch must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.lr_final_frac) {
            return Err(Error::Config("lr_final_frac must lie in [0, 1]".into()));
        }
        let w = self.weights;
        if [w.recon, w.lin, w.fwd].iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if self.horizons.t_lin == 0 || self.horizons.t_fwd == 0 {
            return Err(Error::Config("t_lin and t_fwd must be at least 1".into()));
        }
        if self.order == Some(0) {
            return Err(Error::Config("order must be at least 1".into()));
        }
        if self.m_c.is_some_and(|c| c % 2 != 0) {
            return Err(Error::Config("m_c must be even".into()));
        }
        Ok(())
    }
}

/// The spectral configuration a run actually trains with, after applying the
/// mode rules and manual overrides.
pub fn resolve_spectral(
    cfg: &TrainConfig,
    spectral: Option<&SpectralConfig>,
    kind: SystemKind,
    dt: f64,
) -> Result<SpectralConfig> {
    let n = kind.state_dim();
    match cfg.mode {
        Mode::Lusch => {
            let (dr, dc) = lusch_config(kind);
            SpectralConfig::manual(cfg.order.unwrap_or(1), cfg.m_r.unwrap_or(dr), cfg.m_c.unwrap_or(dc), n, dt)
        }
        Mode::NoPretrain | Mode::WithPretrain => {
            let s = spectral.ok_or_else(|| {
                Error::Config(format!("mode {} needs an extracted spectral configuration", cfg.mode))
            })?;
            s.validate()?;
            if s.state_dim != n {
                return Err(Error::Config(format!(
                    "spectral configuration is for state dimension {}, dataset has {n}",
                    s.state_dim
                )));
            }
            for (name, over, got) in [("order", cfg.order, s.order_r), ("m_r", cfg.m_r, s.m_r), ("m_c", cfg.m_c, s.m_c)] {
                if over.is_some_and(|v| v != got) {
                    return Err(Error::Config(format!(
                        "{name} override {} disagrees with the spectral configuration ({got})",
                        over.unwrap()
                    )));
                }
            }
            if cfg.mode == Mode::WithPretrain {
                if !s.has_targets() {
                    return Err(Error::Config("pretraining needs target eigenvalues".into()));
                }
                Ok(s.clone())
            } else {
                SpectralConfig::manual(s.order_r, s.m_r, s.m_c, n, dt)
            }
        }
    }
}

/// Head targets laid out like the latent vector.
fn pretrain_targets(spec: &SpectralConfig) -> Vec<f64> {
    let (pairs, reals) = spec.continuous_targets();
    let mut t: Vec<f64> = pairs.iter().flat_map(|&(mu, om)| [mu, om]).collect();
    t.extend(reals);
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Recon,
    Pretrain,
    Frozen,
    Joint,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Recon => "recon",
            Phase::Pretrain => "pretrain",
            Phase::Frozen => "frozen",
            Phase::Joint => "joint",
        }
    }

    fn trainable(self, net: &KoopmanNet) -> Vec<Range<usize>> {
        let g = |p| net.group_range(p);
        match self {
            Phase::Recon | Phase::Frozen => vec![g(ParamGroup::Encoder), g(ParamGroup::Decoder)],
            Phase::Pretrain => vec![g(ParamGroup::Aux)],
            Phase::Joint => vec![0..net.num_params()],
        }
    }
}

/// Phase list with epoch counts for a mode. The baseline and the no-pretrain
/// model run the same schedule, so they coincide when their dimensions do.
pub fn schedule(cfg: &TrainConfig) -> Vec<(Phase, usize)> {
    let e = cfg.epochs;
    match cfg.mode {
        Mode::WithPretrain => vec![
            (Phase::Recon, e.recon),
            (Phase::Pretrain, e.pretrain),
            (Phase::Frozen, e.frozen),
            (Phase::Joint, e.joint),
        ],
        Mode::Lusch | Mode::NoPretrain => vec![(Phase::Recon, e.recon), (Phase::Joint, e.frozen + e.joint)],
    }
}

/// Emitted after every epoch.
pub struct EpochEvent<'a> {
    pub net: &'a KoopmanNet,
    pub row: &'a EpochRow,
    pub phase_done: bool,
}

/// A training run in progress. `net` always holds the last parameters whose
/// epoch completed with finite losses.
pub struct Session<'a> {
    pub net: KoopmanNet,
    pub record: ExperimentRecord,
    pub spectral: SpectralConfig,
    cfg: TrainConfig,
    series: Vec<DelaySeries>,
    test: &'a [Trajectory],
    targets: Vec<f64>,
}

impl<'a> Session<'a> {
    /// Builds the network for the resolved configuration. `train` and `test`
    /// are normalized trajectories.
    pub fn new(
        train: &[Trajectory],
        test: &'a [Trajectory],
        cfg: &TrainConfig,
        spectral: SpectralConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let net = KoopmanNet::from_spectral(&spectral, cfg.net.clone(), cfg.seed)?;
        Session::with_net(net, train, test, cfg, spectral)
    }

    pub fn with_net(
        net: KoopmanNet,
        train: &[Trajectory],
        test: &'a [Trajectory],
        cfg: &TrainConfig,
        spectral: SpectralConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let a = &net.arch;
        if a.order != spectral.order_r || a.n_pairs * 2 != spectral.m_c || a.n_reals != spectral.m_r {
            return Err(Error::Config("network dimensions disagree with the spectral configuration".into()));
        }
        let series = train
            .iter()
            .map(|t| DelaySeries::new(t, a.order))
            .collect::<Result<Vec<_>>>()?;
        let targets = if cfg.mode == Mode::WithPretrain { pretrain_targets(&spectral) } else { vec![] };
        Ok(Session {
            net,
            record: ExperimentRecord::new(cfg.mode, cfg.seed),
            spectral,
            cfg: cfg.clone(),
            series,
            test,
            targets,
        })
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_with(|_| Ok(()))
    }

    /// Runs every phase, calling `hook` after each epoch. On divergence the
    /// error carries phase and epoch, and `self.net` is the last good state.
    pub fn run_with(&mut self, mut hook: impl FnMut(&EpochEvent) -> Result<()>) -> Result<()> {
        let h = self.cfg.horizons;
        let span = h.t_lin.max(h.t_fwd) + 1;
        let starts: Vec<(usize, usize)> = self
            .series
            .iter()
            .enumerate()
            .flat_map(|(i, s)| (0..s.len().saturating_sub(span - 1)).map(move |k| (i, k)))
            .collect();
        if starts.is_empty() {
            return Err(Error::Config(format!(
                "training trajectories are too short for order {} with horizon {}",
                self.net.arch.order,
                span - 1
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(1);
        let mut epoch = self.record.rows.last().map_or(0, |r| r.epoch);
        for (phase, n_epochs) in schedule(&self.cfg) {
            if n_epochs == 0 {
                continue;
            }
            let t0 = Instant::now();
            let mut opt = Adam::new(self.net.num_params(), self.cfg.lr);
            let trainable = phase.trainable(&self.net);
            let mut order = starts.clone();
            let per_epoch = self.batches_per_epoch(order.len());
            let mut sched = CosineLr {
                lr: self.cfg.lr,
                final_lr: self.cfg.lr * self.cfg.lr_final_frac,
                total: per_epoch * n_epochs,
                done: 0,
            };
            for e in 0..n_epochs {
                epoch += 1;
                order.shuffle(&mut rng);
                let row = self
                    .epoch(phase, epoch, &order, span, &mut opt, &mut sched, &trainable)
                    .map_err(|err| with_context(err, phase, epoch))?;
                self.record.rows.push(row);
                hook(&EpochEvent {
                    net: &self.net,
                    row: self.record.rows.last().unwrap(),
                    phase_done: e + 1 == n_epochs,
                })?;
            }
            self.record.phase_times.push(PhaseTime {
                phase: phase.name().into(),
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
        Ok(())
    }

    fn epoch(
        &mut self,
        phase: Phase,
        epoch: usize,
        order: &[(usize, usize)],
        span: usize,
        opt: &mut Adam,
        sched: &mut CosineLr,
        trainable: &[Range<usize>],
    ) -> Result<EpochRow> {
        let b = self.cfg.batch_size.min(order.len());
        let n_batches = self.batches_per_epoch(order.len());
        let weights = match phase {
            Phase::Recon => self.cfg.weights.recon_only(),
            _ => self.cfg.weights,
        };
        let steps = if phase == Phase::Recon || phase == Phase::Pretrain { 1 } else { span };
        let good = self.net.params.clone();
        let mut grads = vec![0.0; good.len()];
        let mut sum = Terms::default();
        let mut pre = 0.0;
        let result = (|| {
            for picks in order.chunks_exact(b).take(n_batches) {
                grads.iter_mut().for_each(|g| *g = 0.0);
                let wb = WindowBatch::gather(&self.series, picks, steps);
                if phase == Phase::Pretrain {
                    pre += pretrain_objective(&self.net, wb.step(0), b, &self.targets, Some(&mut grads))?;
                } else {
                    let t = objective(&self.net, &wb, &weights, self.cfg.horizons, Some(&mut grads))?;
                    sum.recon += t.recon;
                    sum.lin += t.lin;
                    sum.fwd += t.fwd;
                }
                opt.lr = sched.next_lr();
                opt.step(&mut self.net.params, &grads, trainable);
            }
            if self.net.params.iter().any(|p| !p.is_finite()) {
                return Err(Error::TrainingDivergence {
                    phase: String::new(),
                    epoch: 0,
                    detail: "non-finite parameter after update".into(),
                });
            }
            eval_one_step_mse(&self.net, self.test)
        })();
        let test_mse = match result {
            Ok(v) => v,
            Err(e) => {
                self.net.params = good;
                return Err(e);
            }
        };
        let nb = n_batches as f64;
        let row = if phase == Phase::Pretrain {
            EpochRow {
                epoch,
                phase: phase.name().into(),
                loss_recon: None,
                loss_lin: None,
                loss_fwd: None,
                loss_pretrain: Some(pre / nb),
                test_mse,
            }
        } else {
            let on = |w: f64, v: f64| (w > 0.0).then_some(v / nb);
            EpochRow {
                epoch,
                phase: phase.name().into(),
                loss_recon: on(weights.recon, sum.recon),
                loss_lin: on(weights.lin, sum.lin),
                loss_fwd: on(weights.fwd, sum.fwd),
                loss_pretrain: None,
                test_mse,
            }
        };
        Ok(row)
    }

    fn batches_per_epoch(&self, windows: usize) -> usize {
        let b = self.cfg.batch_size.min(windows);
        let n = windows / b;
        self.cfg.batches_per_epoch.map_or(n, |cap| n.min(cap))
    }

    /// Fills the final metrics; `raw_test` are the unnormalized test trajectories.
    pub fn finish(&mut self, data: &Dataset) -> Result<()> {
        self.record.final_test_mse = eval_one_step_mse(&self.net, self.test)?;
        self.record.final_test_mse_raw = eval_one_step_mse_raw(&self.net, &data.test, &data.normalization)?;
        self.record.l2_curve = match self.test.first() {
            Some(t) => eval_trajectory_l2(&self.net, t)?,
            None => vec![],
        };
        self.record.spectral = Some(self.spectral.clone());
        Ok(())
    }
}

struct CosineLr {
    lr: f64,
    final_lr: f64,
    total: usize,
    done: usize,
}

impl CosineLr {
    fn next_lr(&mut self) -> f64 {
        let t = self.done as f64 / self.total.max(1) as f64;
        self.done += 1;
        self.final_lr + 0.5 * (self.lr - self.final_lr) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

fn with_context(err: Error, phase: Phase, epoch: usize) -> Error {
    match err {
        Error::TrainingDivergence { detail, .. } => Error::TrainingDivergence {
            phase: phase.name().into(),
            epoch,
            detail,
        },
        e => e,
    }
}

/// Resolves the configuration, trains on `data` and evaluates the result.
pub fn train(
    data: &Dataset,
    cfg: &TrainConfig,
    spectral: Option<&SpectralConfig>,
) -> Result<(KoopmanNet, ExperimentRecord)> {
    let spec = resolve_spectral(cfg, spectral, data.spec.kind(), data.spec.dt)?;
    let train = data.train_normalized();
    let test = data.test_normalized();
    let mut s = Session::new(&train, &test, cfg, spec)?;
    s.run()?;
    s.finish(data)?;
    Ok((s.net, s.record))
}

#[cfg(test)]
mod tests;
