//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Training criteria run at the smoke budget (1/20 of every phase) unless
//! `KOOPMAN_ACCEPTANCE_FULL=1` is set. `KOOPMAN_ACCEPTANCE=spectral-configs,property`
//! restricts the run to a comma-separated subset of
//! `spectral-configs, ordering, order-sweep, eig-sweep, property`.

use std::collections::HashMap;
use std::process::ExitCode;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use koopman_core::dynamics::{generate_dataset, integrate, Dataset, SystemKind, SystemSpec, Trajectory};
use koopman_core::koopnet::{
    assemble_koopman, objective, Architecture, DelaySeries, Horizons, KoopmanNet, LossWeights, NetConfig,
    WindowBatch,
};
use koopman_core::numcore::{eig, eigenvalues, svd, Matrix};
use koopman_core::spectral::{
    build_hankel_multi, denoise_lowrank, extract_dataset, havok_koopman, SpectralConfig, SpectralOptions,
};
use koopman_core::trainer::{eig_sweep_configs, lusch_config, train, Mode, PhaseEpochs, TrainConfig};

const DATA_SEED: u64 = 1;
const SEEDS: [u64; 3] = [0, 1, 2];
const SMOKE_DEN: usize = 20;

// pinned thresholds
const EXTRACT_SECONDS: f64 = 300.0;
const ABS_FACTOR: f64 = 10.0;
const ORDER_GAIN: f64 = 3.0;
const EIG_SWEEP_SIZE: usize = 15;
const EIG_SWEEP_MAX_DIM: usize = 3;
const PROPERTY_SECONDS: f64 = 120.0;
const GRAD_REL: f64 = 1e-5;
const FACTOR_RESID: f64 = 1e-8;
const HAVOK_EIG_TOL: f64 = 1e-6;
const ASSEMBLY_TOL: f64 = 1e-10;
const CLOSED_FORM_TOL: f64 = 1e-6;

// reference values reported next to the measured ones
const REF_FF: [(Mode, f64); 3] = [(Mode::WithPretrain, 6.14e-6), (Mode::NoPretrain, 3.11e-5), (Mode::Lusch, 6.9e-4)];
const REF_LORENZ_WP: f64 = 5.35e-5;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failed += 1;
        }
        println!("{} [{name}] {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn fmt_all(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")
}

/// Lusch and NoPretrain share a schedule, so plain runs are keyed by dims only.
#[derive(Clone, PartialEq, Eq, Hash)]
struct RunKey {
    system: SystemKind,
    pretrained: bool,
    order: usize,
    m_r: usize,
    m_c: usize,
    seed: u64,
    full: bool,
    /// Pretraining targets, so forced-order extractions never alias.
    targets: String,
}

struct Lab {
    data: HashMap<SystemKind, Dataset>,
    extracted: HashMap<(SystemKind, Option<usize>), SpectralConfig>,
    runs: HashMap<RunKey, f64>,
    full: bool,
}

impl Lab {
    fn new(full: bool) -> Self {
        Lab {
            data: HashMap::new(),
            extracted: HashMap::new(),
            runs: HashMap::new(),
            full,
        }
    }

    fn budget(&self, full: bool) -> PhaseEpochs {
        let e = PhaseEpochs::default();
        if full {
            e
        } else {
            e.scaled(1, SMOKE_DEN)
        }
    }

    fn data(&mut self, kind: SystemKind) -> Dataset {
        self.data
            .entry(kind)
            .or_insert_with(|| generate_dataset(&SystemSpec::standard(kind), 100, 20, 250, DATA_SEED).expect("dataset"))
            .clone()
    }

    fn spectral(&mut self, kind: SystemKind, order: Option<usize>) -> SpectralConfig {
        if let Some(c) = self.extracted.get(&(kind, order)) {
            return c.clone();
        }
        let data = self.data(kind);
        let opts = SpectralOptions {
            forced_order: order,
            ..SpectralOptions::default()
        };
        let c = extract_dataset(&data, &opts).expect("extraction").config;
        self.extracted.insert((kind, order), c.clone());
        c
    }

    /// Final normalized test MSE; divergence counts as infinite error.
    fn run(&mut self, kind: SystemKind, mode: Mode, dims: Option<(usize, usize, usize)>, seed: u64, full: bool) -> f64 {
        let forced = if mode == Mode::WithPretrain { dims.map(|d| d.0) } else { None };
        let spec = self.spectral(kind, forced);
        let (order, m_r, m_c) = match (mode, dims) {
            (Mode::WithPretrain, _) => (spec.order_r, spec.m_r, spec.m_c),
            (Mode::NoPretrain, _) => (spec.order_r, spec.m_r, spec.m_c),
            (Mode::Lusch, Some(d)) => d,
            (Mode::Lusch, None) => {
                let (r, c) = lusch_config(kind);
                (1, r, c)
            }
        };
        let key = RunKey {
            system: kind,
            pretrained: mode == Mode::WithPretrain,
            order,
            m_r,
            m_c,
            seed,
            full,
            targets: if mode == Mode::WithPretrain { format!("{:?}", spec.target_eigs) } else { String::new() },
        };
        if let Some(&v) = self.runs.get(&key) {
            return v;
        }
        let cfg = TrainConfig {
            mode,
            seed,
            epochs: self.budget(full),
            order: (mode == Mode::Lusch).then_some(order),
            m_r: (mode == Mode::Lusch).then_some(m_r),
            m_c: (mode == Mode::Lusch).then_some(m_c),
            ..TrainConfig::default()
        };
        let data = self.data(kind);
        let t = Instant::now();
        let mse = match train(&data, &cfg, Some(&spec)) {
            Ok((_, rec)) => rec.final_test_mse,
            Err(e) => {
                eprintln!("  {kind} {mode} ({order},{m_r},{m_c}) seed {seed}: {e}");
                f64::INFINITY
            }
        };
        eprintln!(
            "  {kind} {mode} order {order} ({m_r},{m_c}) seed {seed}: {mse:.3e} in {:.0}s",
            t.elapsed().as_secs_f64()
        );
        self.runs.insert(key, mse);
        mse
    }

    fn seeds(&mut self, kind: SystemKind, mode: Mode, dims: Option<(usize, usize, usize)>, full: bool) -> Vec<f64> {
        SEEDS.iter().map(|&s| self.run(kind, mode, dims, s, full)).collect()
    }
}

fn spectral_configs(lab: &mut Lab, rep: &mut Report) {
    let t = Instant::now();
    let mut ok = true;
    let mut parts = vec![];
    for kind in [
        SystemKind::DiscreteSpectrum,
        SystemKind::FluidFlow,
        SystemKind::Pendulum,
        SystemKind::Lorenz,
    ] {
        let c = lab.spectral(kind, None);
        let got = (c.m_r, c.m_c, c.order_r);
        let hit = match kind {
            SystemKind::DiscreteSpectrum => got == (2, 0, 1),
            SystemKind::FluidFlow => got == (1, 2, 1),
            SystemKind::Pendulum => got == (0, 2, 1),
            // (2,4,2) up to one conjugate pair either way in the spectrum
            SystemKind::Lorenz => {
                c.order_r == 2 && c.m_c >= 2 && c.m_c.abs_diff(4) <= 2 && (c.m_r + c.m_c).abs_diff(6) <= 2
            }
        };
        ok &= hit;
        parts.push(format!("{kind} {got:?}"));
    }
    let secs = t.elapsed().as_secs_f64();
    rep.line(
        "spectral-configs",
        ok && secs < EXTRACT_SECONDS,
        format!("{} in {secs:.1}s (limit {EXTRACT_SECONDS}s)", parts.join(", ")),
    );
}

fn ordering(lab: &mut Lab, rep: &mut Report) {
    let full = lab.full;
    let budget = if full { "full" } else { "smoke" };
    let ff = SystemKind::FluidFlow;
    let mut med = HashMap::new();
    let mut detail = vec![];
    for (mode, reference) in REF_FF {
        let v = lab.seeds(ff, mode, None, full);
        let m = median(v.clone());
        let within = m <= reference * ABS_FACTOR && m >= reference / ABS_FACTOR;
        detail.push(format!(
            "{mode} median {m:.3e} [{}] ref {reference:.2e}{}",
            fmt_all(&v),
            if within { "" } else { " (outside x10)" }
        ));
        med.insert(mode, m);
    }
    let ok = med[&Mode::WithPretrain] < med[&Mode::NoPretrain] && med[&Mode::NoPretrain] < med[&Mode::Lusch];
    rep.line(
        "ff-ordering",
        ok,
        format!("{budget} budget, WP < NP < L: {}", detail.join("; ")),
    );

    let lz = SystemKind::Lorenz;
    let wp = lab.seeds(lz, Mode::WithPretrain, None, full);
    let wp_med = median(wp.clone());
    let mut best = (f64::INFINITY, (0, 0));
    for (m_r, m_c) in eig_sweep_configs() {
        let v = lab.run(lz, Mode::Lusch, Some((1, m_r, m_c)), SEEDS[0], full);
        if v < best.0 {
            best = (v, (m_r, m_c));
        }
    }
    rep.line(
        "lorenz-vs-sweep",
        wp_med < best.0,
        format!(
            "{budget} budget, with-pretrain median {wp_med:.3e} [{}] ref {REF_LORENZ_WP:.2e} vs order-1 sweep best {:.3e} at {:?}",
            fmt_all(&wp),
            best.0,
            best.1
        ),
    );
}

fn order_sweep(lab: &mut Lab, rep: &mut Report) {
    let full = lab.full;
    let lz = SystemKind::Lorenz;
    let mut med = vec![];
    for order in [1, 2] {
        let c = lab.spectral(lz, Some(order));
        let v = lab.seeds(lz, Mode::WithPretrain, Some((order, c.m_r, c.m_c)), full);
        med.push((median(v.clone()), v, (c.m_r, c.m_c)));
    }
    let ratio = med[0].0 / med[1].0;
    rep.line(
        "order-sweep",
        ratio >= ORDER_GAIN,
        format!(
            "{} budget, order 1 {:?} median {:.3e} [{}], order 2 {:?} median {:.3e} [{}], ratio {ratio:.2} (need >= {ORDER_GAIN})",
            if full { "full" } else { "smoke" },
            med[0].2,
            med[0].0,
            fmt_all(&med[0].1),
            med[1].2,
            med[1].0,
            fmt_all(&med[1].1)
        ),
    );
}

fn eig_sweep(lab: &mut Lab, rep: &mut Report) {
    let configs = eig_sweep_configs();
    let ff = SystemKind::FluidFlow;
    let sdp = lab.spectral(ff, None);
    let sdp_dims = (sdp.m_r, sdp.m_c);
    let mut rows = vec![];
    for &(m_r, m_c) in configs.iter().filter(|(r, c)| r + c <= EIG_SWEEP_MAX_DIM) {
        let v = lab.seeds(ff, Mode::Lusch, Some((sdp.order_r, m_r, m_c)), false);
        rows.push(((m_r, m_c), median(v)));
    }
    let best = rows.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap().0;
    let table = rows
        .iter()
        .map(|((r, c), m)| format!("({r},{c}) {m:.3e}"))
        .collect::<Vec<_>>()
        .join(", ");
    let has_sdp = rows.iter().any(|r| r.0 == sdp_dims);
    rep.line(
        "eig-sweep",
        configs.len() == EIG_SWEEP_SIZE && has_sdp && best == sdp_dims,
        format!(
            "{} configs (need {EIG_SWEEP_SIZE}); smoke budget medians over {} seeds, dim <= {EIG_SWEEP_MAX_DIM}: {table}; spectral config {sdp_dims:?}, best {best:?}",
            configs.len(),
            SEEDS.len()
        ),
    );
}

// ---- property suite ----

fn gradient_rel_error(seed: u64, frozen: bool) -> f64 {
    let arch = Architecture {
        order: 2,
        state_dim: 2,
        n_pairs: 1,
        n_reals: 1,
        dt: 0.1,
        net: NetConfig {
            hidden: vec![9, 8],
            aux_hidden: vec![5],
            koopman_frozen_per_window: frozen,
        },
    };
    let mut net = KoopmanNet::new(arch, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in net.params.iter_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let series: Vec<DelaySeries> = (0..2)
        .map(|_| DelaySeries {
            dim: 4,
            rows: (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let wb = WindowBatch::gather(&series, &[(0, 0), (1, 2), (0, 4)], 5);
    let w = LossWeights {
        recon: 1.0,
        lin: 0.6,
        fwd: 1.4,
    };
    let h = Horizons { t_lin: 4, t_fwd: 3 };
    let mut g = vec![0.0; net.num_params()];
    objective(&net, &wb, &w, h, Some(&mut g)).unwrap();
    let eps = 1e-6;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for i in 0..net.num_params() {
        let p0 = net.params[i];
        net.params[i] = p0 + eps;
        let up = objective(&net, &wb, &w, h, None).unwrap().weighted(&w);
        net.params[i] = p0 - eps;
        let dn = objective(&net, &wb, &w, h, None).unwrap().weighted(&w);
        net.params[i] = p0;
        let fd = (up - dn) / (2.0 * eps);
        num += (fd - g[i]).powi(2);
        den += (fd.abs() + g[i].abs()).powi(2);
    }
    (num / den).sqrt()
}

fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn factor_residuals() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for (r, c) in [(6, 6), (12, 5), (5, 12), (30, 9)] {
        let a = random_matrix(r, c, &mut rng);
        let f = svd(&a).unwrap();
        let k = r.min(c);
        worst = worst.max(f.reconstruct().sub(&a).max_abs());
        worst = worst.max(f.u.transpose().matmul(&f.u).sub(&Matrix::identity(k)).max_abs());
        worst = worst.max(f.v.transpose().matmul(&f.v).sub(&Matrix::identity(k)).max_abs());
    }
    for n in [2, 5, 8] {
        let a = random_matrix(n, n, &mut rng);
        let e = eig(&a).unwrap();
        for (lam, v) in e.values.iter().zip(&e.vectors) {
            for i in 0..n {
                let av: Complex64 = (0..n).map(|j| v[j] * a[(i, j)]).sum();
                worst = worst.max((av - lam * v[i]).norm());
            }
        }
    }
    worst
}

fn traj(states: Vec<Vec<f64>>, dt: f64) -> Trajectory {
    Trajectory {
        states,
        dt,
        system: SystemKind::DiscreteSpectrum,
    }
}

fn havok_recovery() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for d in 1..=5 {
        for _ in 0..4 {
            let a = random_matrix(d, d, &mut rng);
            let rho = eigenvalues(&a).unwrap().iter().fold(0.0f64, |m, z| m.max(z.norm()));
            let a = a.scale(0.95 / rho.max(1e-3));
            let trajs: Vec<Trajectory> = (0..3)
                .map(|_| {
                    let mut x: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                    let mut states = vec![];
                    for _ in 0..12 {
                        states.push(x.clone());
                        x = a.matvec(&x);
                    }
                    traj(states, 0.1)
                })
                .collect();
            let h = build_hankel_multi(&trajs, 1, 12).unwrap();
            let got = havok_koopman(&h, d).unwrap().eigs;
            let mut truth = eigenvalues(&a).unwrap();
            for z in got {
                let (j, dist) = truth
                    .iter()
                    .enumerate()
                    .map(|(j, w)| (j, (z - w).norm()))
                    .min_by(|x, y| x.1.total_cmp(&y.1))
                    .unwrap();
                truth.remove(j);
                worst = worst.max(dist);
            }
        }
    }
    worst
}

fn hankel_structure() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let trajs: Vec<Trajectory> = (0..2)
        .map(|_| traj((0..30).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect(), 0.1))
        .collect();
    [(2, 0.1, 5), (4, 0.5, 20), (6, 2.0, 3)].iter().all(|&(r, lam, iters)| {
        let h = build_hankel_multi(&trajs, r, 30 - r + 1).unwrap();
        h.is_structured() && denoise_lowrank(&h, lam, iters).unwrap().is_structured()
    })
}

fn assembly_error() -> f64 {
    let dt = 0.1;
    let rotation = |omega: f64| {
        let arch = Architecture {
            order: 1,
            state_dim: 2,
            n_pairs: 1,
            n_reals: 0,
            dt,
            net: NetConfig {
                hidden: vec![],
                aux_hidden: vec![],
                koopman_frozen_per_window: false,
            },
        };
        let mut net = KoopmanNet::zeros(arch).unwrap();
        let n = net.params.len();
        net.params[n - 1] = omega;
        assemble_koopman(&net, &[0.3, -0.8]).unwrap()
    };
    let identity = rotation(0.0).sub(&Matrix::identity(2)).max_abs();
    let quarter = rotation(std::f64::consts::FRAC_PI_2 / dt)
        .sub(&Matrix::from_rows(&[[0.0, -1.0], [1.0, 0.0]]))
        .max_abs();
    let half = rotation(std::f64::consts::PI / dt)
        .add(&Matrix::identity(2))
        .max_abs();
    identity.max(quarter).max(half)
}

/// `x₁ = x₁(0)e^{μt}`, `x₂ = (x₂(0) − c·x₁(0)²)e^{λt} + c·x₁(0)²e^{2μt}` with `c = λ/(λ − 2μ)`.
fn closed_form_error() -> f64 {
    let spec = SystemSpec::standard(SystemKind::DiscreteSpectrum);
    let (mu, lambda) = (-0.05, -1.0);
    let c = lambda / (lambda - 2.0 * mu);
    let mut worst = 0.0f64;
    for x0 in [[0.3, -0.4], [-0.5, 0.5], [0.1, 0.0]] {
        let t = integrate(&spec, &x0, 250).unwrap();
        for (k, x) in t.states.iter().enumerate() {
            let time = k as f64 * spec.dt;
            let a = x0[0] * x0[0];
            let e1 = x0[0] * (mu * time).exp();
            let e2 = (x0[1] - c * a) * (lambda * time).exp() + c * a * (2.0 * mu * time).exp();
            worst = worst.max((x[0] - e1).abs()).max((x[1] - e2).abs());
        }
    }
    worst
}

fn deterministic() -> bool {
    let spec = SystemSpec::standard(SystemKind::FluidFlow);
    let a = generate_dataset(&spec, 6, 2, 140, 4).unwrap();
    let b = generate_dataset(&spec, 6, 2, 140, 4).unwrap();
    let opts = SpectralOptions::default();
    let ea = extract_dataset(&a, &opts).unwrap().config;
    let eb = extract_dataset(&b, &opts).unwrap().config;
    let cfg = TrainConfig {
        mode: Mode::WithPretrain,
        epochs: PhaseEpochs {
            recon: 1,
            pretrain: 1,
            frozen: 1,
            joint: 1,
        },
        batch_size: 16,
        batches_per_epoch: Some(3),
        ..TrainConfig::default()
    };
    let (na, ra) = train(&a, &cfg, Some(&ea)).unwrap();
    let (nb, rb) = train(&b, &cfg, Some(&eb)).unwrap();
    let bits = |n: &KoopmanNet| n.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
    a == b && ea == eb && bits(&na) == bits(&nb) && ra.same_results(&rb)
}

fn property(rep: &mut Report) {
    let t = Instant::now();
    let grad = [(31, false), (32, false), (33, true)]
        .iter()
        .map(|&(s, f)| gradient_rel_error(s, f))
        .fold(0.0f64, f64::max);
    let resid = factor_residuals();
    let havok = havok_recovery();
    let hankel = hankel_structure();
    let assembly = assembly_error();
    let closed = closed_form_error();
    let det = deterministic();
    let secs = t.elapsed().as_secs_f64();
    let ok = grad < GRAD_REL
        && resid <= FACTOR_RESID
        && havok < HAVOK_EIG_TOL
        && hankel
        && assembly < ASSEMBLY_TOL
        && closed < CLOSED_FORM_TOL
        && det
        && secs < PROPERTY_SECONDS;
    rep.line(
        "property-suite",
        ok,
        format!(
            "gradient rel {grad:.1e} (<{GRAD_REL:.0e}), svd/eig residual {resid:.1e} (<={FACTOR_RESID:.0e}), \
             havok eig err {havok:.1e} (<{HAVOK_EIG_TOL:.0e}), hankel structure {hankel}, \
             assembly {assembly:.1e} (<{ASSEMBLY_TOL:.0e}), closed form {closed:.1e} (<{CLOSED_FORM_TOL:.0e}), \
             deterministic {det}, {secs:.1}s (<{PROPERTY_SECONDS}s)"
        ),
    );
}

fn main() -> ExitCode {
    let full = std::env::var("KOOPMAN_ACCEPTANCE_FULL").is_ok_and(|v| v == "1");
    let only = std::env::var("KOOPMAN_ACCEPTANCE").ok();
    let wanted = |name: &str| only.as_deref().is_none_or(|s| s.split(',').any(|p| p.trim() == name));
    let mut rep = Report { failed: 0 };
    let mut lab = Lab::new(full);
    if wanted("property") {
        property(&mut rep);
    }
    if wanted("spectral-configs") {
        spectral_configs(&mut lab, &mut rep);
    }
    if wanted("ordering") {
        ordering(&mut lab, &mut rep);
    }
    if wanted("order-sweep") {
        order_sweep(&mut lab, &mut rep);
    }
    if wanted("eig-sweep") {
        eig_sweep(&mut lab, &mut rep);
    }
    if rep.failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", rep.failed);
        ExitCode::FAILURE
    }
}
