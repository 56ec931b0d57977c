use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

use koopman_core::dynamics::{generate_dataset, read_dataset, write_dataset, Normalization, SystemSpec};
use koopman_core::koopnet::{one_step, read_checkpoint, write_checkpoint, DelaySeries};
use koopman_core::persist::{read_json, write_atomic, write_json};
use koopman_core::spectral::{extract_dataset, SpectralConfig};
use koopman_core::trainer::{
    self, eval_one_step_mse, eval_one_step_mse_raw, eval_trajectory_l2, resolve_spectral,
    write_curves_csv, write_eig_sweep_csv, write_l2_csv, write_metrics_csv, write_order_sweep_csv,
    ExperimentRecord, Mode, Session,
};
use koopman_core::{Dataset, Error};

use crate::config::RunConfig;
use crate::{Budget, Common, TrainFlags};

pub const SPECTRAL_JSON: &str = "spectral.json";
pub const EXTRACT_JSON: &str = "extract.json";
pub const CHECKPOINT: &str = "model.ckpt";

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    Error::Config(msg.into()).into()
}

fn load(common: &Common) -> Result<(RunConfig, u64)> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    let seed = cfg.resolve_seed(common.seed);
    Ok((cfg, seed))
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    read_dataset(dir).with_context(|| format!("reading dataset from {}", dir.display()))
}

pub fn generate(
    common: &Common,
    system: Option<&str>,
    n_train: Option<usize>,
    n_test: Option<usize>,
    traj_len: Option<usize>,
) -> Result<()> {
    let (mut cfg, seed) = load(common)?;
    if let Some(s) = system {
        cfg.data.system = Some(s.parse()?);
    }
    let spec = match (&cfg.data.spec, cfg.data.system) {
        (Some(spec), Some(kind)) if spec.kind() != kind => {
            return Err(config_error(format!("--system {kind} conflicts with data.spec ({})", spec.kind())));
        }
        (Some(spec), _) => spec.clone(),
        (None, Some(kind)) => SystemSpec::standard(kind),
        (None, None) => return Err(config_error("no system given (use --system or data.system)")),
    };
    let n_train = n_train.unwrap_or(cfg.data.n_train);
    let n_test = n_test.unwrap_or(cfg.data.n_test);
    let traj_len = traj_len.unwrap_or(cfg.data.traj_len);
    let data = generate_dataset(&spec, n_train, n_test, traj_len, seed)?;
    write_dataset(&common.out, &data)?;
    println!(
        "{}: {} train + {} test trajectories of {} steps -> {}",
        spec.kind(),
        n_train,
        n_test,
        traj_len,
        common.out.display()
    );
    Ok(())
}

#[derive(Serialize, serde::Deserialize)]
struct ExtractSummary {
    system: String,
    order: usize,
    m_r: usize,
    m_c: usize,
    sdp_seconds: f64,
}

/// `2 real, 0 complex, order 1`
fn table_row(s: &SpectralConfig) -> String {
    format!("{} real, {} complex, order {}", s.m_r, s.m_c, s.order_r)
}

pub fn extract(
    common: &Common,
    data_dir: &Path,
    r_max: Option<usize>,
    tol_improve: Option<f64>,
    order: Option<usize>,
) -> Result<()> {
    let (mut cfg, _) = load(common)?;
    let data = load_dataset(data_dir)?;
    if let Some(r) = r_max {
        cfg.spectral.r_max = r;
    }
    if let Some(t) = tol_improve {
        cfg.spectral.tol_improve = t;
    }
    if order.is_some() {
        cfg.spectral.forced_order = order;
    }
    let t0 = Instant::now();
    let ex = extract_dataset(&data, &cfg.spectral)?;
    let secs = t0.elapsed().as_secs_f64();
    let s = &ex.config;
    write_json(common.out.join(SPECTRAL_JSON), s)?;
    write_json(
        common.out.join(EXTRACT_JSON),
        &ExtractSummary {
            system: data.spec.kind().to_string(),
            order: s.order_r,
            m_r: s.m_r,
            m_c: s.m_c,
            sdp_seconds: secs,
        },
    )?;
    println!("{}: {}", data.spec.kind(), table_row(s));
    for c in &s.candidates {
        log::info!(
            "order {}: rank {} residual {:.3e} ({} real, {} complex)",
            c.order,
            c.rank,
            c.residual,
            c.m_r,
            c.m_c
        );
    }
    Ok(())
}

/// Spectral configuration from a file (with the extraction time recorded
/// beside it, if any) or from running the stage now.
fn spectral_for(cfg: &RunConfig, data: &Dataset, file: Option<&Path>) -> Result<(SpectralConfig, f64)> {
    match file {
        Some(p) => {
            let s: SpectralConfig = read_json(p)?;
            let side = p.with_file_name(EXTRACT_JSON);
            let secs = read_json::<ExtractSummary>(&side).map(|e| e.sdp_seconds).unwrap_or(0.0);
            Ok((s, secs))
        }
        None => {
            let t0 = Instant::now();
            let s = extract_dataset(data, &cfg.spectral)?.config;
            Ok((s, t0.elapsed().as_secs_f64()))
        }
    }
}

fn apply_train_flags(cfg: &mut RunConfig, f: &TrainFlags) {
    if f.budget == Some(Budget::Smoke) {
        cfg.train.epochs = cfg.train.epochs.scaled(1, 20);
    }
    if let Some(lr) = f.lr {
        cfg.train.lr = lr;
    }
    if let Some(b) = f.batch_size {
        cfg.train.batch_size = b;
    }
    if f.batches_per_epoch.is_some() {
        cfg.train.batches_per_epoch = f.batches_per_epoch;
    }
}

#[derive(Serialize)]
struct Runtime {
    sdp: f64,
    training: f64,
    total: f64,
}

impl Runtime {
    fn minutes(sdp_s: f64, train_s: f64) -> Runtime {
        let m = |s: f64| (s / 60.0 * 10.0).round() / 10.0;
        Runtime {
            sdp: m(sdp_s),
            training: m(train_s),
            total: m(sdp_s + train_s),
        }
    }
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    system: String,
    mode: Mode,
    seed: u64,
    epochs_completed: usize,
    final_test_mse: f64,
    final_test_mse_raw: f64,
    runtime_minutes: Runtime,
    sdp_seconds: f64,
    training_seconds: f64,
    phase_seconds: &'a [trainer::PhaseTime],
    spectral: &'a SpectralConfig,
    config: &'a RunConfig,
}

pub fn train(
    common: &Common,
    data_dir: &Path,
    spectral_file: Option<&Path>,
    mode: Option<&str>,
    (order, m_r, m_c): (Option<usize>, Option<usize>, Option<usize>),
    flags: &TrainFlags,
) -> Result<()> {
    let (mut cfg, seed) = load(common)?;
    let data = load_dataset(data_dir)?;
    if let Some(m) = mode {
        cfg.train.mode = m.parse()?;
    }
    cfg.train.order = order.or(cfg.train.order);
    cfg.train.m_r = m_r.or(cfg.train.m_r);
    cfg.train.m_c = m_c.or(cfg.train.m_c);
    apply_train_flags(&mut cfg, flags);
    cfg.train.validate()?;
    let (extracted, sdp_s) = match cfg.train.mode {
        Mode::Lusch => (None, 0.0),
        _ => {
            let (s, t) = spectral_for(&cfg, &data, spectral_file)?;
            (Some(s), t)
        }
    };
    let spec = resolve_spectral(&cfg.train, extracted.as_ref(), data.spec.kind(), data.spec.dt)?;
    let train_n = data.train_normalized();
    let test_n = data.test_normalized();
    let mut session = Session::new(&train_n, &test_n, &cfg.train, spec.clone())?;
    let ckpt = common.out.join(CHECKPOINT);
    write_checkpoint(&ckpt, &session.net, Some(&spec), seed, "init")?;
    let run = session.run_with(|ev| {
        log::info!(
            "epoch {} [{}] test mse {:.3e}",
            ev.row.epoch,
            ev.row.phase,
            ev.row.test_mse
        );
        write_checkpoint(&ckpt, ev.net, Some(&spec), seed, &ev.row.phase)
    });
    write_metrics_csv(common.out.join("metrics.csv"), &session.record.rows)?;
    run?;
    session.finish(&data)?;
    let rec = &session.record;
    write_l2_csv(common.out.join("l2.csv"), &rec.l2_curve)?;
    let train_s = rec.training_seconds();
    let summary = TrainSummary {
        system: data.spec.kind().to_string(),
        mode: cfg.train.mode,
        seed,
        epochs_completed: rec.rows.len(),
        final_test_mse: rec.final_test_mse,
        final_test_mse_raw: rec.final_test_mse_raw,
        runtime_minutes: Runtime::minutes(sdp_s, train_s),
        sdp_seconds: sdp_s,
        training_seconds: train_s,
        phase_seconds: &rec.phase_times,
        spectral: &spec,
        config: &cfg,
    };
    write_json(common.out.join("summary.json"), &summary)?;
    print_run(&summary, rec);
    Ok(())
}

fn print_run(s: &TrainSummary, rec: &ExperimentRecord) {
    println!(
        "{} {} ({}): test mse {:.3e} (raw {:.3e})",
        s.system,
        s.mode,
        table_row(s.spectral),
        rec.final_test_mse,
        rec.final_test_mse_raw
    );
    println!("{:<14} {:>6} {:>9} {:>6}", "runtime (min)", "SDP", "Training", "Total");
    let r = &s.runtime_minutes;
    let sdp = if s.mode == Mode::Lusch { "-".to_string() } else { format!("{:.1}", r.sdp) };
    println!("{:<14} {:>6} {:>9.1} {:>6.1}", s.mode.name(), sdp, r.training, r.total);
}

#[derive(Serialize)]
struct EvalSummary {
    test_mse: f64,
    test_mse_raw: f64,
    trajectories: usize,
}

/// Predicted trajectory in raw units: the first `order` states are copied,
/// every later one is the one-step prediction from the true history.
fn predicted_states(net: &koopman_core::KoopmanNet, raw: &koopman_core::Trajectory, norm: &Normalization) -> Result<Vec<Vec<f64>>> {
    let r = net.arch.order;
    let n = raw.state_dim();
    let series = DelaySeries::new(&norm.apply_traj(raw), r)?;
    let rows = series.len() - 1;
    let pred = one_step(net, &series.rows[..rows * series.dim], rows)?;
    let mut out: Vec<Vec<f64>> = raw.states[..r].to_vec();
    for p in pred.chunks_exact(series.dim) {
        out.push(norm.invert(&p[series.dim - n..]));
    }
    Ok(out)
}

pub fn eval(common: &Common, checkpoint: &Path, data_dir: &Path, n_traj: Option<usize>) -> Result<()> {
    let data = load_dataset(data_dir)?;
    let (net, _) = read_checkpoint(checkpoint)?;
    if net.arch.state_dim != data.state_dim() {
        return Err(config_error(format!(
            "checkpoint expects state dimension {}, dataset has {}",
            net.arch.state_dim,
            data.state_dim()
        )));
    }
    if net.arch.dt != data.spec.dt {
        log::warn!("checkpoint dt {} differs from dataset dt {}", net.arch.dt, data.spec.dt);
    }
    let test_n = data.test_normalized();
    let summary = EvalSummary {
        test_mse: eval_one_step_mse(&net, &test_n)?,
        test_mse_raw: eval_one_step_mse_raw(&net, &data.test, &data.normalization)?,
        trajectories: test_n.len(),
    };
    let k = n_traj.unwrap_or(test_n.len()).min(test_n.len());
    let n = data.state_dim();
    for i in 0..k {
        write_l2_csv(common.out.join(format!("l2_traj{i}.csv")), &eval_trajectory_l2(&net, &test_n[i])?)?;
        let pred = predicted_states(&net, &data.test[i], &data.normalization)?;
        let mut text = String::from("step");
        for d in 1..=n {
            text.push_str(&format!(",x{d}"));
        }
        for d in 1..=n {
            text.push_str(&format!(",x{d}_pred"));
        }
        text.push('\n');
        for (step, (x, p)) in data.test[i].states.iter().zip(&pred).enumerate() {
            text.push_str(&step.to_string());
            for v in x.iter().chain(p) {
                text.push_str(&format!(",{v}"));
            }
            text.push('\n');
        }
        write_atomic(common.out.join(format!("pred_traj{i}.csv")), text.as_bytes())?;
    }
    write_json(common.out.join("eval.json"), &summary)?;
    println!("test mse {:.3e} (raw {:.3e})", summary.test_mse, summary.test_mse_raw);
    Ok(())
}

fn curves_path(out: &Path, name: &str) -> PathBuf {
    out.join(format!("{name}_curves.csv"))
}

pub fn sweep_eig(
    common: &Common,
    data_dir: &Path,
    spectral_file: Option<&Path>,
    order: Option<usize>,
    flags: &TrainFlags,
    jobs: usize,
) -> Result<()> {
    let (mut cfg, _) = load(common)?;
    let data = load_dataset(data_dir)?;
    apply_train_flags(&mut cfg, flags);
    cfg.train.order = order.or(cfg.train.order);
    cfg.train.validate()?;
    let (spec, _) = spectral_for(&cfg, &data, spectral_file)?;
    let rows = trainer::sweep_eigs(&data, &cfg.train, Some((spec.m_r, spec.m_c)), jobs)?;
    write_eig_sweep_csv(common.out.join("sweep_eig.csv"), &rows)?;
    write_curves_csv(
        curves_path(&common.out, "sweep_eig"),
        rows.iter().map(|r| (format!("{}r{}c", r.m_r, r.m_c), r.curve.as_slice())),
    )?;
    println!("{:>4} {:>4} {:>12} sdp", "m_r", "m_c", "test_mse");
    for r in &rows {
        println!("{:>4} {:>4} {:>12.3e} {}", r.m_r, r.m_c, r.test_mse, if r.sdp { "*" } else { "" });
    }
    Ok(())
}

pub fn sweep_order(
    common: &Common,
    data_dir: &Path,
    orders: Option<Vec<usize>>,
    flags: &TrainFlags,
    jobs: usize,
) -> Result<()> {
    let (mut cfg, _) = load(common)?;
    let data = load_dataset(data_dir)?;
    apply_train_flags(&mut cfg, flags);
    cfg.train.validate()?;
    let orders = orders.unwrap_or_else(|| (1..=cfg.spectral.r_max).collect());
    if orders.is_empty() {
        return Err(config_error("no orders given"));
    }
    let rows = trainer::sweep_order(&data, &cfg.train, &cfg.spectral, &orders, jobs)?;
    write_order_sweep_csv(common.out.join("sweep_order.csv"), &rows)?;
    write_curves_csv(
        curves_path(&common.out, "sweep_order"),
        rows.iter().map(|r| (format!("order{}", r.order), r.curve.as_slice())),
    )?;
    println!("{:>5} {:>4} {:>4} {:>12}", "order", "m_r", "m_c", "test_mse");
    for r in &rows {
        println!("{:>5} {:>4} {:>4} {:>12.3e}", r.order, r.m_r, r.m_c, r.test_mse);
    }
    Ok(())
}
