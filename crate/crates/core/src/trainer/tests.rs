use super::*;
use crate::dynamics::{generate_dataset, SystemSpec};
use crate::koopnet::{assemble_koopman, Architecture};
use crate::numcore::eigenvalues;
use num_complex::Complex64;

fn small_data(kind: SystemKind) -> Dataset {
    generate_dataset(&SystemSpec::standard(kind), 6, 2, 40, 3).unwrap()
}

fn small_cfg(mode: Mode) -> TrainConfig {
    TrainConfig {
        mode,
        epochs: PhaseEpochs {
            recon: 2,
            pretrain: 2,
            frozen: 2,
            joint: 2,
        },
        batch_size: 16,
        batches_per_epoch: Some(3),
        horizons: Horizons { t_lin: 3, t_fwd: 2 },
        net: NetConfig {
            hidden: vec![8],
            aux_hidden: vec![4],
            koopman_frozen_per_window: false,
        },
        seed: 7,
        ..TrainConfig::default()
    }
}

fn rotation_traj(mu: f64, om: f64, dt: f64, len: usize) -> Trajectory {
    let (rho, (s, c)) = ((mu * dt).exp(), (om * dt).sin_cos());
    let mut x = [0.7, -0.2];
    let mut states = vec![];
    for _ in 0..len {
        states.push(x.to_vec());
        x = [rho * (c * x[0] - s * x[1]), rho * (s * x[0] + c * x[1])];
    }
    Trajectory {
        states,
        dt,
        system: SystemKind::FluidFlow,
    }
}

/// Identity autoencoder whose single pair head outputs the constant `(mu, om)`.
fn planted(mu: f64, om: f64, dt: f64) -> KoopmanNet {
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
    net.params[..4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    net.params[6..10].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    net.params[16..18].copy_from_slice(&[mu, om]);
    net
}

#[test]
fn planted_model_has_zero_error() {
    let t = rotation_traj(-0.1, 2.0, 0.05, 60);
    let net = planted(-0.1, 2.0, 0.05);
    assert!(eval_one_step_mse(&net, &[t.clone()]).unwrap() < 1e-10);
    let curve = eval_trajectory_l2(&net, &t).unwrap();
    assert_eq!(curve.len(), t.len() - 1);
    assert!(curve.iter().all(|&e| e < 1e-8));
}

#[test]
fn zero_decoder_scores_the_target_energy() {
    let data = small_data(SystemKind::Lorenz);
    let test = data.test_normalized();
    let spec = SpectralConfig::manual(2, 1, 2, 3, data.spec.dt).unwrap();
    let net = KoopmanNet::zeros(Architecture::from_spectral(&spec, NetConfig::default())).unwrap();
    let mut sum = 0.0;
    let mut count = 0;
    for t in &test {
        for x in &t.states[2..] {
            sum += x.iter().map(|v| v * v).sum::<f64>();
            count += 1;
        }
    }
    let got = eval_one_step_mse(&net, &test).unwrap();
    assert!((got - sum / count as f64).abs() < 1e-12);
    assert_eq!(eval_trajectory_l2(&net, &test[0]).unwrap().len(), test[0].len() - 2);
}

#[test]
fn constant_prediction_on_constant_trajectory() {
    let mut net = planted(0.0, 0.0, 0.1);
    // decoder weights zero, bias = the constant state
    net.params[6..10].iter_mut().for_each(|p| *p = 0.0);
    net.params[10..12].copy_from_slice(&[0.4, -1.5]);
    let t = Trajectory {
        states: vec![vec![0.4, -1.5]; 12],
        dt: 0.1,
        system: SystemKind::FluidFlow,
    };
    assert!(eval_trajectory_l2(&net, &t).unwrap().iter().all(|&e| e == 0.0));
}

#[test]
fn test_mse_ignores_trajectory_order() {
    let data = small_data(SystemKind::FluidFlow);
    let mut test = data.test_normalized();
    test.extend(data.train_normalized());
    let spec = SpectralConfig::manual(1, 1, 2, 3, data.spec.dt).unwrap();
    let net = KoopmanNet::from_spectral(&spec, NetConfig::default(), 4).unwrap();
    let a = eval_one_step_mse(&net, &test).unwrap();
    test.reverse();
    test.swap(0, 3);
    let b = eval_one_step_mse(&net, &test).unwrap();
    assert!((a - b).abs() <= 1e-14 * a);
}

#[test]
fn raw_mse_rescales_by_normalization() {
    let data = small_data(SystemKind::Pendulum);
    let spec = SpectralConfig::manual(1, 0, 2, 2, data.spec.dt).unwrap();
    let net = KoopmanNet::zeros(Architecture::from_spectral(&spec, NetConfig::default())).unwrap();
    // zero network: raw prediction is the inverse-normalized zero vector
    let zero = data.normalization.invert(&[0.0, 0.0]);
    let mut sum = 0.0;
    let mut count = 0;
    for t in &data.test {
        for x in &t.states[1..] {
            sum += x.iter().zip(&zero).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            count += 1;
        }
    }
    let got = eval_one_step_mse_raw(&net, &data.test, &data.normalization).unwrap();
    assert!((got - sum / count as f64).abs() < 1e-10 * got.max(1.0));
}

#[test]
fn zero_epochs_change_nothing() {
    let data = small_data(SystemKind::DiscreteSpectrum);
    let mut cfg = small_cfg(Mode::Lusch);
    cfg.epochs = PhaseEpochs {
        recon: 0,
        pretrain: 0,
        frozen: 0,
        joint: 0,
    };
    let spec = resolve_spectral(&cfg, None, SystemKind::DiscreteSpectrum, data.spec.dt).unwrap();
    let init = KoopmanNet::from_spectral(&spec, cfg.net.clone(), cfg.seed).unwrap();
    let (net, rec) = train(&data, &cfg, None).unwrap();
    assert_eq!(net.params, init.params);
    assert!(rec.rows.is_empty());
    assert!(rec.final_test_mse.is_finite());
}

#[test]
fn runs_are_deterministic() {
    let data = small_data(SystemKind::FluidFlow);
    let cfg = small_cfg(Mode::Lusch);
    let (a_net, a) = train(&data, &cfg, None).unwrap();
    let (b_net, b) = train(&data, &cfg, None).unwrap();
    assert!(a.same_results(&b));
    assert_eq!(a_net.params, b_net.params);
    let other = TrainConfig { seed: 8, ..cfg };
    let (_, c) = train(&data, &other, None).unwrap();
    assert!(!a.same_results(&c));
}

fn pretrain_spec(dt: f64) -> SpectralConfig {
    let mut spec = SpectralConfig::manual(1, 1, 2, 3, dt).unwrap();
    let pair = Complex64::from_polar((-0.3 * dt).exp(), 1.5 * dt);
    spec.target_eigs = vec![pair, pair.conj(), Complex64::new((-1.0 * dt).exp(), 0.0)];
    spec.validate().unwrap();
    spec
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let data = small_data(SystemKind::FluidFlow);
    let cfg = small_cfg(Mode::WithPretrain);
    let spec = pretrain_spec(data.spec.dt);
    let train_n = data.train_normalized();
    let test_n = data.test_normalized();
    let mut s = Session::new(&train_n, &test_n, &cfg, spec).unwrap();
    let mut snaps: Vec<(String, Vec<f64>)> = vec![("init".into(), s.net.params.clone())];
    s.run_with(|ev| {
        if ev.phase_done {
            snaps.push((ev.row.phase.clone(), ev.net.params.clone()));
        }
        Ok(())
    })
    .unwrap();
    let names: Vec<&str> = snaps.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["init", "recon", "pretrain", "frozen", "joint"]);
    let enc = s.net.group_range(ParamGroup::Encoder);
    let dec = s.net.group_range(ParamGroup::Decoder);
    let aux = s.net.group_range(ParamGroup::Aux);
    let same = |a: usize, b: usize, r: &Range<usize>| snaps[a].1[r.clone()] == snaps[b].1[r.clone()];
    // recon leaves the heads alone, pretrain the autoencoder, frozen the heads
    assert!(same(0, 1, &aux) && !same(0, 1, &enc));
    assert!(same(1, 2, &enc) && same(1, 2, &dec) && !same(1, 2, &aux));
    assert!(same(2, 3, &aux) && !same(2, 3, &dec));
    assert!(!same(3, 4, &aux));
    // epochs strictly increase and phases follow the schedule
    assert!(s.record.rows.windows(2).all(|w| w[0].epoch < w[1].epoch));
    assert!(s.record.rows.iter().all(|r| r.test_mse.is_finite()));
    assert_eq!(s.record.rows.len(), 8);
}

#[test]
fn pretraining_reaches_target_eigenvalues() {
    let data = small_data(SystemKind::FluidFlow);
    let mut cfg = small_cfg(Mode::WithPretrain);
    cfg.epochs = PhaseEpochs {
        recon: 1,
        pretrain: 150,
        frozen: 0,
        joint: 0,
    };
    cfg.lr = 1e-2;
    let spec = pretrain_spec(data.spec.dt);
    let train_n = data.train_normalized();
    let test_n = data.test_normalized();
    let mut s = Session::new(&train_n, &test_n, &cfg, spec.clone()).unwrap();
    s.run().unwrap();
    // latent mean over the training states
    let m = s.net.arch.latent_dim();
    let mut mean = vec![0.0; m];
    let mut count = 0.0;
    for t in &train_n {
        for x in &t.states {
            for (a, v) in mean.iter_mut().zip(s.net.encode(x)) {
                *a += v;
            }
            count += 1.0;
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let k = assemble_koopman(&s.net, &mean).unwrap();
    let mut got = eigenvalues(&k).unwrap();
    for want in &spec.target_eigs {
        let (i, d) = got
            .iter()
            .enumerate()
            .map(|(i, z)| (i, (z - want).norm()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!(d < 1e-2, "target {want} nearest miss {d}");
        got.remove(i);
    }
}

#[test]
fn baseline_equals_no_pretrain_at_same_dimensions() {
    let data = small_data(SystemKind::DiscreteSpectrum);
    let spec = SpectralConfig::manual(1, 2, 0, 2, data.spec.dt).unwrap();
    let (na, a) = train(&data, &small_cfg(Mode::Lusch), None).unwrap();
    let (nb, b) = train(&data, &small_cfg(Mode::NoPretrain), Some(&spec)).unwrap();
    assert_eq!(na.params, nb.params);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.final_test_mse, b.final_test_mse);
}

#[test]
fn divergence_keeps_last_good_network() {
    let data = small_data(SystemKind::FluidFlow);
    let cfg = small_cfg(Mode::NoPretrain);
    let spec = SpectralConfig::manual(1, 1, 2, 3, data.spec.dt).unwrap();
    let mut net = KoopmanNet::from_spectral(&spec, cfg.net.clone(), 1).unwrap();
    // one step stays finite, three steps overflow
    let head = net.aux[0].range();
    net.params[head.end - 2] = 300.0 / data.spec.dt;
    let train_n = data.train_normalized();
    let test_n = data.test_normalized();
    let mut s = Session::with_net(net, &train_n, &test_n, &cfg, spec).unwrap();
    let mut after_recon = None;
    let err = s
        .run_with(|ev| {
            if ev.phase_done {
                after_recon = Some(ev.net.params.clone());
            }
            Ok(())
        })
        .unwrap_err();
    match err {
        Error::TrainingDivergence { phase, epoch, .. } => {
            assert_eq!(phase, "joint");
            assert_eq!(epoch, 3);
        }
        e => panic!("unexpected {e}"),
    }
    assert_eq!(Some(s.net.params), after_recon);
    assert_eq!(s.record.rows.len(), 2);
}

#[test]
fn eig_sweep_enumeration() {
    let c = eig_sweep_configs();
    assert_eq!(c.len(), 15);
    assert!(!c.contains(&(0, 0)));
    assert!(c.iter().all(|&(r, k)| k % 2 == 0 && r + k <= 6 && r + k >= 1));
    assert!(c.windows(2).all(|w| (w[0].0 + w[0].1, w[0].1) < (w[1].0 + w[1].1, w[1].1)));
    assert_eq!(c[..5], [(1, 0), (2, 0), (0, 2), (3, 0), (1, 2)]);
}

#[test]
fn mode_rules_for_spectral_resolution() {
    let dt = 0.02;
    let extracted = pretrain_spec(dt);
    let cfg = TrainConfig::default();
    let lusch = TrainConfig { mode: Mode::Lusch, ..cfg.clone() };
    let r = resolve_spectral(&lusch, Some(&extracted), SystemKind::FluidFlow, dt).unwrap();
    assert_eq!((r.m_r, r.m_c, r.order_r), (0, 2, 1));
    assert!(!r.has_targets());
    let np = TrainConfig { mode: Mode::NoPretrain, ..cfg.clone() };
    let r = resolve_spectral(&np, Some(&extracted), SystemKind::FluidFlow, dt).unwrap();
    assert_eq!((r.m_r, r.m_c), (1, 2));
    assert!(!r.has_targets());
    let bad = TrainConfig { m_c: Some(4), ..np.clone() };
    assert!(matches!(resolve_spectral(&bad, Some(&extracted), SystemKind::FluidFlow, dt), Err(Error::Config(_))));
    assert!(resolve_spectral(&np, None, SystemKind::FluidFlow, dt).is_err());
    let manual = SpectralConfig::manual(1, 1, 2, 3, dt).unwrap();
    assert!(resolve_spectral(&cfg, Some(&manual), SystemKind::FluidFlow, dt).is_err());
    assert!(resolve_spectral(&cfg, Some(&extracted), SystemKind::FluidFlow, dt).unwrap().has_targets());
}

#[test]
fn forced_order_sets_encoder_width() {
    let data = small_data(SystemKind::Lorenz);
    let cfg = TrainConfig {
        order: Some(3),
        m_r: Some(1),
        m_c: Some(2),
        ..small_cfg(Mode::Lusch)
    };
    let (net, rec) = train(&data, &cfg, None).unwrap();
    assert_eq!(net.arch.input_dim(), 9);
    assert_eq!(rec.l2_curve.len(), 40 - 3);
}

#[test]
fn metrics_csv_schema() {
    let dir = tempfile::tempdir().unwrap();
    let rows = vec![
        EpochRow {
            epoch: 1,
            phase: "recon".into(),
            loss_recon: Some(0.5),
            loss_lin: None,
            loss_fwd: None,
            loss_pretrain: None,
            test_mse: 0.25,
        },
        EpochRow {
            epoch: 2,
            phase: "pretrain".into(),
            loss_recon: None,
            loss_lin: None,
            loss_fwd: None,
            loss_pretrain: Some(1.0),
            test_mse: 0.125,
        },
    ];
    let p = dir.path().join("metrics.csv");
    write_metrics_csv(&p, &rows).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text, "epoch,phase,loss_recon,loss_lin,loss_fwd,test_mse\n1,recon,0.5,,,0.25\n2,pretrain,,,,0.125\n");
    let q = dir.path().join("l2.csv");
    write_l2_csv(&q, &[0.0, 1.5]).unwrap();
    assert_eq!(std::fs::read_to_string(&q).unwrap(), "step,l2_error\n0,0\n1,1.5\n");
}
