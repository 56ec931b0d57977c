use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::record::write_csv;
use super::{train, Mode, TrainConfig};
use crate::dynamics::Dataset;
use crate::error::{Error, Result};
use crate::spectral::{extract_dataset, SpectralOptions};

/// Largest latent dimension the eigenvalue sweep visits.
const MAX_EIGS: usize = 6;

/// Every `(m_r, m_c)` with `m_c` even, `1 ≤ m_r + m_c ≤ 6`, sorted by total
/// dimension and then `m_c`.
pub fn eig_sweep_configs() -> Vec<(usize, usize)> {
    let mut out = vec![];
    for dim in 1..=MAX_EIGS {
        for m_c in (0..=dim).step_by(2) {
            out.push((dim - m_c, m_c));
        }
    }
    out
}

/// Runs `f` over `items` on up to `jobs` threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let jobs = jobs.clamp(1, items.len().max(1));
    if jobs == 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<R>>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.unwrap()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigSweepRow {
    pub m_r: usize,
    pub m_c: usize,
    pub test_mse: f64,
    pub test_mse_raw: f64,
    /// Matches the extracted configuration.
    pub sdp: bool,
    pub curve: Vec<f64>,
}

pub const EIG_SWEEP_HEADER: [&str; 6] = ["m_r", "m_c", "latent_dim", "test_mse", "test_mse_raw", "sdp"];

/// Trains the baseline at every sweep configuration (order from `cfg.order`,
/// default 1). `sdp` marks the extracted `(m_r, m_c)`.
pub fn sweep_eigs(
    data: &Dataset,
    cfg: &TrainConfig,
    sdp: Option<(usize, usize)>,
    jobs: usize,
) -> Result<Vec<EigSweepRow>> {
    let configs = eig_sweep_configs();
    par_map(&configs, jobs, |&(m_r, m_c)| {
        let c = TrainConfig {
            mode: Mode::Lusch,
            m_r: Some(m_r),
            m_c: Some(m_c),
            ..cfg.clone()
        };
        let (_, rec) = train(data, &c, None)?;
        log::info!("eig sweep ({m_r}, {m_c}): test mse {:.3e}", rec.final_test_mse);
        Ok(EigSweepRow {
            m_r,
            m_c,
            test_mse: rec.final_test_mse,
            test_mse_raw: rec.final_test_mse_raw,
            sdp: sdp == Some((m_r, m_c)),
            curve: rec.mse_curve(),
        })
    })
}

pub fn write_eig_sweep_csv(path: impl AsRef<Path>, rows: &[EigSweepRow]) -> Result<()> {
    write_csv(
        path,
        &EIG_SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.m_r.to_string(),
                r.m_c.to_string(),
                (r.m_r + r.m_c).to_string(),
                r.test_mse.to_string(),
                r.test_mse_raw.to_string(),
                u8::from(r.sdp).to_string(),
            ]
        }),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderSweepRow {
    pub order: usize,
    pub m_r: usize,
    pub m_c: usize,
    pub test_mse: f64,
    pub test_mse_raw: f64,
    pub curve: Vec<f64>,
}

pub const ORDER_SWEEP_HEADER: [&str; 5] = ["order", "m_r", "m_c", "test_mse", "test_mse_raw"];

/// Re-runs extraction with each order forced and trains the pretrained model.
pub fn sweep_order(
    data: &Dataset,
    cfg: &TrainConfig,
    opts: &SpectralOptions,
    orders: &[usize],
    jobs: usize,
) -> Result<Vec<OrderSweepRow>> {
    if let Some(&bad) = orders.iter().find(|&&r| r == 0 || r > opts.r_max) {
        return Err(Error::Config(format!("order {bad} outside 1..={}", opts.r_max)));
    }
    par_map(orders, jobs, |&order| {
        let o = SpectralOptions {
            forced_order: Some(order),
            ..opts.clone()
        };
        let spec = extract_dataset(data, &o)?.config;
        let c = TrainConfig {
            mode: Mode::WithPretrain,
            order: None,
            m_r: None,
            m_c: None,
            ..cfg.clone()
        };
        let (_, rec) = train(data, &c, Some(&spec))?;
        log::info!("order sweep {order}: test mse {:.3e}", rec.final_test_mse);
        Ok(OrderSweepRow {
            order,
            m_r: spec.m_r,
            m_c: spec.m_c,
            test_mse: rec.final_test_mse,
            test_mse_raw: rec.final_test_mse_raw,
            curve: rec.mse_curve(),
        })
    })
}

pub fn write_order_sweep_csv(path: impl AsRef<Path>, rows: &[OrderSweepRow]) -> Result<()> {
    write_csv(
        path,
        &ORDER_SWEEP_HEADER,
        rows.iter().map(|r| {
            vec![
                r.order.to_string(),
                r.m_r.to_string(),
                r.m_c.to_string(),
                r.test_mse.to_string(),
                r.test_mse_raw.to_string(),
            ]
        }),
    )
}

/// Long-format curves: `label,epoch,test_mse`.
pub fn write_curves_csv<'a>(
    path: impl AsRef<Path>,
    curves: impl IntoIterator<Item = (String, &'a [f64])>,
) -> Result<()> {
    let rows: Vec<Vec<String>> = curves
        .into_iter()
        .flat_map(|(label, c)| {
            c.iter()
                .enumerate()
                .map(move |(i, v)| vec![label.clone(), (i + 1).to_string(), v.to_string()])
                .collect::<Vec<_>>()
        })
        .collect();
    write_csv(path, &["label", "epoch", "test_mse"], rows.into_iter())
}
