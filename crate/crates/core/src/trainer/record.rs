use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Mode;
use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::spectral::SpectralConfig;

pub const METRICS_HEADER: [&str; 6] = ["epoch", "phase", "loss_recon", "loss_lin", "loss_fwd", "test_mse"];

/// Loss terms are epoch means over mini-batches; a term that the phase does
/// not optimise is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub phase: String,
    pub loss_recon: Option<f64>,
    pub loss_lin: Option<f64>,
    pub loss_fwd: Option<f64>,
    pub loss_pretrain: Option<f64>,
    pub test_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseTime {
    pub phase: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub mode: Mode,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub phase_times: Vec<PhaseTime>,
    pub final_test_mse: f64,
    pub final_test_mse_raw: f64,
    /// One-step L₂ error along the first test trajectory.
    pub l2_curve: Vec<f64>,
    pub spectral: Option<SpectralConfig>,
}

impl ExperimentRecord {
    pub fn new(mode: Mode, seed: u64) -> Self {
        ExperimentRecord {
            mode,
            seed,
            rows: vec![],
            phase_times: vec![],
            final_test_mse: f64::NAN,
            final_test_mse_raw: f64::NAN,
            l2_curve: vec![],
            spectral: None,
        }
    }

    pub fn training_seconds(&self) -> f64 {
        self.phase_times.iter().map(|p| p.seconds).sum()
    }

    pub fn mse_curve(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.test_mse).collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, o: &ExperimentRecord) -> bool {
        let phases = |r: &ExperimentRecord| r.phase_times.iter().map(|p| p.phase.clone()).collect::<Vec<_>>();
        self.mode == o.mode
            && self.seed == o.seed
            && self.rows == o.rows
            && phases(self) == phases(o)
            && self.final_test_mse.to_bits() == o.final_test_mse.to_bits()
            && self.final_test_mse_raw.to_bits() == o.final_test_mse_raw.to_bits()
            && self.l2_curve == o.l2_curve
            && self.spectral == o.spectral
    }
}

fn csv_bytes(
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::Format {
        what: "csv output".into(),
        detail: e.to_string(),
    };
    w.write_record(header).map_err(err)?;
    for r in rows {
        w.write_record(&r).map_err(err)?;
    }
    w.into_inner().map_err(|e| Error::Format {
        what: "csv output".into(),
        detail: e.to_string(),
    })
}

pub(crate) fn write_csv(
    path: impl AsRef<Path>,
    header: &[&str],
    rows: impl Iterator<Item = Vec<String>>,
) -> Result<()> {
    write_atomic(path, &csv_bytes(header, rows)?)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,phase,loss_recon,loss_lin,loss_fwd,test_mse`; terms a phase does not
/// optimise are left empty.
pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochRow]) -> Result<()> {
    write_csv(
        path,
        &METRICS_HEADER,
        rows.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.phase.clone(),
                opt(r.loss_recon),
                opt(r.loss_lin),
                opt(r.loss_fwd),
                r.test_mse.to_string(),
            ]
        }),
    )
}

/// `step,l2_error`
pub fn write_l2_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    write_csv(
        path,
        &["step", "l2_error"],
        curve.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}
