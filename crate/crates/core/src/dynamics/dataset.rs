use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{integrate, SystemSpec, Trajectory};
use crate::error::{Error, Result};
use crate::persist;

const MAX_CONSECUTIVE_RESAMPLES: usize = 100;

/// Per-dimension affine map onto `[-1, 1]`: `y = (x − shift) / scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(dim: usize) -> Self {
        Normalization {
            shift: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Min/max fit over every state of `trajs`.
    pub fn fit(trajs: &[Trajectory]) -> Self {
        let dim = trajs.first().map_or(0, |t| t.state_dim());
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for x in trajs.iter().flat_map(|t| &t.states) {
            for i in 0..dim {
                lo[i] = lo[i].min(x[i]);
                hi[i] = hi[i].max(x[i]);
            }
        }
        let shift = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let scale = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| {
                let half = 0.5 * (h - l);
                // a constant coordinate maps to 0 instead of dividing by zero
                if half > 0.0 {
                    half
                } else {
                    1.0
                }
            })
            .collect();
        Normalization { shift, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| (v - s) / c)
            .collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter()
            .zip(self.shift.iter().zip(&self.scale))
            .map(|(v, (s, c))| v * c + s)
            .collect()
    }

    pub fn apply_traj(&self, t: &Trajectory) -> Trajectory {
        Trajectory {
            states: t.states.iter().map(|x| self.apply(x)).collect(),
            dt: t.dt,
            system: t.system,
        }
    }
}

/// Raw train/test trajectories plus the normalization fitted on train.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: SystemSpec,
    pub seed: u64,
    pub traj_len: usize,
    pub train: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
    pub normalization: Normalization,
    /// Initial conditions rejected because their trajectory diverged.
    pub resamples: usize,
}

impl Dataset {
    pub fn train_normalized(&self) -> Vec<Trajectory> {
        self.train.iter().map(|t| self.normalization.apply_traj(t)).collect()
    }

    pub fn test_normalized(&self) -> Vec<Trajectory> {
        self.test.iter().map(|t| self.normalization.apply_traj(t)).collect()
    }

    pub fn state_dim(&self) -> usize {
        self.spec.state_dim()
    }
}

pub fn generate_dataset(
    spec: &SystemSpec,
    n_train: usize,
    n_test: usize,
    traj_len: usize,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if n_train == 0 || n_test == 0 {
        return Err(Error::Config("n_train and n_test must be at least 1".into()));
    }
    if traj_len < 2 {
        return Err(Error::Config("traj_len must be at least 2".into()));
    }
    let mut trajs = Vec::with_capacity(n_train + n_test);
    let mut resamples = 0;
    for index in 0..n_train + n_test {
        let (traj, rejected) = sample_trajectory(spec, traj_len, seed, index as u64)?;
        resamples += rejected;
        trajs.push(traj);
    }
    if resamples > 0 {
        log::warn!("{}: resampled {resamples} divergent initial conditions", spec.kind());
    }
    let test = trajs.split_off(n_train);
    let normalization = Normalization::fit(&trajs);
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        traj_len,
        train: trajs,
        test,
        normalization,
        resamples,
    })
}

/// Each trajectory draws from its own ChaCha stream, so the result for a given
/// index does not depend on how many others were generated before it.
fn sample_trajectory(
    spec: &SystemSpec,
    len: usize,
    seed: u64,
    index: u64,
) -> Result<(Trajectory, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    for attempt in 0..=MAX_CONSECUTIVE_RESAMPLES {
        let x0: Vec<f64> = spec
            .init_box
            .iter()
            .map(|&[lo, hi]| if hi > lo { rng.gen_range(lo..hi) } else { lo })
            .collect();
        let start = if spec.burn_in > 0 {
            match integrate(spec, &x0, spec.burn_in + 1) {
                Ok(t) => t.states[spec.burn_in].clone(),
                Err(Error::Divergence { .. }) => continue,
                Err(e) => return Err(e),
            }
        } else {
            x0
        };
        match integrate(spec, &start, len) {
            Ok(t) => return Ok((t, attempt)),
            Err(Error::Divergence { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::Config(format!(
        "{}: trajectory {index} diverged on {} consecutive initial conditions; check dt and init_box",
        spec.kind(),
        MAX_CONSECUTIVE_RESAMPLES + 1
    )))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    spec: SystemSpec,
    seed: u64,
    dt: f64,
    n_train: usize,
    n_test: usize,
    traj_len: usize,
    normalization: Normalization,
    resamples: usize,
}

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";
pub const SIDECAR_JSON: &str = "dataset.json";

/// Writes `train.csv`, `test.csv` (raw units) and the `dataset.json` sidecar.
pub fn write_dataset(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    persist::write_atomic(dir.join(TRAIN_CSV), &trajectories_csv(&data.train)?)?;
    persist::write_atomic(dir.join(TEST_CSV), &trajectories_csv(&data.test)?)?;
    persist::write_json(
        dir.join(SIDECAR_JSON),
        &Sidecar {
            spec: data.spec.clone(),
            seed: data.seed,
            dt: data.spec.dt,
            n_train: data.train.len(),
            n_test: data.test.len(),
            traj_len: data.traj_len,
            normalization: data.normalization.clone(),
            resamples: data.resamples,
        },
    )
}

fn trajectories_csv(trajs: &[Trajectory]) -> Result<Vec<u8>> {
    let dim = trajs.first().map_or(0, |t| t.state_dim());
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["traj_id".to_string(), "step".to_string()];
    header.extend((1..=dim).map(|i| format!("x{i}")));
    let fmt_err = |e: csv::Error| Error::Format {
        what: "trajectory csv".into(),
        detail: e.to_string(),
    };
    w.write_record(&header).map_err(fmt_err)?;
    for (id, t) in trajs.iter().enumerate() {
        for (step, x) in t.states.iter().enumerate() {
            let mut row = vec![id.to_string(), step.to_string()];
            // `{}` on f64 prints the shortest string that parses back exactly
            row.extend(x.iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(fmt_err)?;
        }
    }
    w.into_inner().map_err(|e| Error::Format {
        what: "trajectory csv".into(),
        detail: e.to_string(),
    })
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta: Sidecar = persist::read_json(dir.join(SIDECAR_JSON))?;
    meta.spec.validate()?;
    let dim = meta.spec.state_dim();
    let read = |name: &str, expect: usize| -> Result<Vec<Trajectory>> {
        let trajs = read_trajectories(&dir.join(name), dim, meta.spec.dt, meta.spec.kind())?;
        if trajs.len() != expect {
            return Err(Error::Format {
                what: name.into(),
                detail: format!("expected {expect} trajectories, found {}", trajs.len()),
            });
        }
        Ok(trajs)
    };
    Ok(Dataset {
        train: read(TRAIN_CSV, meta.n_train)?,
        test: read(TEST_CSV, meta.n_test)?,
        spec: meta.spec,
        seed: meta.seed,
        traj_len: meta.traj_len,
        normalization: meta.normalization,
        resamples: meta.resamples,
    })
}

fn read_trajectories(
    path: &Path,
    dim: usize,
    dt: f64,
    system: super::SystemKind,
) -> Result<Vec<Trajectory>> {
    let bad = |detail: String| Error::Format {
        what: path.display().to_string(),
        detail,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => bad(format!("{other:?}")),
    })?;
    let headers = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if headers.len() != dim + 2 || &headers[0] != "traj_id" || &headers[1] != "step" {
        return Err(bad(format!("unexpected header {:?}", headers)));
    }
    let mut trajs: Vec<Trajectory> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let parse_usize = |s: &str| s.trim().parse::<usize>().map_err(|e| bad(format!("row {}: {e}", line + 2)));
        let id = parse_usize(&rec[0])?;
        let step = parse_usize(&rec[1])?;
        let x = (2..dim + 2)
            .map(|i| {
                rec[i]
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| bad(format!("row {}: {e}", line + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if id == trajs.len() && step == 0 {
            trajs.push(Trajectory {
                states: vec![x],
                dt,
                system,
            });
        } else if id + 1 == trajs.len() && step == trajs[id].len() {
            trajs[id].states.push(x);
        } else {
            return Err(bad(format!("row {}: out-of-order traj_id/step {id}/{step}", line + 2)));
        }
    }
    Ok(trajs)
}
