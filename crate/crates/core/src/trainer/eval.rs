use crate::dynamics::{Normalization, Trajectory};
use crate::error::Result;
use crate::koopnet::{one_step, DelaySeries, KoopmanNet};

/// Rows evaluated per forward pass.
const CHUNK: usize = 1024;

/// Squared one-step errors `‖x_{k+1} − x̂_{k+1}‖²` for `k = r−1 … len−2`, with
/// `x̂` the last block of the decoded prediction, mapped through `map`.
fn one_step_errors(
    net: &KoopmanNet,
    traj: &Trajectory,
    truth: &Trajectory,
    map: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<Vec<f64>> {
    let r = net.arch.order;
    let n = traj.state_dim();
    if traj.len() <= r {
        return Ok(vec![]);
    }
    let series = DelaySeries::new(traj, r)?;
    let rows = series.len() - 1;
    let dim = series.dim;
    let mut out = Vec::with_capacity(rows);
    for start in (0..rows).step_by(CHUNK) {
        let end = (start + CHUNK).min(rows);
        let pred = one_step(net, &series.rows[start * dim..end * dim], end - start)?;
        for (i, p) in pred.chunks_exact(dim).enumerate() {
            let x_hat = map(&p[dim - n..]);
            let x = &truth.states[r + start + i];
            out.push(x.iter().zip(&x_hat).map(|(a, b)| (a - b) * (a - b)).sum());
        }
    }
    Ok(out)
}

fn mean_over(
    net: &KoopmanNet,
    trajs: &[Trajectory],
    truths: &[Trajectory],
    map: &dyn Fn(&[f64]) -> Vec<f64>,
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for (t, x) in trajs.iter().zip(truths) {
        let e = one_step_errors(net, t, x, map)?;
        count += e.len();
        sum += e.iter().sum::<f64>();
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Mean squared one-step error over all valid steps of the (normalized) test
/// trajectories.
pub fn eval_one_step_mse(net: &KoopmanNet, test: &[Trajectory]) -> Result<f64> {
    mean_over(net, test, test, &|x| x.to_vec())
}

/// Same error in raw units: inputs are normalized, predictions are mapped back
/// and compared with the raw trajectories.
pub fn eval_one_step_mse_raw(net: &KoopmanNet, raw: &[Trajectory], norm: &Normalization) -> Result<f64> {
    let normalized: Vec<Trajectory> = raw.iter().map(|t| norm.apply_traj(t)).collect();
    mean_over(net, &normalized, raw, &|x| norm.invert(x))
}

/// Per-step L₂ norm of the one-step prediction error along one trajectory;
/// `len − order` entries.
pub fn eval_trajectory_l2(net: &KoopmanNet, traj: &Trajectory) -> Result<Vec<f64>> {
    Ok(one_step_errors(net, traj, traj, &|x| x.to_vec())?
        .into_iter()
        .map(f64::sqrt)
        .collect())
}
