//! Benchmark systems, a fixed-step RK4 integrator and dataset generation.

mod dataset;

pub use dataset::{
    generate_dataset, read_dataset, write_dataset, Dataset, Normalization, SIDECAR_JSON, TEST_CSV,
    TRAIN_CSV,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemKind {
    DiscreteSpectrum,
    FluidFlow,
    Pendulum,
    Lorenz,
}

impl SystemKind {
    pub const ALL: [SystemKind; 4] = [
        SystemKind::DiscreteSpectrum,
        SystemKind::FluidFlow,
        SystemKind::Pendulum,
        SystemKind::Lorenz,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemKind::DiscreteSpectrum => "discrete-spectrum",
            SystemKind::FluidFlow => "fluid-flow",
            SystemKind::Pendulum => "pendulum",
            SystemKind::Lorenz => "lorenz",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            SystemKind::DiscreteSpectrum | SystemKind::Pendulum => 2,
            SystemKind::FluidFlow | SystemKind::Lorenz => 3,
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        SystemKind::ALL
            .into_iter()
            .find(|k| k.name() == key)
            .ok_or_else(|| {
                let valid: Vec<_> = SystemKind::ALL.iter().map(|k| k.name()).collect();
                Error::Config(format!(
                    "unknown system '{s}' (valid: {})",
                    valid.join(", ")
                ))
            })
    }
}

/// ODE right-hand side together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum System {
    /// `ẋ₁ = μx₁`, `ẋ₂ = λ(x₂ − x₁²)`
    DiscreteSpectrum { mu: f64, lambda: f64 },
    /// Reduced cylinder-wake model: `ẋ₁ = μx₁ − ωx₂ + A₁x₃`, `ẋ₂ = ωx₁ + μx₂ + A₂x₃`,
    /// `ẋ₃ = −λ(x₃ − x₁² − x₂²)`.
    FluidFlow {
        mu: f64,
        omega: f64,
        lambda: f64,
        a1: f64,
        a2: f64,
    },
    /// `ẋ₁ = x₂`, `ẋ₂ = −sin x₁`
    Pendulum,
    Lorenz { sigma: f64, rho: f64, beta: f64 },
}

impl System {
    pub fn standard(kind: SystemKind) -> System {
        match kind {
            SystemKind::DiscreteSpectrum => System::DiscreteSpectrum {
                mu: -0.05,
                lambda: -1.0,
            },
            SystemKind::FluidFlow => System::FluidFlow {
                mu: 0.1,
                omega: 1.0,
                lambda: 10.0,
                a1: -0.1,
                a2: -0.1,
            },
            SystemKind::Pendulum => System::Pendulum,
            SystemKind::Lorenz => System::Lorenz {
                sigma: 10.0,
                rho: 28.0,
                beta: 8.0 / 3.0,
            },
        }
    }

    pub fn kind(&self) -> SystemKind {
        match self {
            System::DiscreteSpectrum { .. } => SystemKind::DiscreteSpectrum,
            System::FluidFlow { .. } => SystemKind::FluidFlow,
            System::Pendulum => SystemKind::Pendulum,
            System::Lorenz { .. } => SystemKind::Lorenz,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.kind().state_dim()
    }

    fn eval(&self, x: &[f64], out: &mut [f64]) {
        match *self {
            System::DiscreteSpectrum { mu, lambda } => {
                out[0] = mu * x[0];
                out[1] = lambda * (x[1] - x[0] * x[0]);
            }
            System::FluidFlow {
                mu,
                omega,
                lambda,
                a1,
                a2,
            } => {
                out[0] = mu * x[0] - omega * x[1] + a1 * x[2];
                out[1] = omega * x[0] + mu * x[1] + a2 * x[2];
                out[2] = -lambda * (x[2] - x[0] * x[0] - x[1] * x[1]);
            }
            System::Pendulum => {
                out[0] = x[1];
                out[1] = -x[0].sin();
            }
            System::Lorenz { sigma, rho, beta } => {
                out[0] = sigma * (x[1] - x[0]);
                out[1] = x[0] * (rho - x[2]) - x[1];
                out[2] = x[0] * x[1] - beta * x[2];
            }
        }
    }
}

/// A system plus the sampling choices that turn it into data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    pub system: System,
    pub dt: f64,
    /// Per-dimension `[lo, hi]` interval for initial conditions.
    pub init_box: Vec<[f64; 2]>,
    /// Steps integrated and discarded before recording starts.
    #[serde(default)]
    pub burn_in: usize,
}

impl SystemSpec {
    pub fn standard(kind: SystemKind) -> SystemSpec {
        let (dt, init_box, burn_in) = match kind {
            SystemKind::DiscreteSpectrum => (0.02, vec![[-0.5, 0.5]; 2], 0),
            SystemKind::Pendulum => (0.02, vec![[-3.1, 3.1], [-2.0, 2.0]], 0),
            SystemKind::FluidFlow => (0.02, vec![[-1.1, 1.1], [-1.1, 1.1], [0.0, 2.4]], 0),
            SystemKind::Lorenz => (0.01, vec![[-20.0, 20.0], [-20.0, 20.0], [10.0, 40.0]], 500),
        };
        SystemSpec {
            system: System::standard(kind),
            dt,
            init_box,
            burn_in,
        }
    }

    pub fn kind(&self) -> SystemKind {
        self.system.kind()
    }

    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.init_box.len() != self.state_dim() {
            return Err(Error::Config(format!(
                "init_box has {} intervals but {} has {} states",
                self.init_box.len(),
                self.kind(),
                self.state_dim()
            )));
        }
        if self.init_box.iter().any(|[lo, hi]| !(lo <= hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(Error::Config("init_box intervals must be finite with lo <= hi".into()));
        }
        Ok(())
    }
}

/// A sampled state sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub dt: f64,
    pub system: SystemKind,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }
}

fn check_dim(spec: &SystemSpec, x: &[f64]) -> Result<()> {
    if x.len() != spec.state_dim() {
        return Err(Error::Contract(format!(
            "{} state has dimension {}, got {}",
            spec.kind(),
            spec.state_dim(),
            x.len()
        )));
    }
    Ok(())
}

pub fn vector_field(spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec, x)?;
    let mut out = vec![0.0; x.len()];
    spec.system.eval(x, &mut out);
    Ok(out)
}

/// One classical RK4 step of size `spec.dt`.
pub fn rk4_step(spec: &SystemSpec, x: &[f64]) -> Result<Vec<f64>> {
    check_dim(spec, x)?;
    let next = rk4_raw(&spec.system, spec.dt, x);
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 1 });
    }
    Ok(next)
}

fn rk4_raw(sys: &System, dt: f64, x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    sys.eval(x, &mut k1);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k1[i];
    }
    sys.eval(&tmp, &mut k2);
    for i in 0..n {
        tmp[i] = x[i] + 0.5 * dt * k2[i];
    }
    sys.eval(&tmp, &mut k3);
    for i in 0..n {
        tmp[i] = x[i] + dt * k3[i];
    }
    sys.eval(&tmp, &mut k4);
    (0..n)
        .map(|i| x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrates `len − 1` steps from `x0`, returning all `len` states.
///
/// The divergence error carries the index of the first non-finite state.
pub fn integrate(spec: &SystemSpec, x0: &[f64], len: usize) -> Result<Trajectory> {
    check_dim(spec, x0)?;
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence { step: 0 });
    }
    let mut states = Vec::with_capacity(len);
    let mut x = x0.to_vec();
    for step in 0..len {
        if step > 0 {
            x = rk4_raw(&spec.system, spec.dt, &x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
        }
        states.push(x.clone());
    }
    Ok(Trajectory {
        states,
        dt: spec.dt,
        system: spec.kind(),
    })
}
