//! Koopman representations of nonlinear dynamics: a spectral extraction stage
//! over Hankel matrices that fixes the latent size, delay order and target
//! eigenvalues, followed by staged training of an autoencoder with
//! state-dependent eigenvalue heads.

pub mod dynamics;
pub mod error;
pub mod koopnet;
pub mod numcore;
pub mod persist;
pub mod spectral;
pub mod trainer;

pub use dynamics::{Dataset, SystemKind, SystemSpec, Trajectory};
pub use error::{Error, Result};
pub use koopnet::{KoopmanNet, NetConfig};
pub use spectral::{SpectralConfig, SpectralOptions};
pub use trainer::{ExperimentRecord, Mode, TrainConfig};
