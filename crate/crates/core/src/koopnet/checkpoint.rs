//! Binary checkpoint: magic, little-endian header length, JSON header, then
//! the raw parameters as little-endian f64.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Architecture, KoopmanNet};
use crate::error::{Error, Result};
use crate::persist::write_atomic;
use crate::spectral::SpectralConfig;

const MAGIC: &[u8; 8] = b"KOOPNET1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub arch: Architecture,
    pub spectral: Option<SpectralConfig>,
    pub seed: u64,
    /// Last completed phase.
    pub phase: String,
    pub num_params: usize,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    net: &KoopmanNet,
    spectral: Option<&SpectralConfig>,
    seed: u64,
    phase: &str,
) -> Result<()> {
    let meta = CheckpointMeta {
        arch: net.arch.clone(),
        spectral: spectral.cloned(),
        seed,
        phase: phase.to_string(),
        num_params: net.params.len(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * net.params.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for p in &net.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    write_atomic(path, &buf)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(KoopmanNet, CheckpointMeta)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |detail: String| Error::Format {
        what: path.display().to_string(),
        detail,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated header".into()))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
    let raw = &bytes[16 + hlen..];
    if raw.len() != 8 * meta.num_params {
        return Err(bad(format!(
            "expected {} parameters, found {} bytes",
            meta.num_params,
            raw.len()
        )));
    }
    let mut net = KoopmanNet::zeros(meta.arch.clone())?;
    if net.params.len() != meta.num_params {
        return Err(bad(format!(
            "architecture needs {} parameters, header says {}",
            net.params.len(),
            meta.num_params
        )));
    }
    for (p, c) in net.params.iter_mut().zip(raw.chunks_exact(8)) {
        *p = f64::from_le_bytes(c.try_into().unwrap());
    }
    Ok((net, meta))
}
