//! Checkpoints: a JSON manifest with the layout table plus a flat
//! little-endian `f32` weight blob.

use serde::{Deserialize, Serialize};

use super::network::{Architecture, LayoutEntry, Network};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "stainvar-checkpoint/1";
pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub architecture: Architecture,
    pub parameter_count: usize,
    pub dtype: String,
    pub weights_file: String,
    pub layout: Vec<LayoutEntry>,
}

pub fn manifest_for(net: &Network) -> Manifest {
    Manifest {
        format: CHECKPOINT_FORMAT.into(),
        architecture: net.architecture().clone(),
        parameter_count: net.parameter_count(),
        dtype: "f32le".into(),
        weights_file: WEIGHTS_FILE.into(),
        layout: net.layout().to_vec(),
    }
}

pub fn encode_weights(net: &Network) -> Vec<u8> {
    net.params().iter().flat_map(|&p| (p as f32).to_le_bytes()).collect()
}

/// Rebuilds a network; the layout table must match the architecture.
pub fn decode(manifest: &Manifest, weights: &[u8]) -> Result<Network> {
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::InvalidArgument(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    if manifest.dtype != "f32le" {
        return Err(Error::InvalidArgument(format!("unsupported weight dtype {:?}", manifest.dtype)));
    }
    if manifest.layout != manifest.architecture.layout() {
        return Err(Error::ShapeMismatch("checkpoint layout does not match its architecture".into()));
    }
    if weights.len() != 4 * manifest.parameter_count {
        return Err(Error::ShapeMismatch(format!(
            "weight blob holds {} bytes, expected {}",
            weights.len(),
            4 * manifest.parameter_count
        )));
    }
    let params = weights.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Network::from_params(manifest.architecture.clone(), params)
}
