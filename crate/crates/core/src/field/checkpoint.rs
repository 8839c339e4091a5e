//! Checkpoint file: one JSON header line, then the parameters as
//! little-endian f64.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnyField, GridActivation, RadianceField, TinyMlpField, VoxelGridField};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum CheckpointHeader {
    Grid {
        resolution: usize,
        activation: GridActivation,
        parameter_count: usize,
    },
    Mlp {
        levels: usize,
        parameter_count: usize,
    },
}

impl CheckpointHeader {
    pub fn parameter_count(&self) -> usize {
        match self {
            CheckpointHeader::Grid { parameter_count, .. } | CheckpointHeader::Mlp { parameter_count, .. } => {
                *parameter_count
            }
        }
    }
}

pub fn write_checkpoint(field: &AnyField) -> Result<Vec<u8>> {
    let header = match field {
        AnyField::Grid(g) => CheckpointHeader::Grid {
            resolution: g.resolution(),
            activation: g.activation(),
            parameter_count: g.num_params(),
        },
        AnyField::Mlp(m) => CheckpointHeader::Mlp {
            levels: m.levels(),
            parameter_count: m.num_params(),
        },
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for v in field.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<AnyField> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let blob = &bytes[nl + 1..];
    let n = header.parameter_count();
    if blob.len() != n * 8 {
        return Err(Error::Checkpoint(format!(
            "header announces {n} parameters, payload holds {} bytes",
            blob.len()
        )));
    }
    let params: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(match header {
        CheckpointHeader::Grid {
            resolution, activation, ..
        } => AnyField::Grid(VoxelGridField::from_params(resolution, activation, params)?),
        CheckpointHeader::Mlp { levels, .. } => AnyField::Mlp(TinyMlpField::from_params(levels, params)?),
    })
}

pub fn save_checkpoint(field: &AnyField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(field)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyField> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
