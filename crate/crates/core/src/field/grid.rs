use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{activate, Backend, FieldSamples, RadianceField};
use crate::autodiff::{InterpTable, NodeId, Trace};
use crate::error::{Error, Result};

/// How raw grid values map to density and color.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridActivation {
    /// `softplus` density, `sigmoid` color: the trainable parameterization.
    Softplus,
    /// `relu` density, color clamped to [0, 1]: raw values are the physical
    /// quantities. Used for synthetic ground truth.
    Linear,
}

/// Dense `R^3` grid over `[-1, 1]^3` with 4 raw values per node
/// (sigma, r, g, b), trilinearly interpolated before activation.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGridField {
    resolution: usize,
    activation: GridActivation,
    params: Vec<f64>,
}

pub const GRID_INIT_SIGMA_RAW: f64 = -1.0;

impl VoxelGridField {
    /// Trainable grid: `sigma_raw = -1` (mostly transparent), color raw 0.
    pub fn new(resolution: usize) -> Result<Self> {
        Self::check_resolution(resolution)?;
        let n = resolution.pow(3);
        let mut params = vec![0.0; n * 4];
        for node in 0..n {
            params[node * 4] = GRID_INIT_SIGMA_RAW;
        }
        Ok(VoxelGridField {
            resolution,
            activation: GridActivation::Softplus,
            params,
        })
    }

    pub fn from_params(resolution: usize, activation: GridActivation, params: Vec<f64>) -> Result<Self> {
        Self::check_resolution(resolution)?;
        if params.len() != resolution.pow(3) * 4 {
            return Err(Error::Shape(format!(
                "grid {resolution}^3 needs {} parameters, got {}",
                resolution.pow(3) * 4,
                params.len()
            )));
        }
        Ok(VoxelGridField {
            resolution,
            activation,
            params,
        })
    }

    fn check_resolution(r: usize) -> Result<()> {
        if r < 2 {
            return Err(Error::Config(format!("grid resolution must be >= 2, got {r}")));
        }
        if r.pow(3) * 4 > u32::MAX as usize {
            return Err(Error::Config(format!("grid resolution {r} too large")));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn activation(&self) -> GridActivation {
        self.activation
    }

    /// Node index of integer grid coordinates.
    pub fn node(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.resolution + y) * self.resolution + x
    }

    /// World position of a grid node.
    pub fn node_position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        let s = 2.0 / (self.resolution - 1) as f64;
        [-1.0 + x as f64 * s, -1.0 + y as f64 * s, -1.0 + z as f64 * s]
    }

    /// Raw values of one node.
    pub fn node_raw_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.params[node * 4..node * 4 + 4]
    }

    /// Lower corner and fractional offset of `p` along each axis.
    fn cell(&self, p: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
        let r = self.resolution;
        let mut lo = [0usize; 3];
        let mut fr = [0.0; 3];
        for a in 0..3 {
            let g = (p[a] + 1.0) * 0.5 * (r - 1) as f64;
            let l = (g.floor().max(0.0) as usize).min(r - 2);
            lo[a] = l;
            fr[a] = g - l as f64;
        }
        (lo, fr)
    }
}

impl RadianceField for VoxelGridField {
    fn backend(&self) -> Backend {
        Backend::Grid
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "grid expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        let s = points.len();
        let mut index = Vec::with_capacity(s * 8);
        let mut weight = Vec::with_capacity(s * 8);
        for p in points {
            let (lo, fr) = self.cell(p);
            for corner in 0..8 {
                let (dx, dy, dz) = (corner & 1, (corner >> 1) & 1, corner >> 2);
                let w = (if dx == 1 { fr[0] } else { 1.0 - fr[0] })
                    * (if dy == 1 { fr[1] } else { 1.0 - fr[1] })
                    * (if dz == 1 { fr[2] } else { 1.0 - fr[2] });
                index.push(self.node(lo[0] + dx, lo[1] + dy, lo[2] + dz) as u32);
                weight.push(w);
            }
        }
        let table = InterpTable { index, weight, taps: 8, channels: 4 };
        let raw = trace.interp(params, Arc::new(table))?;
        activate(trace, raw, s, self.activation == GridActivation::Linear)
    }
}
