//! Radiance-field backends. Both map a point of the scene cube `[-1, 1]^3`
//! to a density `sigma >= 0` and a view-independent color, and both record
//! their evaluation on a [`Trace`] so the renderer, trainer and poisoner
//! stay backend-agnostic.

mod checkpoint;
mod grid;
mod mlp;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointHeader};
pub use grid::{GridActivation, VoxelGridField};
pub use mlp::{positional_encoding, TinyMlpField, MLP_HIDDEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Grid,
    Mlp,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grid" => Ok(Backend::Grid),
            "mlp" => Ok(Backend::Mlp),
            other => Err(Error::Config(format!("unknown backend `{other}`"))),
        }
    }
}

/// Recorded field outputs for `S` points: `sigma` has length `S`, `rgb`
/// has length `3 S` (interleaved).
#[derive(Debug, Clone, Copy)]
pub struct FieldSamples {
    pub sigma: NodeId,
    pub rgb: NodeId,
}

pub trait RadianceField: Send + Sync {
    fn backend(&self) -> Backend;

    /// Flat parameter vector (the optimizer's view of the field).
    fn params(&self) -> &[f64];

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    fn num_params(&self) -> usize {
        self.params().len()
    }

    /// Records the evaluation of points known to lie inside the cube.
    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples>;

    /// Records `(sigma, rgb)` at every point using the parameter node
    /// `params`. Points outside the cube yield zero density and black with
    /// zero gradient.
    fn eval_points(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        if trace.node_len(params) != self.num_params() {
            return Err(Error::Shape(format!(
                "parameter node has {} values, field expects {}",
                trace.node_len(params),
                self.num_params()
            )));
        }
        if let Some(p) = points.iter().find(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::NonFinite(format!("query point {p:?}")));
        }
        let inside: Vec<u32> = points
            .iter()
            .enumerate()
            .filter(|(_, p)| in_cube(p))
            .map(|(i, _)| i as u32)
            .collect();
        let s = points.len();
        if inside.len() == s {
            return self.eval_inside(trace, params, points);
        }
        if inside.is_empty() {
            return Ok(FieldSamples {
                sigma: trace.constant(vec![0.0; s]),
                rgb: trace.constant(vec![0.0; 3 * s]),
            });
        }
        let pts: Vec<[f64; 3]> = inside.iter().map(|&i| points[i as usize]).collect();
        let inner = self.eval_inside(trace, params, &pts)?;
        let idx3: Vec<u32> = inside.iter().flat_map(|&i| [3 * i, 3 * i + 1, 3 * i + 2]).collect();
        Ok(FieldSamples {
            sigma: trace.scatter_add(inner.sigma, inside, s)?,
            rgb: trace.scatter_add(inner.rgb, idx3, 3 * s)?,
        })
    }

    /// Evaluates a single point with the field's current parameters.
    fn eval_point(&self, p: [f64; 3]) -> Result<(f64, [f64; 3])> {
        let mut t = Trace::new();
        let params = t.constant(self.params().to_vec());
        let out = self.eval_points(&mut t, params, &[p])?;
        let sigma = t.value(out.sigma)[0];
        let rgb = t.value(out.rgb);
        Ok((sigma, [rgb[0], rgb[1], rgb[2]]))
    }
}

/// Closed cube `[-1, 1]^3`.
pub fn in_cube(p: &[f64; 3]) -> bool {
    p.iter().all(|c| (-1.0..=1.0).contains(c))
}

/// Either backend, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyField {
    Grid(VoxelGridField),
    Mlp(TinyMlpField),
}

impl RadianceField for AnyField {
    fn backend(&self) -> Backend {
        match self {
            AnyField::Grid(f) => f.backend(),
            AnyField::Mlp(f) => f.backend(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            AnyField::Grid(f) => f.params(),
            AnyField::Mlp(f) => f.params(),
        }
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            AnyField::Grid(f) => f.set_params(params),
            AnyField::Mlp(f) => f.set_params(params),
        }
    }

    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        match self {
            AnyField::Grid(f) => f.eval_inside(trace, params, points),
            AnyField::Mlp(f) => f.eval_inside(trace, params, points),
        }
    }
}

/// Splits a raw `[S x 4]` buffer (sigma, r, g, b per point) into activated
/// outputs.
pub(crate) fn activate(trace: &mut Trace, raw: NodeId, s: usize, linear: bool) -> Result<FieldSamples> {
    let sig_idx: Vec<u32> = (0..s as u32).map(|j| 4 * j).collect();
    let rgb_idx: Vec<u32> = (0..s as u32).flat_map(|j| [4 * j + 1, 4 * j + 2, 4 * j + 3]).collect();
    let sr = trace.gather(raw, sig_idx)?;
    let cr = trace.gather(raw, rgb_idx)?;
    if linear {
        Ok(FieldSamples {
            sigma: trace.relu(sr)?,
            rgb: trace.clamp(cr, 0.0, 1.0)?,
        })
    } else {
        Ok(FieldSamples {
            sigma: trace.softplus(sr)?,
            rgb: trace.sigmoid(cr)?,
        })
    }
}
