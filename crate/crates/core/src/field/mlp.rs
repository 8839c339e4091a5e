use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{activate, Backend, FieldSamples, RadianceField};
use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};

pub const MLP_HIDDEN: usize = 64;
const OUT: usize = 4;

/// `[p, sin(2^l pi p), cos(2^l pi p) for l in 0..levels]`, length `3 + 6 L`.
pub fn positional_encoding(p: [f64; 3], levels: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(3 + 6 * levels);
    out.extend_from_slice(&p);
    for l in 0..levels {
        let f = (1u64 << l) as f64 * PI;
        out.extend(p.iter().map(|x| (f * x).sin()));
        out.extend(p.iter().map(|x| (f * x).cos()));
    }
    out
}

/// Positional encoding followed by two ReLU layers of width 64 and a linear
/// output of (sigma_raw, r, g, b).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyMlpField {
    levels: usize,
    params: Vec<f64>,
}

struct Layout {
    input: usize,
}

impl Layout {
    fn shapes(&self) -> [(usize, usize); 3] {
        [(self.input, MLP_HIDDEN), (MLP_HIDDEN, MLP_HIDDEN), (MLP_HIDDEN, OUT)]
    }

    fn count(&self) -> usize {
        self.shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

impl TinyMlpField {
    pub fn param_count(levels: usize) -> usize {
        Layout { input: 3 + 6 * levels }.count()
    }

    /// Weights uniform in `+-1/sqrt(fan_in)`, biases zero except the
    /// density bias, which starts at -1 like the grid backend.
    pub fn new(levels: usize, seed: u64) -> Self {
        let layout = Layout { input: 3 + 6 * levels };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(layout.count());
        for (layer, (fan_in, fan_out)) in layout.shapes().into_iter().enumerate() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            params.extend((0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)));
            let mut bias = vec![0.0; fan_out];
            if layer == 2 {
                bias[0] = -1.0;
            }
            params.extend(bias);
        }
        TinyMlpField { levels, params }
    }

    pub fn from_params(levels: usize, params: Vec<f64>) -> Result<Self> {
        let need = Self::param_count(levels);
        if params.len() != need {
            return Err(Error::Shape(format!("mlp L={levels} needs {need} parameters, got {}", params.len())));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("mlp parameter".into()));
        }
        Ok(TinyMlpField { levels, params })
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn input_width(&self) -> usize {
        3 + 6 * self.levels
    }
}

impl RadianceField for TinyMlpField {
    fn backend(&self) -> Backend {
        Backend::Mlp
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "mlp expects {} parameters, got {}",
                self.params.len(),
                params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        let s = points.len();
        let layout = Layout { input: self.input_width() };
        let enc: Vec<f64> = points.iter().flat_map(|&p| positional_encoding(p, self.levels)).collect();
        let mut h = trace.constant(enc);
        let mut offset = 0usize;
        for (layer, (fan_in, fan_out)) in layout.shapes().into_iter().enumerate() {
            let w_idx: Arc<[u32]> = (offset..offset + fan_in * fan_out).map(|i| i as u32).collect();
            offset += fan_in * fan_out;
            let b_idx: Vec<u32> = (0..s * fan_out).map(|i| (offset + i % fan_out) as u32).collect();
            offset += fan_out;
            let w = trace.gather(params, w_idx)?;
            let b = trace.gather(params, b_idx)?;
            let z = trace.matmul(h, w, s, fan_in, fan_out)?;
            let z = trace.add(z, b)?;
            h = if layer < 2 { trace.relu(z)? } else { z };
        }
        activate(trace, h, s, false)
    }
}
