//! Differentiable volume rendering and the reconstruction loss.
//!
//! Per ray with samples `t_1 < ... < t_N` and segment lengths `d_i`:
//! `w_i = T_i (1 - exp(-sigma_i d_i))` with `T_i = exp(-sum_{j<i} sigma_j d_j)`
//! and color `sum_i w_i c_i` over a black background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::imaging::Image;
use crate::par;
use crate::scene::{Camera, Ray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    /// Bin centers of `N` equal bins of `[near, far]`.
    Midpoint,
    /// One uniform draw per bin.
    Stratified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub samples_per_ray: usize,
    pub sampling_mode: SamplingMode,
}

impl RenderOptions {
    pub fn new(samples_per_ray: usize, sampling_mode: SamplingMode) -> Result<Self> {
        if samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be >= 1".into()));
        }
        Ok(RenderOptions {
            samples_per_ray,
            sampling_mode,
        })
    }

    pub fn midpoint(samples_per_ray: usize) -> Result<Self> {
        Self::new(samples_per_ray, SamplingMode::Midpoint)
    }
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            samples_per_ray: 64,
            sampling_mode: SamplingMode::Midpoint,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    /// `t_{i+1} - t_i`, with `far - t_N` for the last sample.
    pub delta: Vec<f64>,
}

pub fn sample_ray<R: Rng + ?Sized>(ray: &Ray, n: usize, mode: SamplingMode, rng: &mut R) -> Result<RaySamples> {
    if n == 0 {
        return Err(Error::Invalid("a ray needs at least one sample".into()));
    }
    if !(ray.near <= ray.far) {
        return Err(Error::Invalid(format!("ray range [{}, {}] is empty", ray.near, ray.far)));
    }
    let bin = (ray.far - ray.near) / n as f64;
    let t: Vec<f64> = (0..n)
        .map(|i| {
            let off = match mode {
                SamplingMode::Midpoint => 0.5,
                SamplingMode::Stratified => rng.gen::<f64>(),
            };
            (ray.near + (i as f64 + off) * bin).min(ray.far)
        })
        .collect();
    let mut delta: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    delta.push(ray.far - t[n - 1]);
    Ok(RaySamples { t, delta })
}

/// Recorded compositing result for a batch of rays.
#[derive(Debug, Clone, Copy)]
pub struct Composite {
    /// `3 R` colors.
    pub rgb: NodeId,
    /// `R N` weights.
    pub weights: NodeId,
}

/// Composites `rays` rays of `n` samples each. `sigma` has length `R N`,
/// `rgb` length `3 R N` (interleaved) and `delta` holds `R N` constants.
pub fn composite(trace: &mut Trace, sigma: NodeId, rgb: NodeId, delta: &[f64], rays: usize, n: usize) -> Result<Composite> {
    let s = rays * n;
    if trace.node_len(sigma) != s || trace.node_len(rgb) != 3 * s || delta.len() != s {
        return Err(Error::Shape(format!(
            "composite of {rays}x{n} samples got sigma {}, rgb {}, delta {}",
            trace.node_len(sigma),
            trace.node_len(rgb),
            delta.len()
        )));
    }
    if let Some(d) = delta.iter().find(|d| !(**d >= 0.0)) {
        return Err(Error::Invalid(format!("negative segment length {d}")));
    }
    if let Some(v) = trace.value(sigma).iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Invalid(format!("negative density {v}")));
    }
    let d = trace.constant(delta.to_vec());
    let tau = trace.mul(sigma, d)?;
    let e = trace.neg(tau)?;
    let e = trace.exp(e)?;
    let one = trace.scalar_const(1.0);
    let alpha = trace.sub(one, e)?;

    // Exclusive per-ray prefix sum of tau: shift by one, then a
    // Hillis-Steele scan of log2(N) rounds.
    let mut acc = shift(trace, tau, s, n, 1)?;
    let mut k = 1;
    while k < n {
        let shifted = shift(trace, acc, s, n, k)?;
        acc = trace.add(acc, shifted)?;
        k *= 2;
    }
    let neg = trace.neg(acc)?;
    let transmittance = trace.exp(neg)?;
    let weights = trace.mul(transmittance, alpha)?;

    let rep3: Vec<u32> = (0..s as u32).flat_map(|j| [j, j, j]).collect();
    let w3 = trace.gather(weights, rep3)?;
    let contrib = trace.mul(w3, rgb)?;
    let target: Vec<u32> = (0..s).flat_map(|j| {
        let r = (j / n) as u32;
        [3 * r, 3 * r + 1, 3 * r + 2]
    })
    .collect();
    let out = trace.scatter_add(contrib, target, 3 * rays)?;
    Ok(Composite { rgb: out, weights })
}

/// `out[i] = x[i - k]` within each ray of `n` samples, zero where `i - k`
/// falls before the ray's first sample.
fn shift(trace: &mut Trace, x: NodeId, s: usize, n: usize, k: usize) -> Result<NodeId> {
    let mask: Vec<bool> = (0..s).map(|i| i % n >= k).collect();
    let idx: Vec<u32> = (0..s).map(|i| if i % n >= k { (i - k) as u32 } else { i as u32 }).collect();
    let g = trace.gather(x, idx)?;
    let zero = trace.scalar_const(0.0);
    trace.select(mask, g, zero)
}

/// Single-ray compositing on plain values: `(rgb, weights)`.
pub fn composite_values(sigma: &[f64], rgb: &[[f64; 3]], delta: &[f64]) -> Result<([f64; 3], Vec<f64>)> {
    let n = sigma.len();
    if rgb.len() != n || delta.len() != n || n == 0 {
        return Err(Error::Shape(format!(
            "composite needs matching non-empty inputs, got {n}, {}, {}",
            rgb.len(),
            delta.len()
        )));
    }
    let mut t = Trace::new();
    let s = t.constant(sigma.to_vec());
    let c = t.constant(rgb.iter().flatten().copied().collect());
    let out = composite(&mut t, s, c, delta, 1, n)?;
    let v = t.value(out.rgb).to_vec();
    Ok(([v[0], v[1], v[2]], t.value(out.weights).to_vec()))
}

/// Renders `rays` with the field parameters held in `params`, returning a
/// node of `3 R` colors. `rng` drives stratified sampling only.
pub fn render_rays<R: Rng + ?Sized>(
    trace: &mut Trace,
    field: &dyn RadianceField,
    params: NodeId,
    rays: &[Ray],
    opts: &RenderOptions,
    rng: &mut R,
) -> Result<NodeId> {
    let n = opts.samples_per_ray;
    let mut points = Vec::with_capacity(rays.len() * n);
    let mut delta = Vec::with_capacity(rays.len() * n);
    for ray in rays {
        let smp = sample_ray(ray, n, opts.sampling_mode, rng)?;
        points.extend(smp.t.iter().map(|&t| ray.at(t)));
        delta.extend(smp.delta);
    }
    let f = field.eval_points(trace, params, &points)?;
    Ok(composite(trace, f.sigma, f.rgb, &delta, rays.len(), n)?.rgb)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `sum_r |C_hat - C|^2`.
    #[default]
    Squared,
    /// `sum_r |C_hat - C|`, the un-squared Euclidean norm per ray.
    Norm,
}

/// Reconstruction loss between `3 R` rendered colors and targets.
pub fn recon_loss(trace: &mut Trace, colors: NodeId, targets: NodeId, kind: LossKind) -> Result<NodeId> {
    let len = trace.node_len(colors);
    if len != trace.node_len(targets) || len % 3 != 0 {
        return Err(Error::Shape(format!(
            "{} rendered values vs {} targets",
            len,
            trace.node_len(targets)
        )));
    }
    let diff = trace.sub(colors, targets)?;
    let sq = trace.mul(diff, diff)?;
    match kind {
        LossKind::Squared => trace.sum(sq),
        LossKind::Norm => {
            let rays = len / 3;
            let idx: Vec<u32> = (0..len as u32).map(|i| i / 3).collect();
            let per_ray = trace.scatter_add(sq, idx, rays)?;
            // sqrt has an infinite slope at 0; rays with zero residual
            // get a zero subgradient.
            let mask: Vec<bool> = trace.value(per_ray).iter().map(|&v| v > 0.0).collect();
            let one = trace.scalar_const(1.0);
            let safe = trace.select(mask.clone(), per_ray, one)?;
            let root = trace.sqrt(safe)?;
            let zero = trace.scalar_const(0.0);
            let norms = trace.select(mask, root, zero)?;
            trace.sum(norms)
        }
    }
}

const RENDER_CHUNK: usize = 512;

/// Full-resolution render of `cam` with plain parameter values. Output is
/// clamped into `[0, 1]`.
pub fn render_image(field: &dyn RadianceField, cam: &Camera, opts: &RenderOptions) -> Result<Image> {
    cam.validate()?;
    let rays = cam.rays();
    let chunks: Vec<&[Ray]> = rays.chunks(RENDER_CHUNK).collect();
    let parts = par::map(&chunks, |chunk| -> Result<Vec<f64>> {
        let mut t = Trace::new();
        let p = t.constant(field.params().to_vec());
        // Stratified rendering of a single image uses a fixed stream so
        // that evaluation stays reproducible.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = render_rays(&mut t, field, p, chunk, opts, &mut rng)?;
        Ok(t.value(c).to_vec())
    });
    let mut data = Vec::with_capacity(rays.len() * 3);
    for p in parts {
        data.extend(p?);
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rendered color".into()));
    }
    Image::from_clamped(cam.width, cam.height, data)
}

#[cfg(test)]
mod tests;
