//! Optimizers and standalone field fitting.
//!
//! Every update exists twice: a numeric version used for plain training
//! and a recorded version used inside the poisoner, where the update has to
//! be differentiated again. Both evaluate the same floating-point
//! expressions in the same order, so a recorded run with an unperturbed
//! dataset reproduces plain training bit for bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::imaging::Image;
use crate::render::{recon_loss, render_rays, LossKind, RenderOptions};
use crate::scene::{Camera, Ray};
use crate::warp::PixelRef;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

fn adam_corrections(step: u64) -> (f64, f64) {
    let t = step as i32;
    (1.0 / (1.0 - ADAM_BETA1.powi(t)), 1.0 / (1.0 - ADAM_BETA2.powi(t)))
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        OptimizerState {
            kind,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters vs {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if let Some(g) = grads.iter().find(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient component {g}")));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= g * lr;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::Shape("optimizer state does not match parameters".into()));
                }
                let (c1, c2) = adam_corrections(self.step);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = self.m[i] * ADAM_BETA1 + g * (1.0 - ADAM_BETA1);
                    self.v[i] = self.v[i] * ADAM_BETA2 + (g * g) * (1.0 - ADAM_BETA2);
                    let mhat = self.m[i] * c1;
                    let vhat = self.v[i] * c2;
                    params[i] -= mhat / (vhat.sqrt() + ADAM_EPS) * lr;
                }
            }
        }
        Ok(())
    }

    /// Moves the state onto `trace` for recorded updates.
    pub fn record(&self, trace: &mut Trace) -> RecordedOptimizer {
        let (m, v) = if self.kind == OptimizerKind::Adam {
            (Some(trace.constant(self.m.clone())), Some(trace.constant(self.v.clone())))
        } else {
            (None, None)
        };
        RecordedOptimizer {
            kind: self.kind,
            m,
            v,
            step: self.step,
        }
    }
}

/// Optimizer state whose moments live on a trace.
#[derive(Debug, Clone)]
pub struct RecordedOptimizer {
    kind: OptimizerKind,
    m: Option<NodeId>,
    v: Option<NodeId>,
    step: u64,
}

impl RecordedOptimizer {
    /// Records `theta - lr * update(grad)` and returns the new parameters.
    pub fn step(&mut self, trace: &mut Trace, theta: NodeId, grad: NodeId, lr: f64) -> Result<NodeId> {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                let d = trace.scale(grad, lr)?;
                trace.sub(theta, d)
            }
            OptimizerKind::Adam => {
                let (m, v) = (self.m.expect("adam moments"), self.v.expect("adam moments"));
                let (c1, c2) = adam_corrections(self.step);
                let a = trace.scale(m, ADAM_BETA1)?;
                let b = trace.scale(grad, 1.0 - ADAM_BETA1)?;
                let m = trace.add(a, b)?;
                let a = trace.scale(v, ADAM_BETA2)?;
                let g2 = trace.mul(grad, grad)?;
                let b = trace.scale(g2, 1.0 - ADAM_BETA2)?;
                let v = trace.add(a, b)?;
                let mhat = trace.scale(m, c1)?;
                let vhat = trace.scale(v, c2)?;
                let root = trace.sqrt(vhat)?;
                let eps = trace.scalar_const(ADAM_EPS);
                let denom = trace.add(root, eps)?;
                let upd = trace.div(mhat, denom)?;
                let upd = trace.scale(upd, lr)?;
                self.m = Some(m);
                self.v = Some(v);
                trace.sub(theta, upd)
            }
        }
    }

    /// Reads the moments back into a numeric state.
    pub fn finish(&self, trace: &mut Trace) -> OptimizerState {
        let read = |trace: &mut Trace, n: Option<NodeId>| n.map(|n| trace.value(n).to_vec()).unwrap_or_default();
        OptimizerState {
            kind: self.kind,
            m: read(trace, self.m),
            v: read(trace, self.v),
            step: self.step,
        }
    }
}

/// A batch of training pixels plus the seed of its stratified-sampling
/// stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pixels: Vec<PixelRef>,
    pub jitter_seed: u64,
}

/// Draws pixels uniformly with replacement over every pixel of every view.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    rng: ChaCha8Rng,
    dims: Vec<(usize, usize)>,
    total: usize,
}

impl BatchSampler {
    pub fn new(images: &[Image], seed: u64) -> Self {
        let dims: Vec<(usize, usize)> = images.iter().map(|i| (i.width(), i.height())).collect();
        let total = dims.iter().map(|(w, h)| w * h).sum();
        BatchSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dims,
            total,
        }
    }

    /// Sampler on an independent ChaCha stream of the same seed.
    pub fn with_stream(images: &[Image], seed: u64, stream: u64) -> Self {
        let mut s = Self::new(images, seed);
        s.rng.set_stream(stream);
        s
    }

    pub fn next_batch(&mut self, size: usize) -> Batch {
        let mut pixels = Vec::with_capacity(size);
        for _ in 0..size {
            let mut k = self.rng.gen_range(0..self.total);
            let mut image = 0;
            while k >= self.dims[image].0 * self.dims[image].1 {
                k -= self.dims[image].0 * self.dims[image].1;
                image += 1;
            }
            let w = self.dims[image].0;
            pixels.push(PixelRef {
                image,
                u: k % w,
                v: k / w,
            });
        }
        Batch {
            pixels,
            jitter_seed: self.rng.gen(),
        }
    }
}

/// Checks that every view has a camera of the same size.
pub fn check_views(images: &[Image], cameras: &[Camera]) -> Result<()> {
    if images.is_empty() {
        return Err(Error::Invalid("at least one training view is required".into()));
    }
    if images.len() != cameras.len() {
        return Err(Error::Shape(format!("{} images vs {} cameras", images.len(), cameras.len())));
    }
    for (i, (img, cam)) in images.iter().zip(cameras).enumerate() {
        cam.validate()?;
        if img.width() != cam.width || img.height() != cam.height {
            return Err(Error::Shape(format!(
                "view {i}: image {}x{} vs camera {}x{}",
                img.width(),
                img.height(),
                cam.width,
                cam.height
            )));
        }
    }
    Ok(())
}

pub fn batch_rays(cameras: &[Camera], pixels: &[PixelRef]) -> Result<Vec<Ray>> {
    pixels
        .iter()
        .map(|p| cameras[p.image].pixel_ray(p.u as f64, p.v as f64))
        .collect()
}

pub fn batch_colors(images: &[Image], pixels: &[PixelRef]) -> Vec<f64> {
    pixels.iter().flat_map(|p| images[p.image].pixel(p.u, p.v)).collect()
}

/// Records the reconstruction loss of one batch: renders `rays` with
/// `params` and compares against the `targets` node.
pub fn record_batch_loss(
    trace: &mut Trace,
    field: &dyn RadianceField,
    params: NodeId,
    rays: &[Ray],
    targets: NodeId,
    jitter_seed: u64,
    render: &RenderOptions,
    loss: LossKind,
) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let colors = render_rays(trace, field, params, rays, render, &mut rng)?;
    recon_loss(trace, colors, targets, loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub batch_rays: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// The learning rate decays exponentially to `lr * final_lr_fraction`.
    pub final_lr_fraction: f64,
    pub render: RenderOptions,
    pub loss: LossKind,
    pub seed: u64,
    pub deterministic: bool,
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_rays == 0 {
            return Err(Error::Config("batch_rays must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if !(self.final_lr_fraction > 0.0 && self.final_lr_fraction <= 1.0) {
            return Err(Error::Config("final_lr_fraction must be in (0, 1]".into()));
        }
        if self.render.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.final_lr_fraction == 1.0 || self.steps == 0 {
            return self.lr;
        }
        self.lr * self.final_lr_fraction.powf(step as f64 / self.steps as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub losses: Vec<f64>,
}

/// One numeric training step against the colors of `targets`. Returns the
/// batch loss before the update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    field: &dyn RadianceField,
    params: &mut [f64],
    state: &mut OptimizerState,
    targets: &[Image],
    cameras: &[Camera],
    batch: &Batch,
    lr: f64,
    render: &RenderOptions,
    loss: LossKind,
    deterministic: bool,
) -> Result<f64> {
    let mut t = Trace::with_determinism(deterministic);
    let p = t.leaf(params.to_vec());
    let rays = batch_rays(cameras, &batch.pixels)?;
    let tg = t.constant(batch_colors(targets, &batch.pixels));
    let l = record_batch_loss(&mut t, field, p, &rays, tg, batch.jitter_seed, render, loss)?;
    let value = t.scalar(l);
    let grads = t.backward(l)?.get_or_zeros(p);
    state.step(params, &grads, lr)?;
    Ok(value)
}

/// Fits `field` to the views. Returns the per-step batch losses.
pub fn fit(field: &mut dyn RadianceField, images: &[Image], cameras: &[Camera], cfg: &FitConfig) -> Result<FitResult> {
    cfg.validate()?;
    check_views(images, cameras)?;
    let mut params = field.params().to_vec();
    let mut state = OptimizerState::new(cfg.optimizer, params.len());
    let mut sampler = BatchSampler::new(images, cfg.seed);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sampler.next_batch(cfg.batch_rays);
        let loss = train_step(
            field,
            &mut params,
            &mut state,
            images,
            cameras,
            &batch,
            cfg.lr_at(step),
            &cfg.render,
            cfg.loss,
            cfg.deterministic,
        )
        .map_err(|e| divergence(step, e))?;
        if !loss.is_finite() || params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence {
                epoch: step,
                detail: format!("training loss {loss}"),
            });
        }
        losses.push(loss);
    }
    field.set_params(&params)?;
    Ok(FitResult { losses })
}

fn divergence(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Divergence { epoch: step, detail },
        other => other,
    }
}

#[cfg(test)]
mod tests;
