//! The bi-level attack.
//!
//! Each epoch trains the field for `k` steps on the perturbed views while
//! recording the updates, renders a batch of rays with the trained
//! parameters against the clean views, and backpropagates that outer loss
//! through the recorded updates into the perturbation. The perturbation
//! then takes a normalized gradient ascent step and is projected back onto
//! the L-inf ball of radius `rho`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Trace};
use crate::error::{Error, Result};
use crate::field::RadianceField;
use crate::imaging::{FlowField, Image};
use crate::render::{LossKind, RenderOptions};
use crate::scene::Camera;
use crate::train::{
    batch_colors, batch_rays, check_views, record_batch_loss, train_step, Batch, BatchSampler, OptimizerKind,
    OptimizerState, RecordedOptimizer,
};
use crate::warp::{apply_additive, apply_flow, project_slice, record_additive_targets, record_warped_targets, PerturbKind};

/// Floor of the mean absolute gradient in the step normalization.
pub const GRAD_NORM_FLOOR: f64 = 1e-12;

const EVAL_STREAM: u64 = 0x6576_616c;
const INIT_STREAM: u64 = 0x696e_6974;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaInit {
    #[default]
    Zero,
    /// Uniform in `[-rho / 10, rho / 10]`.
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoisonConfig {
    /// Budget: pixels for flows, color units for additive offsets.
    pub rho: f64,
    /// Inner training steps per epoch.
    pub k: usize,
    /// Epochs.
    pub m: usize,
    pub inner_lr: f64,
    pub inner_optimizer: OptimizerKind,
    pub alpha_prime_base: f64,
    pub batch_rays: usize,
    pub eval_rays: usize,
    /// Number of trailing inner steps differentiated through; `None`
    /// unrolls all `k`.
    pub unroll_depth: Option<usize>,
    pub mode: PerturbKind,
    pub seed: u64,
    pub init: DeltaInit,
    /// Restart the inner field from its initialization every epoch.
    pub reset_theta: bool,
    /// Recorded inner steps are checkpointed once the trace would exceed
    /// this many resident bytes.
    pub trace_budget_bytes: Option<usize>,
    pub render: RenderOptions,
    pub loss: LossKind,
    pub deterministic: bool,
}

impl PoisonConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be > 0, got {}", self.rho)));
        }
        if self.m == 0 {
            return Err(Error::Config("m must be >= 1".into()));
        }
        let t = self.unroll();
        if t < 1 || t > self.k.max(1) {
            return Err(Error::Config(format!("unroll_depth must be in [1, {}], got {t}", self.k.max(1))));
        }
        for (name, v) in [("inner_lr", self.inner_lr), ("alpha_prime_base", self.alpha_prime_base)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.batch_rays == 0 || self.eval_rays == 0 {
            return Err(Error::Config("batch_rays and eval_rays must be >= 1".into()));
        }
        if self.render.samples_per_ray == 0 {
            return Err(Error::Config("samples_per_ray must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective unroll depth.
    pub fn unroll(&self) -> usize {
        self.unroll_depth.unwrap_or(self.k.max(1))
    }
}

/// `alpha' = base / max(mean |g|, 1e-12)`.
pub fn normalized_outer_step(grad: &[f64], alpha_prime_base: f64) -> f64 {
    alpha_prime_base / mean_abs(grad).max(GRAD_NORM_FLOOR)
}

pub fn mean_abs(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64
}

/// Inner batches of one epoch plus the batch used for the outer loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochBatches {
    pub inner: Vec<Batch>,
    pub eval: Batch,
}

/// Outcome of one inner-train-then-evaluate pass.
#[derive(Debug, Clone)]
pub struct MetaGradient {
    pub outer_loss: f64,
    /// Gradient of the outer loss w.r.t. the concatenated perturbation.
    pub grad: Vec<f64>,
    pub theta: Vec<f64>,
    pub state: OptimizerState,
}

/// Views, cameras, field architecture and configuration of one attack.
pub struct PoisonProblem<'a> {
    field: &'a dyn RadianceField,
    images: &'a [Image],
    cameras: &'a [Camera],
    cfg: &'a PoisonConfig,
    offsets: Vec<usize>,
    len: usize,
}

impl<'a> PoisonProblem<'a> {
    pub fn new(field: &'a dyn RadianceField, images: &'a [Image], cameras: &'a [Camera], cfg: &'a PoisonConfig) -> Result<Self> {
        cfg.validate()?;
        check_views(images, cameras)?;
        let ch = match cfg.mode {
            PerturbKind::SpatialFlow => 2,
            PerturbKind::PerPixelAdditive => 3,
        };
        let mut offsets = Vec::with_capacity(images.len());
        let mut len = 0;
        for img in images {
            offsets.push(len);
            len += img.width() * img.height() * ch;
        }
        if len > u32::MAX as usize {
            return Err(Error::Config("perturbation too large".into()));
        }
        Ok(PoisonProblem {
            field,
            images,
            cameras,
            cfg,
            offsets,
            len,
        })
    }

    /// Length of the concatenated perturbation vector.
    pub fn perturbation_len(&self) -> usize {
        self.len
    }

    fn slice<'d>(&self, delta: &'d [f64], i: usize) -> &'d [f64] {
        let end = self.offsets.get(i + 1).copied().unwrap_or(self.len);
        &delta[self.offsets[i]..end]
    }

    /// Applies the perturbation numerically to every view.
    pub fn perturbed_images(&self, delta: &[f64]) -> Result<Vec<Image>> {
        if delta.len() != self.len {
            return Err(Error::Shape(format!("perturbation of {} values, expected {}", delta.len(), self.len)));
        }
        (0..self.images.len())
            .map(|i| {
                let img = &self.images[i];
                let d = self.slice(delta, i);
                match self.cfg.mode {
                    PerturbKind::SpatialFlow => {
                        apply_flow(img, &FlowField::new(img.width(), img.height(), d.to_vec())?)
                    }
                    PerturbKind::PerPixelAdditive => apply_additive(img, d, self.cfg.rho),
                }
            })
            .collect()
    }

    /// Splits a flow-mode perturbation into per-view flow fields.
    pub fn flows(&self, delta: &[f64]) -> Result<Vec<FlowField>> {
        if self.cfg.mode != PerturbKind::SpatialFlow {
            return Err(Error::Invalid("flows exist only in spatial-flow mode".into()));
        }
        (0..self.images.len())
            .map(|i| FlowField::new(self.images[i].width(), self.images[i].height(), self.slice(delta, i).to_vec()))
            .collect()
    }

    fn record_targets(&self, trace: &mut Trace, delta: NodeId, batch: &Batch) -> Result<NodeId> {
        match self.cfg.mode {
            PerturbKind::SpatialFlow => record_warped_targets(trace, self.images, &self.offsets, delta, &batch.pixels),
            PerturbKind::PerPixelAdditive => {
                record_additive_targets(trace, self.images, &self.offsets, delta, self.cfg.rho, &batch.pixels)
            }
        }
    }

    /// Runs the `k = batches.len()` inner steps from `theta0` on the
    /// perturbed views. The first `k - t` steps run numerically against
    /// constant perturbed targets; the last `t` are recorded with the
    /// perturbation leaf `delta` feeding the targets. Returns the node of
    /// the trained parameters and the recorded optimizer.
    pub fn inner_train_recorded(
        &self,
        trace: &mut Trace,
        theta0: &[f64],
        state: &OptimizerState,
        delta: NodeId,
        batches: &[Batch],
    ) -> Result<(NodeId, RecordedOptimizer)> {
        let k = batches.len();
        let recorded = self.cfg.unroll().min(k);
        let mut theta = theta0.to_vec();
        let mut state = state.clone();
        if recorded < k {
            let delta_vals = trace.value(delta).to_vec();
            let targets = self.perturbed_images(&delta_vals)?;
            for batch in &batches[..k - recorded] {
                train_step(
                    self.field,
                    &mut theta,
                    &mut state,
                    &targets,
                    self.cameras,
                    batch,
                    self.cfg.inner_lr,
                    &self.cfg.render,
                    self.cfg.loss,
                    self.cfg.deterministic,
                )?;
            }
        }
        let mut opt = state.record(trace);
        let mut node = trace.leaf(theta);
        let mut last_step_bytes = 0usize;
        for batch in &batches[k - recorded..] {
            let before = trace.resident_bytes();
            let checkpoint = self
                .cfg
                .trace_budget_bytes
                .is_some_and(|b| before + last_step_bytes > b);
            let marker = checkpoint.then(|| trace.push_marker());
            let rays = batch_rays(self.cameras, &batch.pixels)?;
            let targets = self.record_targets(trace, delta, batch)?;
            let loss = record_batch_loss(
                trace,
                self.field,
                node,
                &rays,
                targets,
                batch.jitter_seed,
                &self.cfg.render,
                self.cfg.loss,
            )?;
            let value = trace.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("inner loss {value}")));
            }
            let grad = trace.grad_recorded(loss, &[node])?[0];
            node = opt.step(trace, node, grad, self.cfg.inner_lr)?;
            last_step_bytes = trace.resident_bytes().saturating_sub(before);
            if let Some(marker) = marker {
                trace.checkpoint_segment(marker)?;
            }
        }
        Ok((node, opt))
    }

    /// Outer loss of the parameters `theta` on the clean views, and its
    /// gradient w.r.t. the perturbation leaf.
    pub fn outer_grad(&self, trace: &mut Trace, theta: NodeId, delta: NodeId, eval: &Batch) -> Result<(f64, Vec<f64>)> {
        self.outer_grad_seeded(trace, theta, delta, eval, 1.0)
    }

    /// As [`PoisonProblem::outer_grad`] with the loss adjoint seeded to
    /// `seed`.
    pub fn outer_grad_seeded(
        &self,
        trace: &mut Trace,
        theta: NodeId,
        delta: NodeId,
        eval: &Batch,
        seed: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if trace.node_len(theta) != self.field.num_params() || trace.node_len(delta) != self.len {
            return Err(Error::Shape("trace does not match the field or the perturbation".into()));
        }
        let loss = self.outer_loss_node(trace, theta, eval)?;
        let value = trace.scalar(loss);
        let adj = trace.backward_to(loss, &[delta])?;
        let mut grad = adj.get_or_zeros(delta);
        if seed != 1.0 {
            grad.iter_mut().for_each(|g| *g *= seed);
        }
        Ok((value, grad))
    }

    fn outer_loss_node(&self, trace: &mut Trace, theta: NodeId, eval: &Batch) -> Result<NodeId> {
        let rays = batch_rays(self.cameras, &eval.pixels)?;
        let clean = trace.constant(batch_colors(self.images, &eval.pixels));
        record_batch_loss(
            trace,
            self.field,
            theta,
            &rays,
            clean,
            eval.jitter_seed,
            &self.cfg.render,
            self.cfg.loss,
        )
    }

    /// Inner training followed by the outer gradient, on a fresh trace.
    pub fn meta_gradient(
        &self,
        theta0: &[f64],
        state: &OptimizerState,
        delta: &[f64],
        batches: &EpochBatches,
    ) -> Result<MetaGradient> {
        if delta.len() != self.len {
            return Err(Error::Shape(format!("perturbation of {} values, expected {}", delta.len(), self.len)));
        }
        let mut trace = Trace::with_determinism(self.cfg.deterministic);
        let d = trace.leaf(delta.to_vec());
        let (theta, opt) = self.inner_train_recorded(&mut trace, theta0, state, d, &batches.inner)?;
        let (outer_loss, grad) = self.outer_grad(&mut trace, theta, d, &batches.eval)?;
        Ok(MetaGradient {
            outer_loss,
            grad,
            theta: trace.value(theta).to_vec(),
            state: opt.finish(&mut trace),
        })
    }

    /// The outer objective evaluated with plain numeric training: the
    /// function whose gradient [`PoisonProblem::meta_gradient`] computes.
    pub fn outer_objective(&self, theta0: &[f64], state: &OptimizerState, delta: &[f64], batches: &EpochBatches) -> Result<f64> {
        let targets = self.perturbed_images(delta)?;
        let mut theta = theta0.to_vec();
        let mut state = state.clone();
        for batch in &batches.inner {
            train_step(
                self.field,
                &mut theta,
                &mut state,
                &targets,
                self.cameras,
                batch,
                self.cfg.inner_lr,
                &self.cfg.render,
                self.cfg.loss,
                self.cfg.deterministic,
            )?;
        }
        let mut trace = Trace::with_determinism(self.cfg.deterministic);
        let p = trace.constant(theta);
        let l = self.outer_loss_node(&mut trace, p, &batches.eval)?;
        Ok(trace.scalar(l))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub outer_loss: f64,
    pub mean_abs_grad: f64,
    pub alpha_prime: f64,
}

#[derive(Debug, Clone)]
pub struct PoisonResult {
    pub mode: PerturbKind,
    /// Concatenated per-view perturbation.
    pub perturbation: Vec<f64>,
    /// Per-view flows (spatial-flow mode only).
    pub flows: Vec<FlowField>,
    pub poisoned: Vec<Image>,
    pub log: Vec<EpochLog>,
    /// Inner field parameters after the last epoch.
    pub theta: Vec<f64>,
}

/// Samplers feeding the epochs of an attack.
pub struct EpochSampler {
    inner: BatchSampler,
    eval: BatchSampler,
    k: usize,
    batch_rays: usize,
    eval_rays: usize,
}

impl EpochSampler {
    /// The inner stream is seeded exactly like [`crate::train::fit`]'s
    /// sampler; the outer stream is independent of it.
    pub fn new(images: &[Image], cfg: &PoisonConfig) -> Self {
        EpochSampler {
            inner: BatchSampler::new(images, cfg.seed),
            eval: BatchSampler::with_stream(images, cfg.seed, EVAL_STREAM),
            k: cfg.k,
            batch_rays: cfg.batch_rays,
            eval_rays: cfg.eval_rays,
        }
    }

    pub fn next_epoch(&mut self) -> EpochBatches {
        EpochBatches {
            inner: (0..self.k).map(|_| self.inner.next_batch(self.batch_rays)).collect(),
            eval: self.eval.next_batch(self.eval_rays),
        }
    }
}

/// Runs the full attack starting from the field's current parameters.
pub fn poison_dataset(field: &dyn RadianceField, images: &[Image], cameras: &[Camera], cfg: &PoisonConfig) -> Result<PoisonResult> {
    poison_dataset_with(field, images, cameras, cfg, |_| {})
}

/// As [`poison_dataset`], calling `on_epoch` after every epoch.
pub fn poison_dataset_with(
    field: &dyn RadianceField,
    images: &[Image],
    cameras: &[Camera],
    cfg: &PoisonConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<PoisonResult> {
    let problem = PoisonProblem::new(field, images, cameras, cfg)?;
    let mut delta = vec![0.0; problem.perturbation_len()];
    if cfg.init == DeltaInit::Uniform {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(INIT_STREAM);
        let r = cfg.rho / 10.0;
        delta.iter_mut().for_each(|d| *d = rng.gen_range(-r..=r));
    }
    let theta_init = field.params().to_vec();
    let state_init = OptimizerState::new(cfg.inner_optimizer, theta_init.len());
    let mut theta = theta_init.clone();
    let mut state = state_init.clone();
    let mut sampler = EpochSampler::new(images, cfg);
    let mut log = Vec::with_capacity(cfg.m);
    for epoch in 0..cfg.m {
        if cfg.reset_theta {
            theta.clone_from(&theta_init);
            state = state_init.clone();
        }
        let batches = sampler.next_epoch();
        let mg = problem
            .meta_gradient(&theta, &state, &delta, &batches)
            .map_err(|e| match e {
                Error::NonFinite(detail) => Error::Divergence { epoch, detail },
                other => other,
            })?;
        if !mg.outer_loss.is_finite() || mg.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                detail: format!("outer loss {} or its gradient is not finite", mg.outer_loss),
            });
        }
        let mean_abs_grad = mean_abs(&mg.grad);
        let alpha_prime = normalized_outer_step(&mg.grad, cfg.alpha_prime_base);
        for (d, g) in delta.iter_mut().zip(&mg.grad) {
            *d += alpha_prime * g;
        }
        project_slice(&mut delta, cfg.rho);
        theta = mg.theta;
        state = mg.state;
        let entry = EpochLog {
            epoch,
            outer_loss: mg.outer_loss,
            mean_abs_grad,
            alpha_prime,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    let poisoned = problem.perturbed_images(&delta)?;
    let flows = if cfg.mode == PerturbKind::SpatialFlow {
        problem.flows(&delta)?
    } else {
        Vec::new()
    };
    Ok(PoisonResult {
        mode: cfg.mode,
        perturbation: delta,
        flows,
        poisoned,
        log,
        theta,
    })
}

#[cfg(test)]
mod tests;
