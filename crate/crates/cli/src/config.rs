//! The run configuration shared by every command.
//!
//! Every section has defaults, so a config file only lists what it
//! changes. The shipped presets spell everything out.

use std::path::Path;

use serde::{Deserialize, Serialize};

use nerf_poison::field::{AnyField, Backend, TinyMlpField, VoxelGridField};
use nerf_poison::poison::{DeltaInit, PoisonConfig};
use nerf_poison::render::{LossKind, RenderOptions, SamplingMode};
use nerf_poison::scene::SyntheticSceneSpec;
use nerf_poison::train::{FitConfig, OptimizerKind};
use nerf_poison::warp::PerturbKind;

use crate::error::{CliError, CliResult};

/// Largest positional-encoding level accepted for the MLP backend.
pub const MAX_MLP_LEVELS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scene: Option<SyntheticSceneSpec>,
    pub train: TrainSection,
    pub poison: PoisonSection,
    pub render: RenderSection,
    pub loss: LossSection,
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            scene: None,
            train: TrainSection::default(),
            poison: PoisonSection::default(),
            render: RenderSection::default(),
            loss: LossSection::default(),
            deterministic: true,
        }
    }
}

/// Baseline training. The top-level fields drive the grid backend;
/// `mlp` overrides them for the MLP backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    pub steps: usize,
    pub batch_rays: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr`.
    pub final_lr_fraction: f64,
    pub seed: u64,
    pub grid_resolution: usize,
    pub mlp: MlpSection,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            optimizer: OptimizerKind::Adam,
            steps: 2000,
            batch_rays: 4096,
            lr: 0.02,
            final_lr_fraction: 0.1,
            seed: 0,
            grid_resolution: 16,
            mlp: MlpSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSection {
    pub levels: usize,
    pub steps: Option<usize>,
    pub batch_rays: Option<usize>,
    pub lr: f64,
}

impl Default for MlpSection {
    fn default() -> Self {
        MlpSection { levels: 4, steps: None, batch_rays: None, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoisonSection {
    pub rho: f64,
    pub k: usize,
    pub m: usize,
    /// Inner-loop learning rate.
    pub alpha: f64,
    pub alpha_prime_base: f64,
    pub unroll_depth: Option<usize>,
    pub mode: PerturbKind,
    pub seed: u64,
    pub inner_optimizer: OptimizerKind,
    pub batch_rays: usize,
    pub eval_rays: usize,
    pub init: DeltaInit,
    pub reset_theta: bool,
    pub trace_budget_bytes: Option<usize>,
    /// Backend the perturbation is optimized against.
    pub backend: Backend,
}

impl Default for PoisonSection {
    fn default() -> Self {
        PoisonSection {
            rho: 10.0,
            k: 10,
            m: 2500,
            alpha: 1.0,
            alpha_prime_base: 0.1,
            unroll_depth: None,
            mode: PerturbKind::SpatialFlow,
            seed: 0,
            inner_optimizer: OptimizerKind::Sgd,
            batch_rays: 4096,
            eval_rays: 4096,
            init: DeltaInit::Zero,
            reset_theta: false,
            trace_budget_bytes: None,
            backend: Backend::Grid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub samples_per_ray: usize,
    pub sampling_mode: SamplingMode,
}

impl Default for RenderSection {
    fn default() -> Self {
        RenderSection { samples_per_ray: 64, sampling_mode: SamplingMode::Midpoint }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    /// Squared per-ray error; `false` selects the plain norm.
    pub squared: bool,
}

impl Default for LossSection {
    fn default() -> Self {
        LossSection { squared: true }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config(format!("reading config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message)))
    }

    /// Checks every section against the invariants of the module it feeds.
    pub fn validate(&self) -> CliResult<()> {
        let cfg_err = |e: nerf_poison::Error| CliError::config(e.to_string());
        if let Some(scene) = &self.scene {
            scene.validate().map_err(cfg_err)?;
        }
        self.render_options()?;
        if self.train.grid_resolution < 2 {
            return Err(CliError::config("train.grid_resolution must be >= 2"));
        }
        if self.train.mlp.levels > MAX_MLP_LEVELS {
            return Err(CliError::config(format!("train.mlp.levels must be <= {MAX_MLP_LEVELS}")));
        }
        self.fit_config(Backend::Grid)?.validate().map_err(cfg_err)?;
        self.fit_config(Backend::Mlp)?.validate().map_err(cfg_err)?;
        self.poison_config()?.validate().map_err(cfg_err)?;
        Ok(())
    }

    pub fn render_options(&self) -> CliResult<RenderOptions> {
        RenderOptions::new(self.render.samples_per_ray, self.render.sampling_mode)
            .map_err(|e| CliError::config(e.to_string()))
    }

    pub fn loss_kind(&self) -> LossKind {
        if self.loss.squared {
            LossKind::Squared
        } else {
            LossKind::Norm
        }
    }

    pub fn fit_config(&self, backend: Backend) -> CliResult<FitConfig> {
        let t = &self.train;
        let (steps, batch_rays, lr) = match backend {
            Backend::Grid => (t.steps, t.batch_rays, t.lr),
            Backend::Mlp => (t.mlp.steps.unwrap_or(t.steps), t.mlp.batch_rays.unwrap_or(t.batch_rays), t.mlp.lr),
        };
        Ok(FitConfig {
            steps,
            batch_rays,
            optimizer: t.optimizer,
            lr,
            final_lr_fraction: t.final_lr_fraction,
            render: self.render_options()?,
            loss: self.loss_kind(),
            seed: t.seed,
            deterministic: self.deterministic,
        })
    }

    pub fn poison_config(&self) -> CliResult<PoisonConfig> {
        let p = &self.poison;
        Ok(PoisonConfig {
            rho: p.rho,
            k: p.k,
            m: p.m,
            inner_lr: p.alpha,
            inner_optimizer: p.inner_optimizer,
            alpha_prime_base: p.alpha_prime_base,
            batch_rays: p.batch_rays,
            eval_rays: p.eval_rays,
            unroll_depth: p.unroll_depth,
            mode: p.mode,
            seed: p.seed,
            init: p.init,
            reset_theta: p.reset_theta,
            trace_budget_bytes: p.trace_budget_bytes,
            render: self.render_options()?,
            loss: self.loss_kind(),
            deterministic: self.deterministic,
        })
    }

    /// A freshly initialized field of the given backend.
    pub fn init_field(&self, backend: Backend, seed: u64) -> CliResult<AnyField> {
        Ok(match backend {
            Backend::Grid => AnyField::Grid(VoxelGridField::new(self.train.grid_resolution)?),
            Backend::Mlp => AnyField::Mlp(TinyMlpField::new(self.train.mlp.levels, seed)),
        })
    }
}

/// Reads a scene spec from either a bare spec document or a run config
/// with a `scene` section.
pub fn load_scene_spec(path: &Path) -> CliResult<SyntheticSceneSpec> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("reading scene spec {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let spec: SyntheticSceneSpec = if value.get("scene").is_some() {
        let cfg = RunConfig::from_json(&text)?;
        cfg.scene.ok_or_else(|| CliError::config("config has an empty scene section"))?
    } else {
        serde_json::from_value(value).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?
    };
    spec.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(spec)
}
