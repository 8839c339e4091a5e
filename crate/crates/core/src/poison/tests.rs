use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::field::{FieldSamples, GridActivation, VoxelGridField};
use crate::scene::look_at;
use crate::train::{fit, FitConfig};

pub(crate) struct Tiny {
    pub field: VoxelGridField,
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
}

/// Grid `R = 2`, two random 4x4 views seen from two sides.
pub(crate) fn tiny(seed: u64) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params: Vec<f64> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let field = VoxelGridField::from_params(2, GridActivation::Softplus, params).unwrap();
    let eyes = [[0.3, 0.4, 3.0], [2.8, -0.5, 1.0]];
    let cameras = eyes
        .iter()
        .map(|&eye| Camera {
            width: 4,
            height: 4,
            fx: 4.0,
            fy: 4.0,
            cx: 2.0,
            cy: 2.0,
            c2w: look_at(eye, [0.0; 3], [0.0, 1.0, 0.0]).unwrap(),
            near: 1.0,
            far: 5.0,
        })
        .collect();
    let images = (0..2)
        .map(|_| Image::new(4, 4, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
        .collect();
    Tiny { field, images, cameras }
}

pub(crate) fn tiny_cfg(k: usize) -> PoisonConfig {
    PoisonConfig {
        rho: 2.0,
        k,
        m: 1,
        inner_lr: 1.0,
        inner_optimizer: OptimizerKind::Sgd,
        alpha_prime_base: 0.1,
        batch_rays: 16,
        eval_rays: 16,
        unroll_depth: None,
        mode: PerturbKind::SpatialFlow,
        seed: 11,
        init: DeltaInit::Zero,
        reset_theta: false,
        trace_budget_bytes: None,
        render: RenderOptions::midpoint(4).unwrap(),
        loss: LossKind::Squared,
        deterministic: true,
    }
}

/// Random flow components with magnitude in [0.05, 0.45]: away from the
/// integer kinks of the bilinear stencil.
fn fractional_delta(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let m = rng.gen_range(0.05..0.45);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

#[test]
fn normalized_step_examples() {
    assert!((normalized_outer_step(&[0.05, -0.05], 0.1) - 2.0).abs() < 1e-15);
    assert_eq!(normalized_outer_step(&[0.0; 4], 0.1), 0.1 / 1e-12);
    let g = [0.3, -0.1, 0.02];
    let g10: Vec<f64> = g.iter().map(|x| x * 10.0).collect();
    let a = normalized_outer_step(&g, 0.1);
    let b = normalized_outer_step(&g10, 0.1);
    assert!((a / b - 10.0).abs() < 1e-12);
    for i in 0..3 {
        assert!((a * g[i] - b * g10[i]).abs() < 1e-15);
    }
}

#[test]
fn config_validation() {
    let mut c = tiny_cfg(2);
    c.rho = 0.0;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg(2);
    c.m = 0;
    assert!(c.validate().is_err());
    let mut c = tiny_cfg(2);
    c.unroll_depth = Some(3);
    assert!(c.validate().is_err());
    let mut c = tiny_cfg(0);
    c.unroll_depth = Some(1);
    assert!(c.validate().is_ok());
}

#[test]
fn zero_inner_steps_is_the_identity() {
    let t = tiny(1);
    let cfg = tiny_cfg(0);
    let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    let batches = EpochSampler::new(&t.images, &cfg).next_epoch();
    let state = OptimizerState::new(OptimizerKind::Sgd, 32);
    let delta = fractional_delta(p.perturbation_len(), 2);
    let mg = p.meta_gradient(t.field.params(), &state, &delta, &batches).unwrap();
    assert!(mg.grad.iter().all(|&g| g == 0.0));
    assert_eq!(mg.theta, t.field.params());

    let res = poison_dataset(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    assert!(res.perturbation.iter().all(|&d| d == 0.0));
    assert_eq!(res.poisoned, t.images);
    assert_eq!(res.log.len(), 1);
}

#[test]
fn unperturbed_attack_reproduces_plain_training() {
    for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let t = tiny(3);
        let mut cfg = tiny_cfg(4);
        cfg.inner_optimizer = optimizer;
        cfg.inner_lr = if optimizer == OptimizerKind::Sgd { 1.0 } else { 0.05 };
        let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
        let batches = EpochSampler::new(&t.images, &cfg).next_epoch();
        let state = OptimizerState::new(optimizer, 32);
        let zero = vec![0.0; p.perturbation_len()];
        let mg = p.meta_gradient(t.field.params(), &state, &zero, &batches).unwrap();

        let mut plain = t.field.clone();
        let fit_cfg = FitConfig {
            steps: 4,
            batch_rays: 16,
            optimizer,
            lr: cfg.inner_lr,
            final_lr_fraction: 1.0,
            render: cfg.render,
            loss: cfg.loss,
            seed: cfg.seed,
            deterministic: true,
        };
        fit(&mut plain, &t.images, &t.cameras, &fit_cfg).unwrap();
        let a: Vec<u64> = mg.theta.iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = plain.params().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "{optimizer:?}");
    }
}

/// Two parameters: a constant density and a gray level.
struct TwoParam;

impl RadianceField for TwoParam {
    fn backend(&self) -> crate::field::Backend {
        crate::field::Backend::Grid
    }
    fn params(&self) -> &[f64] {
        &[0.5, 0.0]
    }
    fn set_params(&mut self, _: &[f64]) -> Result<()> {
        Ok(())
    }
    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        let s = points.len();
        let sig = trace.gather(params, vec![0u32; s])?;
        let sigma = trace.softplus(sig)?;
        let c = trace.gather(params, vec![1u32; 3 * s])?;
        let rgb = trace.sigmoid(c)?;
        Ok(FieldSamples { sigma, rgb })
    }
}

#[test]
fn two_inner_steps_match_hand_applied_sgd() {
    let t = tiny(4);
    let cfg = tiny_cfg(2);
    let field = TwoParam;
    let p = PoisonProblem::new(&field, &t.images, &t.cameras, &cfg).unwrap();
    let batches = EpochSampler::new(&t.images, &cfg).next_epoch();
    let delta = fractional_delta(p.perturbation_len(), 5);
    let state = OptimizerState::new(OptimizerKind::Sgd, 2);
    let mg = p.meta_gradient(field.params(), &state, &delta, &batches).unwrap();

    // gradient by central differences, then theta -= lr * g, twice
    let targets = p.perturbed_images(&delta).unwrap();
    let loss = |theta: &[f64], b: &Batch| {
        let mut tr = Trace::new();
        let pn = tr.constant(theta.to_vec());
        let rays = batch_rays(&t.cameras, &b.pixels).unwrap();
        let tg = tr.constant(batch_colors(&targets, &b.pixels));
        let l = record_batch_loss(&mut tr, &field, pn, &rays, tg, b.jitter_seed, &cfg.render, cfg.loss).unwrap();
        tr.scalar(l)
    };
    let mut theta = field.params().to_vec();
    for b in &batches.inner {
        let h = 1e-6;
        let g: Vec<f64> = (0..2)
            .map(|i| {
                let mut a = theta.clone();
                a[i] += h;
                let mut c = theta.clone();
                c[i] -= h;
                (loss(&a, b) - loss(&c, b)) / (2.0 * h)
            })
            .collect();
        for i in 0..2 {
            theta[i] -= cfg.inner_lr * g[i];
        }
    }
    for i in 0..2 {
        assert!((theta[i] - mg.theta[i]).abs() < 1e-7, "{theta:?} vs {:?}", mg.theta);
    }
    assert!(theta != field.params());
}

/// Norm-wise relative error and the worst component error relative to
/// the largest finite-difference component.
fn compare(grad: &[f64], fd: &[f64]) -> (f64, f64) {
    let diff: f64 = grad.iter().zip(fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let norm: f64 = fd.iter().map(|b| b * b).sum::<f64>().sqrt();
    let scale = fd.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let worst = grad.iter().zip(fd).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    (diff / norm, worst / scale)
}

pub(crate) fn finite_difference_meta_gradient(
    p: &PoisonProblem<'_>,
    theta0: &[f64],
    state: &OptimizerState,
    delta: &[f64],
    batches: &EpochBatches,
    h: f64,
) -> Vec<f64> {
    (0..delta.len())
        .map(|i| {
            let mut a = delta.to_vec();
            a[i] += h;
            let mut b = delta.to_vec();
            b[i] -= h;
            (p.outer_objective(theta0, state, &a, batches).unwrap() - p.outer_objective(theta0, state, &b, batches).unwrap())
                / (2.0 * h)
        })
        .collect()
}

#[test]
fn meta_gradient_matches_finite_differences() {
    for (seed, optimizer) in [(6, OptimizerKind::Sgd), (7, OptimizerKind::Sgd), (8, OptimizerKind::Adam)] {
        let t = tiny(seed);
        let mut cfg = tiny_cfg(2);
        cfg.inner_optimizer = optimizer;
        cfg.inner_lr = if optimizer == OptimizerKind::Sgd { 1.0 } else { 0.1 };
        let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
        let batches = EpochSampler::new(&t.images, &cfg).next_epoch();
        let state = OptimizerState::new(optimizer, 32);
        let delta = fractional_delta(p.perturbation_len(), seed + 100);
        let mg = p.meta_gradient(t.field.params(), &state, &delta, &batches).unwrap();
        let fd = finite_difference_meta_gradient(&p, t.field.params(), &state, &delta, &batches, 1e-4);
        let (norm_err, worst) = compare(&mg.grad, &fd);
        assert!(norm_err <= 1e-3 && worst <= 1e-3, "{optimizer:?}: {norm_err} / {worst}");
        assert!(mg.grad.iter().any(|&g| g != 0.0));
    }
}

#[test]
fn truncated_unroll_differs_only_by_early_steps() {
    let t = tiny(9);
    let mut cfg = tiny_cfg(3);
    let delta = fractional_delta(2 * 2 * 16, 10);
    let state = OptimizerState::new(OptimizerKind::Sgd, 32);
    let full = {
        let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
        let b = EpochSampler::new(&t.images, &cfg).next_epoch();
        p.meta_gradient(t.field.params(), &state, &delta, &b).unwrap()
    };
    cfg.unroll_depth = Some(1);
    let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    let b = EpochSampler::new(&t.images, &cfg).next_epoch();
    let trunc = p.meta_gradient(t.field.params(), &state, &delta, &b).unwrap();
    // same forward pass, different (cheaper) gradient
    for (a, c) in full.theta.iter().zip(&trunc.theta) {
        assert!((a - c).abs() < 1e-12);
    }
    assert_eq!(full.outer_loss.to_bits(), trunc.outer_loss.to_bits());
    assert!(trunc.grad.iter().any(|&g| g != 0.0));
    assert_ne!(full.grad, trunc.grad);
}

#[test]
fn seeded_outer_adjoint_scales_the_gradient() {
    let t = tiny(12);
    let cfg = tiny_cfg(2);
    let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    let b = EpochSampler::new(&t.images, &cfg).next_epoch();
    let state = OptimizerState::new(OptimizerKind::Sgd, 32);
    let delta = fractional_delta(p.perturbation_len(), 13);
    let run = |seed: f64| {
        let mut tr = Trace::new();
        let d = tr.leaf(delta.clone());
        let (theta, _) = p.inner_train_recorded(&mut tr, t.field.params(), &state, d, &b.inner).unwrap();
        p.outer_grad_seeded(&mut tr, theta, d, &b.eval, seed).unwrap().1
    };
    let one = run(1.0);
    let two = run(2.0);
    for (a, c) in one.iter().zip(&two) {
        assert_eq!(2.0 * a, *c);
    }
}

#[test]
fn checkpointed_inner_loop_gives_identical_gradients() {
    let t = tiny(14);
    let mut cfg = tiny_cfg(3);
    cfg.inner_optimizer = OptimizerKind::Adam;
    cfg.inner_lr = 0.1;
    let delta = fractional_delta(2 * 2 * 16, 15);
    let state = OptimizerState::new(OptimizerKind::Adam, 32);
    let run = |cfg: &PoisonConfig| {
        let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, cfg).unwrap();
        let b = EpochSampler::new(&t.images, cfg).next_epoch();
        p.meta_gradient(t.field.params(), &state, &delta, &b).unwrap()
    };
    let plain = run(&cfg);
    cfg.trace_budget_bytes = Some(0);
    let ckpt = run(&cfg);
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain.grad), bits(&ckpt.grad));
    assert_eq!(bits(&plain.theta), bits(&ckpt.theta));
}

#[test]
fn budget_and_determinism() {
    let t = tiny(16);
    let mut cfg = tiny_cfg(2);
    cfg.m = 4;
    cfg.rho = 0.3;
    cfg.init = DeltaInit::Uniform;
    let a = poison_dataset(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    let b = poison_dataset(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    assert!(a.perturbation.iter().all(|d| d.abs() <= 0.3));
    assert!(a.flows.iter().all(|f| f.max_abs() <= 0.3));
    assert_eq!(a.flows.len(), 2);
    assert_eq!(a.log.len(), 4);
    assert_eq!(a.perturbation, b.perturbation);
    assert_eq!(a.poisoned, b.poisoned);
    assert_eq!(a.log, b.log);
    assert!(a.perturbation.iter().any(|&d| d.abs() == 0.3));
}

#[test]
fn additive_mode_runs_within_budget() {
    let t = tiny(17);
    let mut cfg = tiny_cfg(2);
    cfg.mode = PerturbKind::PerPixelAdditive;
    cfg.rho = 0.05;
    cfg.m = 3;
    let res = poison_dataset(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    assert!(res.flows.is_empty());
    assert_eq!(res.perturbation.len(), 2 * 48);
    assert!(res.perturbation.iter().all(|d| d.abs() <= 0.05));
    for (p, c) in res.poisoned.iter().zip(&t.images) {
        for (a, b) in p.data().iter().zip(c.data()) {
            assert!((a - b).abs() <= 0.05 + 1e-15);
        }
    }
    assert!(res.log.iter().any(|l| l.mean_abs_grad > 0.0));
}

#[test]
fn additive_meta_gradient_matches_finite_differences() {
    let t = tiny(18);
    let mut cfg = tiny_cfg(2);
    cfg.mode = PerturbKind::PerPixelAdditive;
    cfg.rho = 0.5;
    let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
    let b = EpochSampler::new(&t.images, &cfg).next_epoch();
    let state = OptimizerState::new(OptimizerKind::Sgd, 32);
    // keep every perturbed value strictly inside [0, 1] and the budget
    let delta: Vec<f64> = t
        .images
        .iter()
        .flat_map(|img| img.data().iter().map(|&x| if x > 0.5 { -0.01 } else { 0.01 }))
        .collect();
    let mg = p.meta_gradient(t.field.params(), &state, &delta, &b).unwrap();
    let fd = finite_difference_meta_gradient(&p, t.field.params(), &state, &delta, &b, 1e-6);
    let (norm_err, _) = compare(&mg.grad, &fd);
    assert!(norm_err <= 1e-3, "{norm_err}");
}

#[test]
fn one_outer_step_tends_to_increase_the_objective() {
    let mut wins = 0;
    for seed in 0..10 {
        let t = tiny(100 + seed);
        let cfg = tiny_cfg(2);
        let p = PoisonProblem::new(&t.field, &t.images, &t.cameras, &cfg).unwrap();
        let b = EpochSampler::new(&t.images, &cfg).next_epoch();
        let state = OptimizerState::new(OptimizerKind::Sgd, 32);
        let delta = vec![0.0; p.perturbation_len()];
        let mg = p.meta_gradient(t.field.params(), &state, &delta, &b).unwrap();
        let alpha = normalized_outer_step(&mg.grad, cfg.alpha_prime_base);
        let mut next: Vec<f64> = delta.iter().zip(&mg.grad).map(|(d, g)| d + alpha * g).collect();
        project_slice(&mut next, cfg.rho);
        let after = p.outer_objective(t.field.params(), &state, &next, &b).unwrap();
        if after >= mg.outer_loss {
            wins += 1;
        }
    }
    assert!(wins > 5, "ascent held for {wins} of 10 seeds");
}

/// Colour is the square root of a parameter, so a large step makes it NaN.
struct SqrtColour(Vec<f64>);

impl RadianceField for SqrtColour {
    fn backend(&self) -> crate::field::Backend {
        crate::field::Backend::Grid
    }
    fn params(&self) -> &[f64] {
        &self.0
    }
    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        self.0 = p.to_vec();
        Ok(())
    }
    fn eval_inside(&self, trace: &mut Trace, params: NodeId, points: &[[f64; 3]]) -> Result<FieldSamples> {
        let s = points.len();
        let sig = trace.gather(params, vec![0u32; s])?;
        let sigma = trace.softplus(sig)?;
        let c = trace.gather(params, vec![1u32; 3 * s])?;
        let rgb = trace.sqrt(c)?;
        Ok(FieldSamples { sigma, rgb })
    }
}

#[test]
fn divergent_inner_training_reports_the_epoch() {
    let t = tiny(19);
    let mut cfg = tiny_cfg(3);
    cfg.inner_lr = 1e3;
    let field = SqrtColour(vec![2.0, 4.0]);
    let err = poison_dataset(&field, &t.images, &t.cameras, &cfg).unwrap_err();
    assert!(matches!(err, Error::Divergence { epoch: 0, .. }), "{err}");
}
