//! Data-parallel kernels against the same work on one thread.
//!
//! `parallel` runs on rayon's global pool, `one-thread` installs a pool of
//! size one. Built with `--no-default-features` both arms take the plain
//! sequential loops.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nerf_poison::field::{GridActivation, RadianceField, VoxelGridField};
use nerf_poison::imaging::Image;
use nerf_poison::poison::{DeltaInit, EpochSampler, PoisonConfig, PoisonProblem};
use nerf_poison::render::{render_image, LossKind, RenderOptions};
use nerf_poison::scene::{look_at, Camera};
use nerf_poison::train::{train_step, BatchSampler, OptimizerKind, OptimizerState};
use nerf_poison::warp::PerturbKind;

struct Setup {
    field: VoxelGridField,
    images: Vec<Image>,
    cameras: Vec<Camera>,
}

fn setup() -> Setup {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let r = 16;
    let params: Vec<f64> = (0..r * r * r * 4).map(|_| rng.gen_range(-2.0..1.0)).collect();
    let truth = VoxelGridField::from_params(r, GridActivation::Softplus, params).unwrap();
    let cameras: Vec<Camera> = (0..4)
        .map(|i| {
            let a = i as f64 * std::f64::consts::FRAC_PI_2;
            Camera {
                width: 32,
                height: 32,
                fx: 38.6,
                fy: 38.6,
                cx: 16.0,
                cy: 16.0,
                c2w: look_at([3.0 * a.cos(), 1.0, 3.0 * a.sin()], [0.0; 3], [0.0, 1.0, 0.0]).unwrap(),
                near: 1.0,
                far: 5.0,
            }
        })
        .collect();
    let opts = RenderOptions::midpoint(64).unwrap();
    let images = cameras.iter().map(|c| render_image(&truth, c, &opts).unwrap()).collect();
    Setup { field: VoxelGridField::new(r).unwrap(), images, cameras }
}

fn arms() -> Vec<(&'static str, rayon::ThreadPool)> {
    let threads = rayon::current_num_threads();
    vec![
        ("parallel", rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap()),
        ("one-thread", rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
    ]
}

fn bench_train_step(c: &mut Criterion) {
    let s = setup();
    let opts = RenderOptions::midpoint(64).unwrap();
    let batch = BatchSampler::new(&s.images, 1).next_batch(1024);
    let mut g = c.benchmark_group("train_step_1024_rays");
    g.sample_size(10);
    for (name, pool) in arms() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| {
                b.iter(|| {
                    let mut params = s.field.params().to_vec();
                    let mut state = OptimizerState::new(OptimizerKind::Adam, params.len());
                    train_step(&s.field, &mut params, &mut state, &s.images, &s.cameras, &batch, 0.1, &opts, LossKind::Squared, true)
                        .unwrap()
                })
            })
        });
    }
    g.finish();
}

fn bench_meta_gradient(c: &mut Criterion) {
    let s = setup();
    let cfg = PoisonConfig {
        rho: 2.0,
        k: 3,
        m: 1,
        inner_lr: 1.0,
        inner_optimizer: OptimizerKind::Sgd,
        alpha_prime_base: 0.1,
        batch_rays: 256,
        eval_rays: 256,
        unroll_depth: None,
        mode: PerturbKind::SpatialFlow,
        seed: 0,
        init: DeltaInit::Zero,
        reset_theta: false,
        trace_budget_bytes: None,
        render: RenderOptions::midpoint(32).unwrap(),
        loss: LossKind::Squared,
        deterministic: true,
    };
    let problem = PoisonProblem::new(&s.field, &s.images, &s.cameras, &cfg).unwrap();
    let batches = EpochSampler::new(&s.images, &cfg).next_epoch();
    let state = OptimizerState::new(OptimizerKind::Sgd, s.field.num_params());
    let delta = vec![0.3; problem.perturbation_len()];
    let mut g = c.benchmark_group("meta_gradient_k3");
    g.sample_size(10);
    for (name, pool) in arms() {
        g.bench_function(BenchmarkId::from_parameter(name), |b| {
            pool.install(|| b.iter(|| problem.meta_gradient(s.field.params(), &state, &delta, &batches).unwrap()))
        });
    }
    g.finish();
}

criterion_group!(benches, bench_train_step, bench_meta_gradient);
criterion_main!(benches);
