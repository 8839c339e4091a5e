use super::*;
use crate::field::{AnyField, TinyMlpField, VoxelGridField};
use crate::render::SamplingMode;
use crate::scene::look_at;

#[test]
fn sgd_example() {
    let mut s = OptimizerState::new(OptimizerKind::Sgd, 1);
    let mut p = [1.0];
    s.step(&mut p, &[2.0], 0.1).unwrap();
    assert!((p[0] - 0.8).abs() < 1e-15);
    s.step(&mut p, &[0.0], 0.1).unwrap();
    assert!((p[0] - 0.8).abs() < 1e-15);
}

/// Scalar Adam written out independently of the vectorized update.
fn adam_oracle(theta: f64, grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-7);
    let (mut m, mut v, mut th) = (0.0, 0.0, theta);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th -= lr * mh / (vh.sqrt() + eps);
    }
    th
}

#[test]
fn adam_matches_scalar_oracle() {
    let mut s = OptimizerState::new(OptimizerKind::Adam, 1);
    let mut p = [1.0];
    s.step(&mut p, &[0.5], 0.01).unwrap();
    // the first step moves by almost exactly lr
    assert!((p[0] - (1.0 - 0.01)).abs() < 1e-8);
    assert!((p[0] - adam_oracle(1.0, &[0.5], 0.01)).abs() < 1e-15);
    let grads = [0.5, -0.2, 0.1, 3.0, 0.0];
    let mut s = OptimizerState::new(OptimizerKind::Adam, 1);
    let mut p = [1.0];
    for g in grads {
        s.step(&mut p, &[g], 0.01).unwrap();
    }
    assert!((p[0] - adam_oracle(1.0, &grads, 0.01)).abs() < 1e-14);
}

#[test]
fn adam_zero_gradient_is_a_fixed_point() {
    let mut s = OptimizerState::new(OptimizerKind::Adam, 3);
    let mut p = [0.3, -1.0, 2.0];
    for _ in 0..10 {
        let before = p;
        s.step(&mut p, &[0.0; 3], 0.02).unwrap();
        for i in 0..3 {
            assert!((p[i] - before[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn optimizer_rejects_bad_input() {
    let mut s = OptimizerState::new(OptimizerKind::Sgd, 2);
    assert!(matches!(s.step(&mut [0.0, 0.0], &[1.0], 0.1), Err(Error::Shape(_))));
    assert!(matches!(s.step(&mut [0.0], &[f64::NAN], 0.1), Err(Error::NonFinite(_))));
}

#[test]
fn recorded_updates_match_numeric_bits() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Adam] {
        let grads = [[0.3, -0.7, 1e-3], [0.2, 0.0, -4.0], [1.5, 0.25, 0.125]];
        let mut numeric = OptimizerState::new(kind, 3);
        let mut p = vec![0.1, 0.2, -0.3];
        let mut t = Trace::new();
        let mut rec = numeric.record(&mut t);
        let mut theta = t.leaf(p.clone());
        for g in grads {
            numeric.step(&mut p, &g, 0.05).unwrap();
            let gn = t.constant(g.to_vec());
            theta = rec.step(&mut t, theta, gn, 0.05).unwrap();
        }
        let got: Vec<u64> = t.value(theta).iter().map(|v| v.to_bits()).collect();
        let want: Vec<u64> = p.iter().map(|v| v.to_bits()).collect();
        assert_eq!(got, want, "{kind:?}");
        assert_eq!(rec.finish(&mut t), numeric);
    }
}

fn front_camera(w: usize, h: usize) -> Camera {
    Camera {
        width: w,
        height: h,
        fx: 2.0 * w as f64,
        fy: 2.0 * h as f64,
        cx: w as f64 / 2.0,
        cy: h as f64 / 2.0,
        c2w: look_at([0.0, 0.0, 3.0], [0.0; 3], [0.0, 1.0, 0.0]).unwrap(),
        near: 1.0,
        far: 5.0,
    }
}

fn cfg(optimizer: OptimizerKind, lr: f64, steps: usize, batch: usize) -> FitConfig {
    FitConfig {
        steps,
        batch_rays: batch,
        optimizer,
        lr,
        final_lr_fraction: 1.0,
        render: RenderOptions::midpoint(16).unwrap(),
        loss: LossKind::Squared,
        seed: 7,
        deterministic: true,
    }
}

#[test]
fn zero_steps_leave_the_field_unchanged() {
    let mut f = AnyField::Grid(VoxelGridField::new(3).unwrap());
    let before = f.clone();
    let img = Image::filled(2, 2, [0.5; 3]).unwrap();
    let res = fit(&mut f, &[img], &[front_camera(2, 2)], &cfg(OptimizerKind::Adam, 0.02, 0, 4)).unwrap();
    assert!(res.losses.is_empty());
    assert_eq!(f, before);
}

#[test]
fn single_pixel_fit_converges() {
    let mut f = VoxelGridField::new(2).unwrap();
    let img = Image::filled(1, 1, [0.8, 0.3, 0.55]).unwrap();
    let res = fit(&mut f, &[img], &[front_camera(1, 1)], &cfg(OptimizerKind::Sgd, 1.0, 500, 1)).unwrap();
    let last = *res.losses.last().unwrap();
    assert!(last < 1e-4, "final loss {last}");
    let early: f64 = res.losses[..50].iter().sum();
    let late: f64 = res.losses[450..].iter().sum();
    assert!(late < early);
}

#[test]
fn fit_is_bit_reproducible() {
    let img = Image::new(3, 2, (0..18).map(|i| i as f64 / 17.0).collect()).unwrap();
    let cams = [front_camera(3, 2)];
    let mut c = cfg(OptimizerKind::Adam, 0.02, 20, 8);
    c.render.sampling_mode = SamplingMode::Stratified;
    let run = || {
        let mut f = AnyField::Mlp(TinyMlpField::new(1, 3));
        let r = fit(&mut f, &[img.clone()], &cams, &c).unwrap();
        (r.losses, f)
    };
    let (la, fa) = run();
    let (lb, fb) = run();
    assert_eq!(la.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), lb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(fa, fb);
}

#[test]
fn small_sgd_steps_descend() {
    let img = Image::new(3, 3, (0..27).map(|i| ((i * 7) % 11) as f64 / 10.0).collect()).unwrap();
    let cams = [front_camera(3, 3)];
    let field = VoxelGridField::new(3).unwrap();
    let batch = BatchSampler::new(&[img.clone()], 1).next_batch(9);
    let opts = RenderOptions::midpoint(16).unwrap();
    let loss_of = |p: &[f64]| {
        let mut t = Trace::new();
        let pn = t.constant(p.to_vec());
        let rays = batch_rays(&cams, &batch.pixels).unwrap();
        let tg = t.constant(batch_colors(&[img.clone()], &batch.pixels));
        let l = record_batch_loss(&mut t, &field, pn, &rays, tg, 0, &opts, LossKind::Squared).unwrap();
        t.scalar(l)
    };
    for lr in [1e-3, 1e-4] {
        let mut p = field.params().to_vec();
        let mut s = OptimizerState::new(OptimizerKind::Sgd, p.len());
        let before = train_step(&field, &mut p, &mut s, &[img.clone()], &cams, &batch, lr, &opts, LossKind::Squared, true)
            .unwrap();
        assert!((before - loss_of(field.params())).abs() < 1e-15);
        assert!(loss_of(&p) < before, "lr {lr}");
    }
}

#[test]
fn sampler_covers_views_uniformly() {
    let imgs = [Image::filled(4, 2, [0.0; 3]).unwrap(), Image::filled(2, 2, [0.0; 3]).unwrap()];
    let mut s = BatchSampler::new(&imgs, 0);
    let b = s.next_batch(12000);
    let first = b.pixels.iter().filter(|p| p.image == 0).count() as f64 / 12000.0;
    assert!((first - 2.0 / 3.0).abs() < 0.02);
    assert!(b.pixels.iter().all(|p| p.u < imgs[p.image].width() && p.v < imgs[p.image].height()));
}

#[test]
fn lr_decays_to_the_final_fraction() {
    let mut c = cfg(OptimizerKind::Adam, 0.02, 100, 1);
    c.final_lr_fraction = 0.1;
    assert_eq!(c.lr_at(0), 0.02);
    assert!((c.lr_at(100) - 0.002).abs() < 1e-15);
    assert!((c.lr_at(50) - 0.02 * 0.1f64.sqrt()).abs() < 1e-15);
}
