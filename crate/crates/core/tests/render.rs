mod common;

use common::*;
use dynagmap::geometry::CameraView;
use dynagmap::render::{project_gaussian, render_backward, render_splats, Projection};
use dynagmap::{build_covariance, Error, Gaussian, Image, Pose, RenderSettings};
use nalgebra::{Matrix2x3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn tiled_matches_naive_bit_for_bit() {
    let cam = small_camera(64, 64, 60.0);
    for seed in 0..12u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pose = random_pose(&mut rng);
        let n = rng.random_range(1..=200);
        let mut splats = random_splats(&mut rng, n, &cam, &pose, if seed % 2 == 0 { 1 } else { 3 });
        // push some splats toward and past the border
        for g in splats.iter_mut().step_by(5) {
            let shift = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 0.0);
            g.mean = pose.to_world(&(pose.to_camera(&g.mean) + shift));
        }
        let refs: Vec<&Gaussian> = splats.iter().collect();
        for lambda in [0.05, 0.5] {
            let s = RenderSettings::with_lambda_alpha(lambda);
            let (tiled, _) = render_splats(&refs, &cam, &pose, 0.0, &s).unwrap();
            let naive = naive_render(&refs, &cam, &pose, 0.0, &s);
            assert_eq!(tiled.rgb, naive.rgb, "seed {seed}");
            assert_eq!(tiled.depth, naive.depth, "seed {seed}");
            assert_eq!(tiled.alpha, naive.alpha, "seed {seed}");
            assert_eq!(tiled.contributors, naive.count, "seed {seed}");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let cam = small_camera(32, 32, 40.0);
    let mut total = GradCheckStats::default();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let pose = if seed % 2 == 0 { Pose::identity() } else { random_pose(&mut rng) };
        let n = if seed < 4 { 1 } else { rng.random_range(2..=6) };
        let splats = random_splats(&mut rng, n, &cam, &pose, if seed % 3 == 0 { 3 } else { 1 });
        let (g_rgb, g_depth) = random_upstream(&mut rng, &cam);
        let stats = gradcheck_scene(&splats, &cam, &pose, &RenderSettings::default(), &g_rgb, &g_depth, 1e-4);
        total.merge(&stats);
    }
    for (k, name) in CLASSES.iter().enumerate() {
        assert!(total.max_rel[k] < 1e-4, "{name}: {}", total.max_rel[k]);
    }
    assert!(total.discontinuous * 50 < total.checked, "{total:?}");
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let cam = small_camera(32, 32, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let splats = random_splats(&mut rng, 5, &cam, &Pose::identity(), 1);
    let refs: Vec<&Gaussian> = splats.iter().collect();
    let s = RenderSettings::default();
    let (_, state) = render_splats(&refs, &cam, &Pose::identity(), 0.0, &s).unwrap();
    let grads = render_backward(
        &refs,
        &cam,
        &Pose::identity(),
        0.0,
        &state,
        &Image::new(32, 32, [0.0; 3]),
        &Image::new(32, 32, 0.0),
    )
    .unwrap();
    for g in grads {
        assert_eq!(g.mean, Vector3::zeros());
        assert_eq!(g.rotation, [0.0; 4]);
        assert_eq!(g.log_scale, Vector3::zeros());
        assert_eq!(g.opacity_logit, 0.0);
        assert!(g.sh.iter().flatten().all(|&v| v == 0.0));
    }
}

#[test]
fn single_splat_opacity_gradient() {
    let cam = small_camera(32, 32, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let splats = random_splats(&mut rng, 1, &cam, &Pose::identity(), 0);
    let (g_rgb, g_depth) = random_upstream(&mut rng, &cam);
    let refs: Vec<&Gaussian> = splats.iter().collect();
    let s = RenderSettings::default();
    let (_, state) = render_splats(&refs, &cam, &Pose::identity(), 0.0, &s).unwrap();
    let grads = render_backward(&refs, &cam, &Pose::identity(), 0.0, &state, &g_rgb, &g_depth).unwrap();
    let h = 1e-4;
    let loss = |delta: f64| {
        let mut g = splats[0].clone();
        g.opacity_logit += delta;
        let (out, _) = render_splats(&[&g], &cam, &Pose::identity(), 0.0, &s).unwrap();
        weighted_loss(&out, &g_rgb, &g_depth)
    };
    let fd = (loss(h) - loss(-h)) / (2.0 * h);
    assert!(rel_err(grads[0].opacity_logit, fd) < 1e-4, "{} vs {fd}", grads[0].opacity_logit);
}

#[test]
fn sh_gradient_is_translation_invariant() {
    let cam = small_camera(32, 32, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (g_rgb, g_depth) = random_upstream(&mut rng, &cam);
    let mut g = random_splats(&mut rng, 1, &cam, &Pose::identity(), 1).remove(0);
    g.mean = Vector3::new(0.25, 0.125, 2.0);
    let s = RenderSettings::default();
    let sh_grad = |g: &Gaussian, pose: &Pose| {
        let (_, st) = render_splats(&[g], &cam, pose, 0.0, &s).unwrap();
        render_backward(&[g], &cam, pose, 0.0, &st, &g_rgb, &g_depth).unwrap()[0].sh.clone()
    };
    let a = sh_grad(&g, &Pose::identity());
    let shift = Vector3::new(1.0, 1.0, 0.0);
    let mut moved = g.clone();
    moved.mean += shift;
    let b = sh_grad(&moved, &Pose::from_translation(shift));
    assert_eq!(a, b);
}

#[test]
fn mismatched_forward_state_is_rejected() {
    let cam = small_camera(32, 32, 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let splats = random_splats(&mut rng, 3, &cam, &Pose::identity(), 1);
    let refs: Vec<&Gaussian> = splats.iter().collect();
    let s = RenderSettings::default();
    let (_, state) = render_splats(&refs, &cam, &Pose::identity(), 0.0, &s).unwrap();
    let (g_rgb, g_depth) = random_upstream(&mut rng, &cam);
    let err = render_backward(&refs[..2], &cam, &Pose::identity(), 0.0, &state, &g_rgb, &g_depth).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
    let err = render_backward(&refs, &cam, &Pose::identity(), 1.0, &state, &g_rgb, &g_depth).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
    let small = Image::new(16, 16, [0.0; 3]);
    let err = render_backward(&refs, &cam, &Pose::identity(), 0.0, &state, &small, &g_depth).unwrap_err();
    assert!(matches!(err, Error::ContractViolation(_)));
}

#[test]
fn degenerate_screen_covariance_is_counted() {
    let cam = small_camera(32, 32, 40.0);
    let mut g = Gaussian::new_static(0, Vector3::new(0.0, 0.0, 2.0), 0);
    g.log_scale = Vector3::new(25.0, 0.0, -3.0);
    let (out, _) = render_splats(&[&g], &cam, &Pose::identity(), 0.0, &RenderSettings::default()).unwrap();
    assert_eq!(out.n_singular, 1);
    assert!(out.rgb.data().iter().all(|c| *c == [0.0; 3]));
}

#[test]
fn screen_covariance_matches_numeric_jacobian() {
    let cam = small_camera(64, 64, 60.0);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let s = RenderSettings::default();
    for _ in 0..20 {
        let pose = random_pose(&mut rng);
        let g = random_splats(&mut rng, 1, &cam, &pose, 0).remove(0);
        let view = CameraView::new(&pose);
        let Projection::Visible(p) = project_gaussian(&g, 0, &cam, &view, 0.0, &s).unwrap() else {
            panic!("culled");
        };
        let t = pose.to_camera(&g.mean);
        let proj = |t: Vector3<f64>| [cam.fx * t.x / t.z + cam.cx, cam.fy * t.y / t.z + cam.cy];
        let h = 1e-6;
        let mut j = Matrix2x3::zeros();
        for k in 0..3 {
            let mut tp = t;
            let mut tm = t;
            tp[k] += h;
            tm[k] -= h;
            let (a, b) = (proj(tp), proj(tm));
            j[(0, k)] = (a[0] - b[0]) / (2.0 * h);
            j[(1, k)] = (a[1] - b[1]) / (2.0 * h);
        }
        let w = pose.rotation_matrix().transpose();
        let sigma = build_covariance(&g.rotation, &g.log_scale).unwrap();
        let c = j * w * sigma * w.transpose() * j.transpose();
        let expect = [c[(0, 0)] + 0.3, c[(0, 1)], c[(1, 1)] + 0.3];
        for k in 0..3 {
            let scale = expect[0].abs().max(expect[2].abs());
            assert!((p.cov2d[k] - expect[k]).abs() <= 1e-3 * scale, "{:?} vs {expect:?}", p.cov2d);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn alpha_never_decreases_when_splats_are_appended_behind(seed in 0u64..10_000, n in 1usize..12) {
        let cam = small_camera(24, 24, 30.0);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut splats = random_splats(&mut rng, n + 1, &cam, &Pose::identity(), 0);
        // the appended splat sits behind every other one
        let last = splats.last_mut().unwrap();
        last.mean.z = 10.0;
        let s = RenderSettings::default();
        let refs: Vec<&Gaussian> = splats.iter().collect();
        let (before, _) = render_splats(&refs[..n], &cam, &Pose::identity(), 0.0, &s).unwrap();
        let (after, _) = render_splats(&refs, &cam, &Pose::identity(), 0.0, &s).unwrap();
        for (a, b) in after.alpha.data().iter().zip(before.alpha.data()) {
            prop_assert!(a >= b);
            prop_assert!((0.0..=1.0).contains(a));
        }
    }

    #[test]
    fn covariance_is_psd(qw in -1.0f64..1.0, qx in -1.0f64..1.0, qy in -1.0f64..1.0, qz in -1.0f64..1.0,
                         sx in -6.0f64..1.5, sy in -6.0f64..1.5, sz in -6.0f64..1.5) {
        let q = nalgebra::Quaternion::new(qw, qx, qy, qz);
        prop_assume!(q.norm() > 1e-3);
        let q = nalgebra::UnitQuaternion::new_normalize(q);
        let c = build_covariance(&q, &Vector3::new(sx, sy, sz)).unwrap();
        prop_assert_eq!(c, c.transpose());
        let eig = c.symmetric_eigen().eigenvalues;
        prop_assert!(eig.min() >= -1e-12);
    }
}
