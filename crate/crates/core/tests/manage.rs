//! Dynamic management against brute-force oracles.

mod common;

use common::{check_association_instance, field, random_point};
use dynagmap::manage::{associate_dynamic, earlier_position, prune_dynamic, transformed_points};
use dynagmap::{Gaussian, GaussianMap, GsFlowField, ManageConfig};
use nalgebra::Vector3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn association_equals_brute_force_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for instance in 0..1000 {
        if let Err(e) = check_association_instance(&mut rng, instance) {
            panic!("{e}");
        }
    }
}

#[test]
fn zero_threshold_never_reuses_displaced_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let points: Vec<_> = (0..50).map(|_| random_point(&mut rng)).collect();
    let gs: Vec<_> = (0..30).map(|j| Gaussian::new_dynamic(j, random_point(&mut rng), 0)).collect();
    let assoc = associate_dynamic(&field(points, vec![Vector3::zeros(); 50]), &gs, 0.0);
    assert_eq!(assoc.reuse_count, 0);
    assert_eq!(assoc.spawn_count, 50);
}

fn map_with(gs: Vec<Gaussian>, w: i64, budget: usize) -> GaussianMap {
    let mut map = GaussianMap::new(ManageConfig {
        dyna_longevity_w: w,
        dyna_budget: budget,
        ..Default::default()
    });
    map.next_id = gs.iter().map(|g| g.id + 1).max().unwrap_or(0);
    map.dynamic_set = gs;
    map
}

#[test]
fn longevity_boundary_is_exact() {
    let t = 20;
    let w = 10;
    let gs: Vec<_> = (0..4).map(|k| Gaussian::new_dynamic(k, Vector3::new(k as f64, 0.0, 0.0), t - w - 2 + k as i64)).collect();
    let pts: Vec<_> = gs.iter().map(|g| g.mean).collect();
    let mut map = map_with(gs, w, 1000);
    prune_dynamic(&mut map, &field(pts, vec![Vector3::zeros(); 4]), 1.0, 0.5, t);
    // births t-W-2 and t-W-1 exceed the window; t-W and t-W+1 stay
    let births: Vec<i64> = map.dynamic_set.iter().map(|g| g.birth_frame).collect();
    assert_eq!(births, vec![t - w, t - w + 1]);
}

#[test]
fn budget_removes_exactly_the_oldest_surplus() {
    let n = 60_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gs: Vec<_> = (0..n)
        .map(|k| Gaussian::new_dynamic(k as u64, random_point(&mut rng) * 10.0, 100 - rng.random_range(0..8)))
        .collect();
    let mut order: Vec<(i64, u64)> = gs.iter().map(|g| (g.birth_frame, g.id)).collect();
    order.sort();
    let survivors: std::collections::BTreeSet<u64> = order[10_000..].iter().map(|o| o.1).collect();
    let pts: Vec<_> = gs.iter().map(|g| g.mean).collect();
    let mut map = map_with(gs, 50, 50_000);
    let deleted = prune_dynamic(&mut map, &field(pts, vec![Vector3::zeros(); n]), 1.0, 0.1, 100);
    assert_eq!(deleted.len(), 10_000);
    assert_eq!(map.dynamic_set.len(), 50_000);
    assert!(map.dynamic_set.iter().all(|g| survivors.contains(&g.id)));
}

#[test]
fn empty_flow_removes_every_dynamic_gaussian() {
    let gs: Vec<_> = (0..5).map(|k| Gaussian::new_dynamic(k, Vector3::zeros(), 3)).collect();
    let mut map = map_with(gs, 10, 100);
    prune_dynamic(&mut map, &GsFlowField::default(), 0.0, 0.05, 4);
    assert!(map.dynamic_set.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn survivors_are_observed(seed in 0u64..10_000, n_pts in 1usize..60, n_gs in 0usize..60, lambda in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points: Vec<_> = (0..n_pts).map(|_| random_point(&mut rng)).collect();
        let disp: Vec<_> = (0..n_pts).map(|_| random_point(&mut rng) * 0.1).collect();
        let gs: Vec<_> = (0..n_gs).map(|j| Gaussian::new_dynamic(j as u64, random_point(&mut rng), 5)).collect();
        let flow = field(points, disp);
        let assoc = associate_dynamic(&flow, &gs, lambda);
        let mut map = map_with(gs, 10, 1000);
        prune_dynamic(&mut map, &flow, assoc.d_bar, lambda, 6);
        let radius = lambda * assoc.d_bar;
        let q = transformed_points(&flow);
        for g in &map.dynamic_set {
            let p = earlier_position(g, 6);
            prop_assert!(q.iter().any(|x| (x - p).norm() <= radius));
        }
    }
}
