use std::sync::Arc;

use proptest::prelude::*;
use wexp_core::measure::{build_ground_cost, DiscreteMeasure, GroundCost, PixelGrid};
use wexp_core::transport::{
    exact_lp_distance, pairwise_distances, sinkhorn_distance, sinkhorn_summary, ObjectiveKind, SinkhornConfig,
};

fn grid(w: usize, h: usize) -> Arc<PixelGrid> {
    Arc::new(PixelGrid::unit(w, h).unwrap())
}

fn normalized(raw: &[f64], grid: &Arc<PixelGrid>) -> DiscreteMeasure {
    let total: f64 = raw.iter().sum();
    DiscreteMeasure::from_weights(raw.iter().map(|w| w / total).collect(), Arc::clone(grid)).unwrap()
}

fn cost_cfg(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig::default()
        .with_epsilon(epsilon)
        .with_objective(ObjectiveKind::TransportCostOnly)
}

/// Marginals tight enough that the coupling is feasible to rounding error.
fn tight_cfg(epsilon: f64) -> SinkhornConfig {
    SinkhornConfig {
        marginal_tolerance: 1e-12,
        max_iterations: 200_000,
        ..cost_cfg(epsilon)
    }
}

/// Raw weights on a 3×3 grid with at most six atoms, each at least 0.05
/// after normalization.
fn small_measure() -> impl Strategy<Value = Vec<f64>> {
    (proptest::sample::subsequence((0..9).collect::<Vec<usize>>(), 1..=6), proptest::collection::vec(1.0f64..10.0, 6))
        .prop_map(|(atoms, mass)| {
            let mut w = vec![0.0; 9];
            let k = atoms.len() as f64;
            // Each atom gets at least 1/(2k) ≥ 1/12 of the mass.
            let total: f64 = mass[..atoms.len()].iter().sum();
            for (slot, &a) in atoms.iter().enumerate() {
                w[a] = 0.5 / k + 0.5 * mass[slot] / total;
            }
            w
        })
}

/// Golden-section minimum of a unimodal function on `[lo, hi]`.
fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    for _ in 0..200 {
        let a = hi - r * (hi - lo);
        let b = lo + r * (hi - lo);
        if f(a) < f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    f(0.5 * (lo + hi))
}

#[test]
fn two_point_regularized_objective_matches_scalar_minimization() {
    let g = Arc::new(PixelGrid::pixel(2, 1).unwrap());
    let cost = build_ground_cost(&g, &g);
    let a = normalized(&[1.0, 1.0], &g);
    let eps = 0.1;
    let cfg = SinkhornConfig {
        marginal_tolerance: 1e-14,
        max_iterations: 100_000,
        ..SinkhornConfig::default().with_epsilon(eps)
    };
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    // Couplings [[t, ½−t], [½−t, t]]; off-diagonal entries pay d² = 1.
    let objective = |t: f64| 2.0 * (0.5 - t) + eps * (2.0 * xlogx(t) + 2.0 * xlogx(0.5 - t));
    let oracle = golden_section(objective, 0.0, 0.5);
    let plan = sinkhorn_distance(&a, &a, &cost, &cfg).unwrap();
    assert!(plan.converged);
    // The regularized value is negative here and therefore floored.
    assert!((plan.objective - oracle.max(0.0)).abs() < 1e-10);
    let pi = &plan.coupling;
    let raw = pi[1] + pi[2] + eps * pi.iter().map(|&x| xlogx(x)).sum::<f64>();
    assert!((raw - oracle).abs() < 1e-10, "{raw} vs {oracle}");
}

#[test]
fn lp_on_sorted_line_is_mean_square_shift() {
    let g = Arc::new(PixelGrid::pixel(5, 1).unwrap());
    let cost = build_ground_cost(&g, &g);
    let a = normalized(&[0.0, 1.0, 1.0, 1.0, 0.0], &g);
    let b = normalized(&[0.0, 0.0, 1.0, 1.0, 1.0], &g);
    assert!((exact_lp_distance(&a, &b, &cost).unwrap() - 1.0).abs() < 1e-12);
    assert!(exact_lp_distance(&a, &a, &cost).unwrap().abs() < 1e-12);
}

#[test]
fn lp_rejects_large_supports() {
    let g = grid(9, 9);
    let cost = build_ground_cost(&g, &g);
    let a = normalized(&vec![1.0; 81], &g);
    assert!(exact_lp_distance(&a, &a, &cost).is_err());
}

#[test]
fn pairwise_matches_serial_calls_bitwise() {
    let g = grid(3, 3);
    let cost = build_ground_cost(&g, &g);
    let set: Vec<DiscreteMeasure> = (0..5)
        .map(|k| normalized(&(0..9).map(|i| ((i * 7 + k * 3) % 5) as f64 + 0.5).collect::<Vec<_>>(), &g))
        .collect();
    let cfg = cost_cfg(0.05);
    let d = pairwise_distances(&set, &set, &cost, &cfg).unwrap();
    for i in 0..5 {
        assert_eq!(d.matrix[(i, i)], 0.0);
        for j in 0..5 {
            assert_eq!(d.matrix[(i, j)], d.matrix[(j, i)]);
            if i < j {
                let s = sinkhorn_summary(&set[i], &set[j], &cost, &cfg).unwrap();
                assert_eq!(d.matrix[(i, j)].to_bits(), s.objective.to_bits());
            }
        }
    }
    let cross = pairwise_distances(&set[..2], &set[2..], &cost, &cfg).unwrap();
    assert_eq!(cross.matrix.shape(), (2, 3));
    assert!(cross.matrix.iter().all(|&x| x >= 0.0));
}

#[test]
fn mismatched_cost_is_usage_error() {
    let g = grid(3, 3);
    let small = grid(2, 2);
    let cost = build_ground_cost(&small, &small);
    let a = normalized(&[1.0; 9], &g);
    assert!(matches!(
        sinkhorn_summary(&a, &a, &cost, &SinkhornConfig::default()),
        Err(wexp_core::Error::Usage(_))
    ));
}

fn check_pair(cost: &GroundCost, a: &DiscreteMeasure, b: &DiscreteMeasure) -> Result<(), TestCaseError> {
    let lp = exact_lp_distance(a, b, cost).unwrap();
    let c_max = cost.max();
    for eps in [0.01, 0.05, 0.2, 0.4] {
        let s = sinkhorn_summary(a, b, cost, &tight_cfg(eps)).unwrap();
        // Nearly disconnected supports can stall at ε = 0.01; a plan off its
        // marginals by δ (max-abs) may undercut the LP by c_max · 2n · δ.
        if eps > 0.01 {
            prop_assert!(s.converged, "no convergence at ε = {eps}");
        }
        let slack = 1e-9 + c_max * 2.0 * a.len() as f64 * s.marginal_error;
        prop_assert!(s.objective >= lp - slack, "ε = {eps}: {} < LP {lp}", s.objective);
        if eps == 0.01 {
            prop_assert!((s.objective - lp).abs() <= 5e-2, "ε = 0.01: {} vs LP {lp}", s.objective);
        }
    }
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn transport_cost_bounds_lp(wa in small_measure(), wb in small_measure()) {
        let g = grid(3, 3);
        let cost = build_ground_cost(&g, &g);
        check_pair(&cost, &normalized(&wa, &g), &normalized(&wb, &g))?;
    }

    #[test]
    fn plans_are_feasible_and_finite(
        wa in proptest::collection::vec(0.0f64..1.0, 16),
        wb in proptest::collection::vec(0.0f64..1.0, 16),
        eps in 0.02f64..1.0,
    ) {
        prop_assume!(wa.iter().sum::<f64>() > 0.1 && wb.iter().sum::<f64>() > 0.1);
        let g = grid(4, 4);
        let cost = build_ground_cost(&g, &g);
        let (a, b) = (normalized(&wa, &g), normalized(&wb, &g));
        let plan = sinkhorn_distance(&a, &b, &cost, &SinkhornConfig::default().with_epsilon(eps)).unwrap();
        prop_assert!(plan.coupling.iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!(plan.objective.is_finite() && plan.objective >= 0.0);
        if plan.converged {
            let rows = plan.row_sums();
            let cols = plan.col_sums();
            for i in 0..16 {
                prop_assert!((rows[i] - a.weights()[i]).abs() <= 1e-6);
                prop_assert!((cols[i] - b.weights()[i]).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn symmetric_in_its_arguments(
        wa in proptest::collection::vec(0.05f64..1.0, 9),
        wb in proptest::collection::vec(0.05f64..1.0, 9),
        kind in prop_oneof![Just(ObjectiveKind::TransportCostOnly), Just(ObjectiveKind::RegularizedObjective)],
    ) {
        let g = grid(3, 3);
        let cost = build_ground_cost(&g, &g);
        let (a, b) = (normalized(&wa, &g), normalized(&wb, &g));
        let cfg = SinkhornConfig::default().with_epsilon(0.1).with_objective(kind);
        let ab = sinkhorn_summary(&a, &b, &cost, &cfg).unwrap().objective;
        let ba = sinkhorn_summary(&b, &a, &cost, &cfg).unwrap().objective;
        prop_assert!((ab - ba).abs() <= 1e-10, "{ab} vs {ba}");
        let (pa, pb) = (sinkhorn_distance(&a, &b, &cost, &cfg).unwrap(), sinkhorn_distance(&b, &a, &cost, &cfg).unwrap());
        for i in 0..9 {
            for j in 0..9 {
                prop_assert_eq!(pa.get(i, j), pb.get(j, i));
            }
        }
    }

    #[test]
    fn pruning_does_not_change_results(
        wa in proptest::collection::vec(prop_oneof![Just(0.0), 0.1f64..1.0], 9),
        wb in proptest::collection::vec(prop_oneof![Just(0.0), 0.1f64..1.0], 9),
    ) {
        prop_assume!(wa.iter().sum::<f64>() > 0.0 && wb.iter().sum::<f64>() > 0.0);
        let g = grid(3, 3);
        let cost = build_ground_cost(&g, &g);
        let (a, b) = (normalized(&wa, &g), normalized(&wb, &g));
        let on = SinkhornConfig::default().with_epsilon(0.1);
        let off = SinkhornConfig { prune_zero_atoms: false, ..on };
        let x = sinkhorn_summary(&a, &b, &cost, &on).unwrap().objective;
        let y = sinkhorn_summary(&a, &b, &cost, &off).unwrap().objective;
        prop_assert!((x - y).abs() <= 1e-10, "{x} vs {y}");
    }
}

#[test]
fn mnist_pairs_stay_finite_at_default_epsilon() {
    use wexp_core::data::load_idx_images;
    use wexp_core::measure::image_to_measure;
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist/digits-10k-images-idx3-ubyte.gz");
    let (w, h, images) = load_idx_images(path).unwrap();
    for g in [Arc::new(PixelGrid::unit(w, h).unwrap()), Arc::new(PixelGrid::pixel(w, h).unwrap())] {
        let cost = build_ground_cost(&g, &g);
        let m: Vec<DiscreteMeasure> = images[..6].iter().map(|i| image_to_measure(i, &g).unwrap()).collect();
        for i in 0..m.len() {
            for j in i + 1..m.len() {
                let plan = sinkhorn_distance(&m[i], &m[j], &cost, &SinkhornConfig::default()).unwrap();
                assert!(plan.coupling.iter().all(|p| p.is_finite()));
                assert!(plan.objective.is_finite());
            }
        }
    }
}

#[test]
fn four_versus_five_points_bound_by_lp() {
    let g = grid(3, 3);
    let cost = build_ground_cost(&g, &g);
    let a = normalized(&[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 3.0, 0.0], &g);
    let b = normalized(&[0.0, 1.0, 0.0, 1.0, 2.0, 0.0, 1.0, 0.0, 1.0], &g);
    let lp = exact_lp_distance(&a, &b, &cost).unwrap();
    let coarse = sinkhorn_summary(&a, &b, &cost, &tight_cfg(0.4)).unwrap().objective;
    let fine = sinkhorn_summary(&a, &b, &cost, &tight_cfg(0.01)).unwrap().objective;
    assert!(lp <= coarse + 1e-9 && lp <= fine + 1e-9);
    assert!((fine - lp).abs() <= 5e-2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// On a line, sorted equal-count uniform measures couple in order.
    #[test]
    fn line_distance_is_sorted_mean_square(
        xs in proptest::sample::subsequence((0..10).collect::<Vec<usize>>(), 1..=5),
        ys_seed in proptest::sample::subsequence((0..10).collect::<Vec<usize>>(), 5),
    ) {
        let k = xs.len();
        let ys: Vec<usize> = ys_seed.into_iter().take(k).collect();
        let g = Arc::new(PixelGrid::pixel(10, 1).unwrap());
        let cost = build_ground_cost(&g, &g);
        let mut wa = vec![0.0; 10];
        let mut wb = vec![0.0; 10];
        xs.iter().for_each(|&x| wa[x] = 1.0);
        ys.iter().for_each(|&y| wb[y] = 1.0);
        let expected = xs.iter().zip(&ys).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / k as f64;
        let lp = exact_lp_distance(&normalized(&wa, &g), &normalized(&wb, &g), &cost).unwrap();
        prop_assert!((lp - expected).abs() <= 1e-9, "{lp} vs {expected}");
    }
}
