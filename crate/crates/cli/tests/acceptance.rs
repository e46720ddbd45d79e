//! End-to-end acceptance checks; prints one PASS/FAIL line per criterion.
//!
//! Criteria 4 to 6 and 8 read the distance caches of
//! `configs/mnist-500.conf`, computing them when absent (hours on one core).

mod common;

use std::collections::HashSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64;
use wexp_cli::commands::cmd_run;
use wexp_cli::config::{ExperimentConfig, Method, RawConfig};
use wexp_cli::experiment::{self, load_dataset, prepare_split, split_cache_dir, wasserstein_distances};
use wexp_core::classify::{self, train_dual, train_ovo, train_primal, TrainingInput};
use wexp_core::data::{balanced_subsample, load_idx, write_idx, SplitPlan};
use wexp_core::kernel::exp_kernel;
use wexp_core::measure::{build_ground_cost, image_to_measure, DiscreteMeasure, PixelGrid};
use wexp_core::spectral::{distance_range, eigendecompose, eigenvalues, find_sigma_psd, lambda_min_at, median_distance, FeatureMap};
use wexp_core::transport::{exact_lp_distance, sinkhorn_distance, sinkhorn_summary, ObjectiveKind, SinkhornConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn repo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn experiment_config() -> ExperimentConfig {
    RawConfig::from_file(&repo().join("configs/mnist-500.conf"))
        .and_then(|r| r.resolve())
        .expect("configs/mnist-500.conf")
}

fn normalized(raw: &[f64], grid: &Arc<PixelGrid>) -> DiscreteMeasure {
    let t: f64 = raw.iter().sum();
    DiscreteMeasure::from_weights(raw.iter().map(|w| w / t).collect(), Arc::clone(grid)).unwrap()
}

fn lp_agreement() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(11);
    let grid = Arc::new(PixelGrid::unit(5, 5).unwrap());
    let cost = build_ground_cost(&grid, &grid);
    let epsilons = [0.4, 0.1, 0.05, 0.01];
    let (mut worst_gap, mut worst_below) = (0.0f64, f64::NEG_INFINITY);
    let random_measure = |rng: &mut Pcg64| {
        let count = rng.random_range(1..=6);
        let atoms = rand::seq::index::sample(rng, 25, count).into_vec();
        let raw: Vec<f64> = atoms.iter().map(|_| rng.random_range(1.0..4.0)).collect();
        let total: f64 = raw.iter().sum();
        // Rescale so every atom keeps at least 0.05 of the mass.
        let k = atoms.len() as f64;
        let mut w = vec![0.0; 25];
        for (a, r) in atoms.iter().zip(&raw) {
            w[*a] = 0.05 + (1.0 - 0.05 * k) * r / total;
        }
        w
    };
    for _ in 0..20 {
        let a = normalized(&random_measure(&mut rng), &grid);
        let b = normalized(&random_measure(&mut rng), &grid);
        let lp = exact_lp_distance(&a, &b, &cost).map_err(|e| e.to_string())?;
        for eps in epsilons {
            let cfg = SinkhornConfig {
                marginal_tolerance: 1e-12,
                max_iterations: 200_000,
                ..SinkhornConfig::default().with_epsilon(eps).with_objective(ObjectiveKind::TransportCostOnly)
            };
            let s = sinkhorn_summary(&a, &b, &cost, &cfg).map_err(|e| e.to_string())?;
            if !s.converged {
                return Err(format!("no convergence at ε = {eps}"));
            }
            worst_below = worst_below.max(lp - s.objective);
            if eps == 0.01 {
                worst_gap = worst_gap.max((s.objective - lp).abs());
            }
        }
    }
    check(
        worst_gap <= 5e-2 && worst_below <= 1e-9,
        format!("20 pairs, max |W(0.01) − LP| = {worst_gap:.2e}, max LP − W(ε) = {worst_below:.2e}"),
    )
}

fn line_reduction() -> Outcome {
    let mut rng = Pcg64::seed_from_u64(12);
    let width = 28;
    let grid = Arc::new(PixelGrid::unit(width, 1).unwrap());
    let cost = build_ground_cost(&grid, &grid);
    let x = |i: usize| grid.coordinates()[i][1];
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(1..=8);
        let mut y = rand::seq::index::sample(&mut rng, width, n).into_vec();
        let mut z = rand::seq::index::sample(&mut rng, width, n).into_vec();
        y.sort_unstable();
        z.sort_unstable();
        let measure = |p: &[usize]| {
            let mut w = vec![0.0; width];
            p.iter().for_each(|&i| w[i] = 1.0);
            normalized(&w, &grid)
        };
        let lp = exact_lp_distance(&measure(&y), &measure(&z), &cost).map_err(|e| e.to_string())?;
        let expected = y.iter().zip(&z).map(|(&a, &b)| (x(a) - x(b)).powi(2)).sum::<f64>() / n as f64;
        worst = worst.max((lp - expected).abs());
    }
    check(worst <= 1e-8, format!("10 configurations, max deviation {worst:.2e}"))
}

fn marginal_feasibility() -> Outcome {
    let cfg = experiment_config();
    let set = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let grid = experiment::grid_for(&set, cfg.coordinates).map_err(|e| e.to_string())?;
    let cost = build_ground_cost(&grid, &grid);
    let mut rng = Pcg64::seed_from_u64(13);
    let (mut converged, mut worst, mut finite) = (0, 0.0f64, true);
    for _ in 0..100 {
        let i = rng.random_range(0..set.len());
        let j = rng.random_range(0..set.len());
        let a = image_to_measure(&set.images[i], &grid).map_err(|e| e.to_string())?;
        let b = image_to_measure(&set.images[j], &grid).map_err(|e| e.to_string())?;
        let plan = sinkhorn_distance(&a, &b, &cost, &cfg.sinkhorn).map_err(|e| e.to_string())?;
        finite &= plan.coupling.iter().all(|p| p.is_finite()) && plan.objective.is_finite();
        if plan.converged {
            converged += 1;
            let rows = plan.row_sums();
            let cols = plan.col_sums();
            for k in 0..a.len() {
                worst = worst.max((rows[k] - a.weights()[k]).abs());
                worst = worst.max((cols[k] - b.weights()[k]).abs());
            }
        }
    }
    check(
        finite && worst <= 1e-6,
        format!("{converged}/100 converged, max marginal violation {worst:.2e}, finite: {finite}"),
    )
}

/// Seed-1 train and validation distances of the experiment config.
struct Seed1 {
    train: DMatrix<f64>,
    validation: DMatrix<f64>,
    train_labels: Vec<usize>,
    validation_labels: Vec<usize>,
}

fn seed1() -> Result<Seed1, String> {
    let cfg = experiment_config();
    let sizes = cfg.split.expect("split section");
    let set = load_dataset(&cfg).map_err(|e| e.to_string())?;
    let prep = prepare_split(&set, &sizes, 1, cfg.coordinates).map_err(|e| e.to_string())?;
    let d = wasserstein_distances(&prep, &cfg.sinkhorn, &split_cache_dir(&cfg.cache_dir, &sizes, 1), true)
        .map_err(|e| e.to_string())?;
    Ok(Seed1 {
        train: d.train,
        validation: d.validation,
        train_labels: prep.splits.train.labels.clone(),
        validation_labels: prep.splits.validation.labels.clone(),
    })
}

/// First 200 training digits and the σ chosen for them on the validation split.
fn validated_200(s: &Seed1, cfg: &ExperimentConfig) -> Result<(DMatrix<f64>, f64, f64), String> {
    let d = s.train.view((0, 0), (200, 200)).into_owned();
    let median = median_distance(&d).ok_or("empty distance matrix")?;
    let sigmas: Vec<f64> = cfg.sigma_factors.values().iter().map(|f| f * median).collect();
    let v = classify::validate(
        classify::Method::Indefinite,
        &d,
        &s.train_labels[..200],
        &s.validation.columns(0, 200).into_owned(),
        &s.validation_labels,
        &sigmas,
        &cfg.gamma.values(),
        cfg.spectral_threshold,
        None,
    )
    .map_err(|e| e.to_string())?;
    Ok((d, v.sigma, v.gamma))
}

fn feature_reconstruction(d: &DMatrix<f64>, sigma: f64) -> Outcome {
    let k = d.map(|x| exp_kernel(x, sigma));
    let threshold = 1e-6;
    // Reference K^(ℓ) straight from nalgebra's eigensolver.
    let reference_eig = k.clone().symmetric_eigen();
    let mut reference = DMatrix::zeros(k.nrows(), k.ncols());
    let mut kept = 0;
    for (l, &lambda) in reference_eig.eigenvalues.iter().enumerate() {
        if lambda > threshold {
            let v = reference_eig.eigenvectors.column(l);
            reference += lambda * &v * v.transpose();
            kept += 1;
        }
    }
    let sys = eigendecompose(&k).map_err(|e| e.to_string())?;
    let fm = FeatureMap::truncate(&sys, threshold).map_err(|e| e.to_string())?;
    // Features through the out-of-sample map, evaluated on the training points.
    let phi = fm.features_from_kernel_rows(&k).map_err(|e| e.to_string())?;
    let product = &phi * phi.transpose();
    let gap = (&product - &reference).amax();
    let ev = eigenvalues(&product).map_err(|e| e.to_string())?;
    let (l1, lmin) = (ev[0], *ev.last().unwrap());
    check(
        gap <= 1e-8 && lmin >= -1e-10 * l1 && kept == fm.rank(),
        format!(
            "σ = {sigma:.4}, ℓ = {} (reference {kept}), λ_min(K) = {:.3e}, max gap {gap:.2e}, λ_min(ΦΦᵀ) = {lmin:.2e} (λ₁ = {l1:.1})",
            fm.rank(),
            sys.lambda_min()
        ),
    )
}

fn lambda_endpoints(d: &DMatrix<f64>) -> Outcome {
    let (lo, hi) = distance_range(d).ok_or("no positive distances")?;
    let small = lambda_min_at(d, 1e-2 * lo).map_err(|e| e.to_string())?;
    let large = lambda_min_at(d, 1e3 * hi).map_err(|e| e.to_string())?;
    check(
        small >= 0.99 && large <= 1e-3,
        format!("λ_min(σ = {:.3e}) = {small:.6}, λ_min(σ = {:.3e}) = {large:.3e}", 1e-2 * lo, 1e3 * hi),
    )
}

fn nystrom_monotone(s: &Seed1) -> Outcome {
    let n = s.train.nrows();
    let max_d = distance_range(&s.train).ok_or("no positive distances")?.1;
    let psd = find_sigma_psd(&s.train, 1e3 * max_d, 1e-6).map_err(|e| e.to_string())?;
    let median = median_distance(&s.train).ok_or("empty")?;
    // A bandwidth at which the joint train+test kernel is PSD.
    let sigma = median.min(psd.sigma);
    let half = n / 2;
    let k = s.train.map(|x| exp_kernel(x, sigma));
    let k_train = k.view((0, 0), (half, half)).into_owned();
    let k_cross = k.view((half, 0), (n - half, half)).into_owned();
    let k_test = k.view((half, half), (n - half, n - half)).into_owned();
    let sys = eigendecompose(&k_train).map_err(|e| e.to_string())?;
    let mut gaps = Vec::new();
    for ell in [5, 15, 50, 250] {
        let fm = FeatureMap::truncate_to(&sys, 1e-6, ell).map_err(|e| e.to_string())?;
        let f = fm.features_from_kernel_rows(&k_cross).map_err(|e| e.to_string())?;
        gaps.push((ell, fm.rank(), (&f * f.transpose() - &k_test).amax()));
    }
    let monotone = gaps.windows(2).all(|w| w[1].2 <= w[0].2 + 1e-10);
    let listed: Vec<String> = gaps.iter().map(|(l, r, g)| format!("ℓ={l}(rank {r}): {g:.3e}")).collect();
    check(monotone, format!("σ = {sigma:.4} (σ_PSD {:.4}), gaps {}", psd.sigma, listed.join(", ")))
}

fn solver_correctness(d: &DMatrix<f64>, labels: &[usize], sigma: f64) -> Outcome {
    let hand = train_dual(&DMatrix::identity(2, 2), &[1.0, -1.0], 2.0).map_err(|e| e.to_string())?;
    let hand_ok = (hand.alpha[0] - 0.5).abs() <= 1e-12 && (hand.alpha[1] + 0.5).abs() <= 1e-12 && hand.b.abs() <= 1e-12;

    // Every dual solve of the 200-digit problem, residual checked independently.
    let k = d.map(|x| exp_kernel(x, sigma));
    let (mut solves, mut worst) = (0, 0.0f64);
    for gamma in [1e-2, 1.0, 1e2, 1e4] {
        let ens = train_ovo(TrainingInput::Gram(&k), labels, classify::Method::Indefinite, sigma, gamma)
            .map_err(|e| e.to_string())?;
        for p in &ens.pairs {
            let sub = k.select_rows(p.indices.iter()).select_columns(p.indices.iter());
            let m = p.indices.len();
            let y: Vec<f64> = p
                .indices
                .iter()
                .map(|&i| if labels[i] == ens.classes[p.first] { 1.0 } else { -1.0 })
                .collect();
            let alpha = DVector::from_column_slice(&p.weights);
            let top = &sub * &alpha + &alpha * (m as f64 / gamma) + DVector::from_element(m, p.b) - DVector::from_vec(y);
            worst = worst.max(top.amax().max(alpha.sum().abs()));
            solves += 1;
        }
    }

    // Primal and dual agree with full-rank features on a PSD gram.
    let mut s = sigma;
    let mut k_psd = d.map(|x| exp_kernel(x, s));
    while eigendecompose(&k_psd).map_err(|e| e.to_string())?.lambda_min() < 1e-4 {
        s /= 2.0;
        k_psd = d.map(|x| exp_kernel(x, s));
    }
    let sys = eigendecompose(&k_psd).map_err(|e| e.to_string())?;
    let fm = FeatureMap::truncate(&sys, 1e-6).map_err(|e| e.to_string())?;
    let phi = fm.train_features();
    let y: Vec<f64> = labels.iter().map(|&l| if l % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let mut agreement = 0.0f64;
    for gamma in [0.1, 10.0, 1e3] {
        let p = train_primal(&phi, &y, gamma).map_err(|e| e.to_string())?;
        let q = train_dual(&k_psd, &y, gamma).map_err(|e| e.to_string())?;
        worst = worst.max(p.residual).max(q.residual);
        for i in 0..y.len() {
            let row: Vec<f64> = phi.row(i).iter().copied().collect();
            let col: Vec<f64> = k_psd.column(i).iter().copied().collect();
            agreement = agreement.max((p.score(&row) - q.score(&col)).abs());
        }
    }
    check(
        hand_ok && worst <= 1e-8 && agreement <= 1e-6 && fm.rank() == y.len(),
        format!(
            "hand case ok: {hand_ok}, {solves} OVO solves + 6 binary, max residual {worst:.2e}, primal-dual gap {agreement:.2e} at σ = {s:.4} (ℓ = N = {})",
            fm.rank()
        ),
    )
}

fn classification_ordering() -> Outcome {
    let cfg = experiment_config();
    let start = Instant::now();
    let out = cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    let mean = |m: Method| out.summary.iter().find(|r| r.method == m).and_then(|r| r.mean);
    let (Some(ind), Some(rbf), Some(wknn), Some(l2)) =
        (mean(Method::Indefinite), mean(Method::Rbf), mean(Method::WassKnn), mean(Method::L2Knn))
    else {
        return Err(format!("missing results:\n{}", wexp_cli::commands::summary_table(&out.summary)));
    };
    let non_converged: usize = out.records.iter().filter(|r| r.method == Method::Indefinite).map(|r| r.non_converged).sum();
    check(
        ind <= rbf && wknn < l2 && rbf < l2,
        format!(
            "mean test error: indefinite {ind:.2}%, rbf {rbf:.2}%, wass-knn {wknn:.2}%, l2-knn {l2:.2}% \
             ({} s, {non_converged} non-converged pairs)",
            start.elapsed().as_secs()
        ),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = common::config(dir.path(), common::SMALL_RUN);
    let first = cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    let a = std::fs::read(&first.results_csv).map_err(|e| e.to_string())?;
    // Recompute everything, caches included.
    std::fs::remove_dir_all(&cfg.cache_dir).map_err(|e| e.to_string())?;
    let second = cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    let b = std::fs::read(&second.results_csv).map_err(|e| e.to_string())?;
    let c = std::fs::read(&cfg.output_dir.join("summary.csv")).map_err(|e| e.to_string())?;
    let third = cmd_run(&cfg, false).map_err(|e| e.to_string())?;
    let d = std::fs::read(&third.summary_csv).map_err(|e| e.to_string())?;
    check(
        a == b && c == d && !a.is_empty(),
        format!("{} records, {} bytes, identical across three runs: {}", first.records.len(), a.len(), a == b && c == d),
    )
}

fn idx_and_splits() -> Outcome {
    let dir = common::mnist_dir();
    let set = load_idx(dir.join("digits-10k-images-idx3-ubyte.gz"), dir.join("digits-10k-labels-idx1-ubyte.gz"))
        .map_err(|e| e.to_string())?;
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (img, lab) = (tmp.path().join("images.idx"), tmp.path().join("labels.idx"));
    write_idx(&set, &img, &lab).map_err(|e| e.to_string())?;
    let back = load_idx(&img, &lab).map_err(|e| e.to_string())?;
    let round_trip = back.images == set.images && back.labels == set.labels;
    let mut balanced = true;
    let mut disjoint = true;
    let mut reproducible = true;
    for seed in 1..=3 {
        let plan = SplitPlan {
            train_size: 500,
            validation_size: 500,
            test_size: 1000,
            core_size: Some(200),
            rng_seed: seed,
        };
        let s = balanced_subsample(&set, &plan).map_err(|e| e.to_string())?;
        for split in [&s.train, &s.validation, &s.test] {
            let counts: Vec<usize> = (0..10).map(|c| split.count_per_class().get(&c).copied().unwrap_or(0)).collect();
            balanced &= counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1;
        }
        let core = s.train.select(&(0..200).collect::<Vec<_>>());
        balanced &= core.count_per_class().values().all(|&c| c == 20);
        let all: Vec<usize> = s.train_indices.iter().chain(&s.validation_indices).chain(&s.test_indices).copied().collect();
        disjoint &= all.iter().collect::<HashSet<_>>().len() == all.len();
        let again = balanced_subsample(&set, &plan).map_err(|e| e.to_string())?;
        reproducible &= again.train_indices == s.train_indices
            && again.validation_indices == s.validation_indices
            && again.test_indices == s.test_indices;
    }
    check(
        round_trip && balanced && disjoint && reproducible,
        format!(
            "{} digits: round trip {round_trip}, balanced {balanced}, disjoint {disjoint}, reproducible {reproducible}",
            set.len()
        ),
    )
}

fn main() -> ExitCode {
    // Numeric arguments select criteria; libtest flags such as `--quiet` are ignored.
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let cfg = experiment_config();
    let mut results: Vec<Outcome> = Vec::new();
    let mut report = |n: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        if !wanted(n) {
            return;
        }
        let o = run();
        match &o {
            Ok(d) => println!("criterion {n:>2} PASS  {name}: {d}"),
            Err(d) => println!("criterion {n:>2} FAIL  {name}: {d}"),
        }
        results.push(o);
    };
    report(1, "Sinkhorn vs exact LP", &mut lp_agreement);
    report(2, "1D reduction", &mut line_reduction);
    report(3, "marginal feasibility", &mut marginal_feasibility);
    if (4..=7).any(wanted) {
        let prepared = seed1().and_then(|s| validated_200(&s, &cfg).map(|v| (s, v)));
        let names = [
            "truncated kernel reconstruction",
            "λ_min endpoints",
            "out-of-sample gap monotone in ℓ",
            "LS-SVM solver correctness",
        ];
        match prepared {
            Ok((s, (d, sigma, _))) => {
                report(4, names[0], &mut || feature_reconstruction(&d, sigma));
                report(5, names[1], &mut || lambda_endpoints(&d));
                report(6, names[2], &mut || nystrom_monotone(&s));
                report(7, names[3], &mut || solver_correctness(&d, &s.train_labels[..200], sigma));
            }
            Err(e) => {
                for (n, name) in (4..=7).zip(names) {
                    report(n, name, &mut || Err(format!("seed-1 distances unavailable: {e}")));
                }
            }
        }
    }
    report(8, "classification ordering on MNIST 500", &mut classification_ordering);
    report(9, "determinism", &mut determinism);
    report(10, "IDX round trip and balanced splits", &mut idx_and_splits);
    let failed = results.iter().filter(|r| r.is_err()).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
