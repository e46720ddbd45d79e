use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use nalgebra::DMatrix;
use wexp_core::container::{write_pgm, Container, PayloadKind, SECTION_EIGENPAIRS};
use wexp_core::kernel::exp_kernel;
use wexp_core::spectral::{distance_range, eigendecompose, find_sigma_psd, lambda_min_scan, median_distance, FeatureMap, SigmaPsd};
use wexp_core::{Error, Result};

use crate::cache;
use crate::config::ExperimentConfig;
use crate::experiment::{self, grid_for, measures_of};

/// The cached symmetric distance matrix `dist` produced for this config:
/// the first seed's training split, or the whole dataset without a split.
pub fn cached_distances(cfg: &ExperimentConfig) -> Result<(DMatrix<f64>, PathBuf)> {
    let set = experiment::load_dataset(cfg)?;
    let (path, measures) = match &cfg.split {
        Some(sizes) => {
            let seed = cfg.seeds[0];
            let prep = experiment::prepare_split(&set, sizes, seed, cfg.coordinates)?;
            (experiment::split_cache_dir(&cfg.cache_dir, sizes, seed).join("train.wskn"), prep.train)
        }
        None => {
            let grid = grid_for(&set, cfg.coordinates)?;
            (cfg.cache_dir.join("dataset.wskn"), measures_of(&set, &grid)?)
        }
    };
    let key = cache::distance_key(&measures, None, &cfg.sinkhorn);
    match cache::open_verified(&path, &key)? {
        Some((m, _)) => Ok((m, path)),
        None => Err(Error::usage(format!(
            "no distance cache at {}; run `wexp dist` first",
            path.display()
        ))),
    }
}

#[derive(Debug, Clone)]
pub struct ScanOutput {
    pub scan: Vec<(f64, f64)>,
    pub psd: SigmaPsd,
    pub csv: PathBuf,
    pub heatmaps: Vec<PathBuf>,
}

/// λ_min over the configured σ grid, the σ_PSD estimate, and optional
/// heatmaps, written to `sigma_scan.csv`, `sigma_psd.csv` and
/// `kernel-<factor>.pgm`.
pub fn cmd_sigma_scan(cfg: &ExperimentConfig) -> Result<ScanOutput> {
    let (d, _) = cached_distances(cfg)?;
    let median = median_distance(&d)
        .filter(|m| *m > 0.0)
        .ok_or_else(|| Error::domain("distance matrix has no positive entries"))?;
    let factors = cfg.scan_factors.values();
    let sigmas: Vec<f64> = factors.iter().map(|f| f * median).collect();
    let scan = lambda_min_scan(&d, &sigmas)?;
    let max_d = distance_range(&d).map_or(median, |r| r.1);
    let psd = find_sigma_psd(&d, 1e3 * max_d, 1e-6)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut csv = String::from("sigma,median_factor,lambda_min\n");
    for ((s, l), f) in scan.iter().zip(&factors) {
        let _ = writeln!(csv, "{s},{f},{l}");
    }
    let csv_path = out.join("sigma_scan.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    let psd_path = out.join("sigma_psd.csv");
    let text = format!(
        "sigma,lambda_min,bracket_low,bracket_high,transition_found,lambda_min_at_4x,steps\n{},{},{},{},{},{},{}\n",
        psd.sigma, psd.lambda_min, psd.bracket.0, psd.bracket.1, psd.transition_found, psd.lambda_min_at_4x, psd.steps
    );
    fs::write(&psd_path, text).map_err(|e| Error::io(&psd_path, e))?;

    let mut heatmaps = Vec::new();
    for &f in &cfg.heatmap_factors {
        let k = d.map(|x| exp_kernel(x, f * median));
        let p = out.join(format!("kernel-{f}.pgm"));
        write_pgm(&k, &p)?;
        heatmaps.push(p);
    }
    Ok(ScanOutput {
        scan,
        psd,
        csv: csv_path,
        heatmaps,
    })
}

/// Writes the training features `V Λ^{1/2}` at bandwidth `sigma` (default:
/// the median distance) as a WSKN feature container and as CSV. Returns the
/// container path and ℓ.
pub fn cmd_features(cfg: &ExperimentConfig, sigma: Option<f64>) -> Result<(PathBuf, usize)> {
    let (d, _) = cached_distances(cfg)?;
    let sigma = match sigma {
        Some(s) => s,
        None => median_distance(&d)
            .filter(|m| *m > 0.0)
            .ok_or_else(|| Error::domain("distance matrix has no positive entries"))?,
    };
    let k = d.map(|x| exp_kernel(x, sigma));
    let fm = FeatureMap::truncate(&eigendecompose(&k)?, cfg.spectral_threshold)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("features.wskn");
    let features = fm.train_features();
    Container::new(PayloadKind::FeatureMap, cfg.sinkhorn.epsilon, sigma, features.clone())
        .with_section(SECTION_EIGENPAIRS, fm.to_section())
        .write(&path)?;
    wexp_core::container::write_matrix_csv(&features, out.join("features.csv"))?;
    Ok((path, fm.rank()))
}
