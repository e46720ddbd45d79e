//! Splits, measures and cached distances for one repetition.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use wexp_core::data::{balanced_subsample, LabeledImageSet, SplitPlan, Splits};
use wexp_core::kernel::squared_euclidean_distances;
use wexp_core::measure::{build_ground_cost, image_to_measure, CoordinateScale, DiscreteMeasure, GrayImage, GroundCost, PixelGrid};
use wexp_core::transport::{ConvergenceReport, SinkhornConfig};
use wexp_core::Result;

use crate::cache::{self, CacheStatus};
use crate::config::{ExperimentConfig, SplitSizes};

/// Lifts every image of a set onto one shared grid.
pub fn measures_of(set: &LabeledImageSet, grid: &Arc<PixelGrid>) -> Result<Vec<DiscreteMeasure>> {
    measures_of_images(&set.images, grid)
}

pub fn measures_of_images(images: &[GrayImage], grid: &Arc<PixelGrid>) -> Result<Vec<DiscreteMeasure>> {
    images.iter().map(|img| image_to_measure(img, grid)).collect()
}

pub fn grid_for(set: &LabeledImageSet, scale: CoordinateScale) -> Result<Arc<PixelGrid>> {
    grid_for_dims(set.width, set.height, scale)
}

pub fn grid_for_dims(width: usize, height: usize, scale: CoordinateScale) -> Result<Arc<PixelGrid>> {
    Ok(Arc::new(PixelGrid::new(width, height, scale)?))
}

/// One repetition's splits lifted to measures.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub seed: u64,
    pub splits: Splits,
    pub train: Vec<DiscreteMeasure>,
    pub validation: Vec<DiscreteMeasure>,
    pub test: Vec<DiscreteMeasure>,
    pub cost: Arc<GroundCost>,
}

pub fn prepare_split(set: &LabeledImageSet, sizes: &SplitSizes, seed: u64, scale: CoordinateScale) -> Result<PreparedSplit> {
    let plan = SplitPlan {
        train_size: sizes.train,
        validation_size: sizes.validation,
        test_size: sizes.test,
        core_size: sizes.core,
        rng_seed: seed,
    };
    let splits = balanced_subsample(set, &plan)?;
    let grid = grid_for(set, scale)?;
    Ok(PreparedSplit {
        seed,
        train: measures_of(&splits.train, &grid)?,
        validation: measures_of(&splits.validation, &grid)?,
        test: measures_of(&splits.test, &grid)?,
        cost: Arc::new(build_ground_cost(&grid, &grid)),
        splits,
    })
}

/// Squared distances from every split to the training split.
#[derive(Debug, Clone)]
pub struct SplitDistances {
    /// `N × N`, zero diagonal.
    pub train: DMatrix<f64>,
    /// `V × N`
    pub validation: DMatrix<f64>,
    /// `T × N`
    pub test: DMatrix<f64>,
    pub report: ConvergenceReport,
    pub cache_hits: usize,
}

/// Directory holding the caches of one split.
pub fn split_cache_dir(cache_dir: &Path, sizes: &SplitSizes, seed: u64) -> PathBuf {
    cache_dir.join(format!(
        "seed{seed}-train{}-val{}-test{}",
        sizes.train, sizes.validation, sizes.test
    ))
}

fn merge(into: &mut ConvergenceReport, other: &ConvergenceReport) {
    into.pairs += other.pairs;
    into.non_converged.extend_from_slice(&other.non_converged);
    into.max_marginal_error = into.max_marginal_error.max(other.max_marginal_error);
    into.max_iterations_used = into.max_iterations_used.max(other.max_iterations_used);
    into.total_iterations += other.total_iterations;
}

/// Sinkhorn distances for a split, read from or written to the cache.
pub fn wasserstein_distances(
    prep: &PreparedSplit,
    cfg: &SinkhornConfig,
    dir: &Path,
    verbose: bool,
) -> Result<SplitDistances> {
    let mut report = ConvergenceReport::default();
    let mut hits = 0;
    let mut get = |name: &str, rows: &[DiscreteMeasure], cols: Option<&[DiscreteMeasure]>| -> Result<DMatrix<f64>> {
        let c = cache::load_or_compute(&dir.join(format!("{name}.wskn")), rows, cols, &prep.cost, cfg, verbose)?;
        if c.status == CacheStatus::Hit {
            hits += 1;
        }
        merge(&mut report, &c.report);
        Ok(c.matrix)
    };
    let train = get("train", &prep.train, None)?;
    let validation = get("validation", &prep.validation, Some(&prep.train))?;
    let test = get("test", &prep.test, Some(&prep.train))?;
    Ok(SplitDistances {
        train,
        validation,
        test,
        report,
        cache_hits: hits,
    })
}

/// Squared Euclidean distances on raw intensities, same layout.
pub fn euclidean_distances(prep: &PreparedSplit) -> SplitDistances {
    let raw = |set: &LabeledImageSet| -> Vec<Vec<f64>> { set.images.iter().map(|i| i.intensities().to_vec()).collect() };
    let train = raw(&prep.splits.train);
    SplitDistances {
        train: squared_euclidean_distances(&train, &train),
        validation: squared_euclidean_distances(&raw(&prep.splits.validation), &train),
        test: squared_euclidean_distances(&raw(&prep.splits.test), &train),
        report: ConvergenceReport::default(),
        cache_hits: 0,
    }
}

/// Loads the dataset and applies `limit`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<LabeledImageSet> {
    cfg.check_paths()?;
    let set = cfg.dataset.load()?;
    Ok(match cfg.limit {
        Some(n) if n < set.len() => set.select(&(0..n).collect::<Vec<_>>()),
        _ => set,
    })
}
