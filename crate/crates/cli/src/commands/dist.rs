use std::path::PathBuf;

use wexp_core::{Error, Result};

use crate::cache::{self, CacheStatus};
use crate::config::ExperimentConfig;
use crate::experiment::{self, grid_for, measures_of};
use wexp_core::measure::build_ground_cost;

/// Outcome of one cache file handled by `dist`.
#[derive(Debug, Clone)]
pub struct DistFile {
    pub path: PathBuf,
    pub status: CacheStatus,
    pub rows: usize,
    pub cols: usize,
    pub non_converged: usize,
}

/// Computes (or confirms) the distance caches a configuration needs.
///
/// With a split section these are the per-seed train, validation and test
/// matrices used by `run`; without one, the symmetric matrix of the whole
/// dataset. With `verify`, cached matrices are recomputed and compared
/// bit for bit.
pub fn cmd_dist(cfg: &ExperimentConfig, verify: bool, verbose: bool) -> Result<Vec<DistFile>> {
    let set = experiment::load_dataset(cfg)?;
    let mut out = Vec::new();
    let mut jobs = Vec::new();
    match &cfg.split {
        Some(sizes) => {
            for &seed in &cfg.seeds {
                let prep = experiment::prepare_split(&set, sizes, seed, cfg.coordinates)?;
                let dir = experiment::split_cache_dir(&cfg.cache_dir, sizes, seed);
                jobs.push((dir.join("train.wskn"), prep.train.clone(), None, prep.cost.clone()));
                jobs.push((dir.join("validation.wskn"), prep.validation.clone(), Some(prep.train.clone()), prep.cost.clone()));
                jobs.push((dir.join("test.wskn"), prep.test, Some(prep.train), prep.cost));
            }
        }
        None => {
            let grid = grid_for(&set, cfg.coordinates)?;
            let cost = std::sync::Arc::new(build_ground_cost(&grid, &grid));
            jobs.push((cfg.cache_dir.join("dataset.wskn"), measures_of(&set, &grid)?, None, cost));
        }
    }
    for (path, rows, cols, cost) in jobs {
        let c = cache::load_or_compute(&path, &rows, cols.as_deref(), &cost, &cfg.sinkhorn, verbose)?;
        if verbose {
            match c.status {
                CacheStatus::Hit => eprintln!("cache hit: {}", path.display()),
                CacheStatus::Computed => eprintln!("wrote {}", path.display()),
            }
        }
        if verify && c.status == CacheStatus::Hit {
            let (fresh, _) = cache::compute(&rows, cols.as_deref(), &cost, &cfg.sinkhorn, None)?;
            let same = fresh.iter().zip(c.matrix.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
            if !same {
                return Err(Error::numerical(format!(
                    "cache {} differs from a fresh computation",
                    path.display()
                )));
            }
        }
        out.push(DistFile {
            path,
            status: c.status,
            rows: c.matrix.nrows(),
            cols: c.matrix.ncols(),
            non_converged: c.report.non_converged.len(),
        });
    }
    Ok(out)
}
