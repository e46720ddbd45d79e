//! On-disk cache of Sinkhorn distance matrices.
//!
//! Each file is a WSKN container with a `KEY ` section holding the SHA-256
//! of everything that determines its contents: the measures (weights, masses
//! and grid) on both sides, the solver settings, and a solver revision. A
//! file whose key does not match the request is never reused or overwritten.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};
use wexp_core::container::{Container, PayloadKind, SECTION_KEY};
use wexp_core::measure::{DiscreteMeasure, GroundCost};
use wexp_core::transport::{self, ConvergenceReport, SinkhornConfig};
use wexp_core::{Error, Result};

/// Bumped whenever the solver can produce different numbers for the same
/// input, which invalidates every existing cache.
pub const SOLVER_REVISION: u32 = 2;

const SECTION_CONVERGENCE: [u8; 4] = *b"CONV";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheStatus {
    Hit,
    Computed,
}

#[derive(Debug, Clone)]
pub struct CachedDistances {
    pub matrix: DMatrix<f64>,
    pub report: ConvergenceReport,
    pub status: CacheStatus,
    pub path: PathBuf,
    pub key: [u8; 32],
}

fn hash_measures(h: &mut Sha256, set: &[DiscreteMeasure]) {
    h.update((set.len() as u64).to_le_bytes());
    for m in set {
        let grid = m.support();
        h.update((grid.width() as u64).to_le_bytes());
        h.update((grid.height() as u64).to_le_bytes());
        h.update(grid.scale().tag().as_bytes());
        h.update(m.mass_original().to_le_bytes());
        for w in m.weights() {
            h.update(w.to_le_bytes());
        }
    }
}

/// Content key of the distance matrix between `rows` and `cols`
/// (`None` for the symmetric matrix of `rows` with itself).
pub fn distance_key(rows: &[DiscreteMeasure], cols: Option<&[DiscreteMeasure]>, cfg: &SinkhornConfig) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(b"wskn-distances");
    h.update(SOLVER_REVISION.to_le_bytes());
    h.update(cfg.epsilon.to_le_bytes());
    h.update((cfg.max_iterations as u64).to_le_bytes());
    h.update(cfg.marginal_tolerance.to_le_bytes());
    h.update(cfg.objective_kind.tag().as_bytes());
    h.update(cfg.relaxation.to_le_bytes());
    h.update([u8::from(cfg.prune_zero_atoms), u8::from(cfg.epsilon_scaling)]);
    h.update(cfg.kernel_truncation.to_le_bytes());
    hash_measures(&mut h, rows);
    match cols {
        None => h.update(b"self"),
        Some(cols) => {
            h.update(b"cross");
            hash_measures(&mut h, cols);
        }
    }
    h.finalize().into()
}

fn encode_report(r: &ConvergenceReport) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(r.pairs as u64).to_le_bytes());
    out.extend_from_slice(&r.max_marginal_error.to_le_bytes());
    out.extend_from_slice(&(r.max_iterations_used as u64).to_le_bytes());
    out.extend_from_slice(&r.total_iterations.to_le_bytes());
    out.extend_from_slice(&(r.non_converged.len() as u64).to_le_bytes());
    for &(i, j) in &r.non_converged {
        out.extend_from_slice(&(i as u32).to_le_bytes());
        out.extend_from_slice(&(j as u32).to_le_bytes());
    }
    out
}

fn decode_report(bytes: &[u8], path: &Path) -> Result<ConvergenceReport> {
    let bad = || Error::Parse {
        path: path.to_path_buf(),
        field: "convergence section",
        offset: 0,
        message: "malformed".into(),
    };
    let u64_at = |k: usize| -> Result<u64> {
        Ok(u64::from_le_bytes(bytes.get(k..k + 8).ok_or_else(bad)?.try_into().expect("8 bytes")))
    };
    let u32_at = |k: usize| -> Result<u32> {
        Ok(u32::from_le_bytes(bytes.get(k..k + 4).ok_or_else(bad)?.try_into().expect("4 bytes")))
    };
    let count = u64_at(32)? as usize;
    if bytes.len() != 40 + 8 * count {
        return Err(bad());
    }
    Ok(ConvergenceReport {
        pairs: u64_at(0)? as usize,
        max_marginal_error: f64::from_bits(u64_at(8)?),
        max_iterations_used: u64_at(16)? as usize,
        total_iterations: u64_at(24)?,
        non_converged: (0..count)
            .map(|k| Ok((u32_at(40 + 8 * k)? as usize, u32_at(44 + 8 * k)? as usize)))
            .collect::<Result<_>>()?,
    })
}

/// Reads `path` if it exists and carries `key`. A file with another key is
/// an error: it belongs to a different dataset or configuration.
pub fn open_verified(path: &Path, key: &[u8; 32]) -> Result<Option<(DMatrix<f64>, ConvergenceReport)>> {
    if !path.exists() {
        return Ok(None);
    }
    let c = Container::read(path)?;
    match c.key() {
        Some(k) if k == key => {
            let report = match c.section(SECTION_CONVERGENCE) {
                Some(b) => decode_report(b, path)?,
                None => ConvergenceReport::default(),
            };
            Ok(Some((c.matrix, report)))
        }
        found => Err(Error::domain(format!(
            "cache {} was built from a different dataset or configuration \
             (stored key {}, expected {}); delete it or use another cache directory",
            path.display(),
            found.map(hex::encode).unwrap_or_else(|| "missing".into()),
            hex::encode(key)
        ))),
    }
}

/// Writes a verified distance cache.
pub fn store(path: &Path, matrix: &DMatrix<f64>, report: &ConvergenceReport, key: &[u8; 32], epsilon: f64) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Container::new(PayloadKind::WassersteinDistances, epsilon, 0.0, matrix.clone())
        .with_section(SECTION_KEY, key.to_vec())
        .with_section(SECTION_CONVERGENCE, encode_report(report))
        .write(path)
}

/// Returns the cached matrix at `path`, computing and storing it first when
/// absent. `cols = None` requests the symmetric matrix of `rows`.
pub fn load_or_compute(
    path: &Path,
    rows: &[DiscreteMeasure],
    cols: Option<&[DiscreteMeasure]>,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    verbose: bool,
) -> Result<CachedDistances> {
    let key = distance_key(rows, cols, cfg);
    if let Some((matrix, report)) = open_verified(path, &key)? {
        return Ok(CachedDistances {
            matrix,
            report,
            status: CacheStatus::Hit,
            path: path.to_path_buf(),
            key,
        });
    }
    let (matrix, report) = compute(rows, cols, cost, cfg, verbose.then_some(path))?;
    store(path, &matrix, &report, &key, cfg.epsilon)?;
    Ok(CachedDistances {
        matrix,
        report,
        status: CacheStatus::Computed,
        path: path.to_path_buf(),
        key,
    })
}

/// Solves all pairs without touching the cache.
pub fn compute(
    rows: &[DiscreteMeasure],
    cols: Option<&[DiscreteMeasure]>,
    cost: &GroundCost,
    cfg: &SinkhornConfig,
    progress_label: Option<&Path>,
) -> Result<(DMatrix<f64>, ConvergenceReport)> {
    let last = AtomicUsize::new(0);
    let progress = |done: usize, total: usize| {
        let pct = done * 100 / total.max(1);
        if pct > last.fetch_max(pct, Ordering::Relaxed) && pct % 5 == 0 {
            if let Some(label) = progress_label {
                eprintln!("  {}: {pct}% of {total} pairs", label.display());
            }
        }
    };
    let progress: Option<transport::Progress<'_>> = progress_label.map(|_| &progress as transport::Progress<'_>);
    let d = match cols {
        None => transport::self_distances(rows, cost, cfg, progress)?,
        Some(cols) => transport::cross_distances(rows, cols, cost, cfg, progress)?,
    };
    Ok((d.matrix, d.report))
}
