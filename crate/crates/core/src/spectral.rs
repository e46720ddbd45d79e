//! Spectral tools for possibly indefinite Gram matrices.
//!
//! [`FeatureMap`] keeps the eigenpairs above a threshold, which yields the
//! PSD matrix `K^(ℓ) = Σ λ_l v_l v_lᵀ` and explicit features
//! `φ_l(x) = k_xᵀ v_l / √λ_l` for any input with a kernel column `k_x`. On
//! training points these reduce to `√λ_l [v_l]_i`.
//!
//! [`lambda_min_scan`] and [`find_sigma_psd`] study how the smallest
//! eigenvalue of `exp(−D/(2σ²))` moves with the bandwidth. Distance
//! matrices passed here hold squared distances; `σ` is on the scale of the
//! distance itself.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kernel::{self, exp_kernel, KernelSpec};
use crate::measure::{DiscreteMeasure, GroundCost};

/// Default cutoff on retained eigenvalues (absolute, strict).
pub const DEFAULT_THRESHOLD: f64 = 1e-6;
const SYMMETRY_TOLERANCE: f64 = 1e-10;
const BISECTION_STEPS: usize = 40;

fn check_symmetric(k: &DMatrix<f64>) -> Result<()> {
    if !k.is_square() {
        return Err(Error::usage(format!("matrix is {}×{}, not square", k.nrows(), k.ncols())));
    }
    if k.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("matrix has non-finite entries"));
    }
    let n = k.nrows();
    for i in 0..n {
        for j in i + 1..n {
            if (k[(i, j)] - k[(j, i)]).abs() > SYMMETRY_TOLERANCE {
                return Err(Error::usage(format!(
                    "matrix is not symmetric: |K[{i},{j}] − K[{j},{i}]| = {:e}",
                    (k[(i, j)] - k[(j, i)]).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Eigenpairs sorted by descending eigenvalue; `vectors` column `l` goes
/// with `values[l]`.
#[derive(Debug, Clone)]
pub struct EigenSystem {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenSystem {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn lambda_min(&self) -> f64 {
        self.values.last().copied().unwrap_or(f64::NAN)
    }

    /// `Σ λ_l v_l v_lᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let scaled = DMatrix::from_fn(self.vectors.nrows(), self.len(), |i, l| self.vectors[(i, l)] * self.values[l]);
        scaled * self.vectors.transpose()
    }

    /// `‖K − K^(ℓ)‖₂` when the top `ell` pairs are kept: the largest
    /// magnitude among the discarded eigenvalues.
    pub fn truncation_error(&self, ell: usize) -> f64 {
        self.values[ell.min(self.len())..]
            .iter()
            .fold(0.0, |m, l| m.max(l.abs()))
    }
}

/// Full symmetric eigendecomposition.
pub fn eigendecompose(k: &DMatrix<f64>) -> Result<EigenSystem> {
    check_symmetric(k)?;
    let eig = SymmetricEigen::new(k.clone());
    let mut order: Vec<usize> = (0..k.nrows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&l| eig.eigenvalues[l]).collect();
    let vectors = DMatrix::from_fn(k.nrows(), k.nrows(), |i, c| eig.eigenvectors[(i, order[c])]);
    Ok(EigenSystem { values, vectors })
}

/// Eigenvalues only, descending.
pub fn eigenvalues(k: &DMatrix<f64>) -> Result<Vec<f64>> {
    check_symmetric(k)?;
    let mut values: Vec<f64> = k.clone().symmetric_eigenvalues().iter().copied().collect();
    values.sort_by(|a, b| b.total_cmp(a));
    Ok(values)
}

/// Retained eigenpairs and the kernel that produced them.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `λ_1 ≥ … ≥ λ_ℓ`, all above `threshold`.
    pub values: Vec<f64>,
    /// `N × ℓ`
    pub vectors: DMatrix<f64>,
    pub threshold: f64,
    /// Kernel used for out-of-sample columns, when known.
    pub spec: Option<KernelSpec>,
}

impl FeatureMap {
    /// Keeps exactly the pairs with `λ > threshold`.
    pub fn truncate(sys: &EigenSystem, threshold: f64) -> Result<Self> {
        Self::truncate_to(sys, threshold, usize::MAX)
    }

    /// Keeps at most `max_rank` of the pairs with `λ > threshold`.
    pub fn truncate_to(sys: &EigenSystem, threshold: f64, max_rank: usize) -> Result<Self> {
        if !(threshold.is_finite() && threshold >= 0.0) {
            return Err(Error::usage(format!("threshold must be ≥ 0, got {threshold}")));
        }
        let ell = sys.values.iter().take_while(|&&l| l > threshold).count().min(max_rank);
        if ell == 0 {
            return Err(Error::domain(format!(
                "degenerate kernel: no eigenvalue exceeds {threshold:e}"
            )));
        }
        Ok(FeatureMap {
            values: sys.values[..ell].to_vec(),
            vectors: sys.vectors.columns(0, ell).into_owned(),
            threshold,
            spec: None,
        })
    }

    pub fn with_spec(mut self, spec: KernelSpec) -> Self {
        self.spec = Some(spec);
        self
    }

    pub fn rank(&self) -> usize {
        self.values.len()
    }

    /// Number of training points.
    pub fn training_len(&self) -> usize {
        self.vectors.nrows()
    }

    /// `K^(ℓ) = V Λ Vᵀ`
    pub fn truncated_kernel(&self) -> DMatrix<f64> {
        let f = self.train_features();
        &f * f.transpose()
    }

    /// Training features `V Λ^{1/2}`, one row per training point.
    pub fn train_features(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.training_len(), self.rank(), |i, l| {
            self.vectors[(i, l)] * self.values[l].sqrt()
        })
    }

    /// Features of a point from its kernel column `k_x` against the
    /// training set.
    pub fn features_from_kernel_column(&self, k_x: &[f64]) -> Result<Vec<f64>> {
        if k_x.len() != self.training_len() {
            return Err(Error::usage(format!(
                "kernel column has {} entries, feature map has {} training points",
                k_x.len(),
                self.training_len()
            )));
        }
        let k = DVector::from_column_slice(k_x);
        let proj = self.vectors.tr_mul(&k);
        Ok((0..self.rank()).map(|l| proj[l] / self.values[l].sqrt()).collect())
    }

    /// Features of many points at once; `k_rows` is `M × N`, one kernel row
    /// per point. Returns `M × ℓ`.
    pub fn features_from_kernel_rows(&self, k_rows: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if k_rows.ncols() != self.training_len() {
            return Err(Error::usage(format!(
                "kernel rows have {} columns, feature map has {} training points",
                k_rows.ncols(),
                self.training_len()
            )));
        }
        let mut f = k_rows * &self.vectors;
        for (l, mut col) in f.column_iter_mut().enumerate() {
            col /= self.values[l].sqrt();
        }
        Ok(f)
    }

    /// Features of a new measure, solving its transport problems against
    /// every training point. Requires `spec`.
    pub fn features_of(&self, x: &DiscreteMeasure, training: &[DiscreteMeasure], cost: &GroundCost) -> Result<Vec<f64>> {
        let spec = self
            .spec
            .as_ref()
            .ok_or_else(|| Error::usage("feature map carries no kernel spec"))?;
        if training.len() != self.training_len() {
            return Err(Error::usage("training set does not match the feature map"));
        }
        let (k, _) = kernel::cross_gram(std::slice::from_ref(x), training, spec, cost)?;
        self.features_from_kernel_column(k.row(0).transpose().as_slice())
    }

    /// `ℓ` as u32, `λ` as f64[ℓ], then the eigenvectors column by column.
    pub fn to_section(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.rank() as u32);
        w.f64s(&self.values);
        w.f64s(self.vectors.as_slice());
        w.bytes
    }

    pub fn from_section(bytes: &[u8], path: &Path, threshold: f64) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let ell = r.u32("eigenpair count")? as usize;
        let values = r.f64s(ell, "eigenvalues")?;
        let rest = bytes.len().saturating_sub(4 + 8 * ell);
        if ell == 0 || rest % (8 * ell) != 0 {
            return Err(r.error("eigenvectors", r.offset, "length is not a multiple of ℓ"));
        }
        let n = rest / (8 * ell);
        let vectors = DMatrix::from_column_slice(n, ell, &r.f64s(n * ell, "eigenvectors")?);
        if values.iter().any(|l| !(*l > 0.0)) {
            return Err(r.error("eigenvalues", 4, "retained eigenvalues must be positive"));
        }
        Ok(FeatureMap {
            values,
            vectors,
            threshold,
            spec: None,
        })
    }
}

/// Smallest eigenvalue of `exp(−D/(2σ²))`.
pub fn lambda_min_at(distances: &DMatrix<f64>, sigma: f64) -> Result<f64> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::usage(format!("sigma must be positive, got {sigma}")));
    }
    let k = distances.map(|d| exp_kernel(d, sigma));
    Ok(*eigenvalues(&k)?.last().unwrap_or(&f64::NAN))
}

/// `(σ, λ_min)` for each bandwidth.
pub fn lambda_min_scan(distances: &DMatrix<f64>, sigmas: &[f64]) -> Result<Vec<(f64, f64)>> {
    check_distances(distances)?;
    sigmas.iter().map(|&s| Ok((s, lambda_min_at(distances, s)?))).collect()
}

fn check_distances(d: &DMatrix<f64>) -> Result<()> {
    check_symmetric(d)?;
    if d.iter().any(|x| *x < 0.0) {
        return Err(Error::domain("squared distances must be nonnegative"));
    }
    if (0..d.nrows()).any(|i| d[(i, i)] != 0.0) {
        return Err(Error::domain("distance matrix must have a zero diagonal"));
    }
    Ok(())
}

/// Smallest and largest positive off-diagonal distance (not squared).
pub fn distance_range(distances: &DMatrix<f64>) -> Option<(f64, f64)> {
    let n = distances.nrows();
    let mut range: Option<(f64, f64)> = None;
    for i in 0..n {
        for j in 0..distances.ncols() {
            let d = distances[(i, j)];
            if i != j && d > 0.0 {
                let d = d.sqrt();
                range = Some(match range {
                    None => (d, d),
                    Some((lo, hi)) => (lo.min(d), hi.max(d)),
                });
            }
        }
    }
    range
}

/// Median of the off-diagonal distances (not squared), upper triangle for
/// square matrices.
pub fn median_distance(distances: &DMatrix<f64>) -> Option<f64> {
    let mut values: Vec<f64> = if distances.is_square() {
        let n = distances.nrows();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| distances[(i, j)]).collect()
    } else {
        distances.iter().copied().collect()
    };
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let m = values.len();
    let mid = if m % 2 == 1 {
        values[m / 2]
    } else {
        0.5 * (values[m / 2 - 1] + values[m / 2])
    };
    Some(mid.max(0.0).sqrt())
}

/// Result of [`find_sigma_psd`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaPsd {
    /// Largest bandwidth found with `λ_min ≥ −1e−10·N`.
    pub sigma: f64,
    pub lambda_min: f64,
    /// Last bracket `(passing, failing)`; `failing` is `sigma_hi` when no
    /// transition was found.
    pub bracket: (f64, f64),
    pub transition_found: bool,
    /// `λ_min` at `4σ`, for reporting how sharp the transition is.
    pub lambda_min_at_4x: f64,
    pub steps: usize,
}

/// Bisection (in log σ) for the largest bandwidth in `[σ_lo, sigma_hi]`
/// keeping the kernel numerically PSD, with `σ_lo` one hundredth of the
/// smallest positive distance. `tol` is relative on σ.
pub fn find_sigma_psd(distances: &DMatrix<f64>, sigma_hi: f64, tol: f64) -> Result<SigmaPsd> {
    check_distances(distances)?;
    if !(tol > 0.0) {
        return Err(Error::usage("tolerance must be positive"));
    }
    let n = distances.nrows();
    let floor = -1e-10 * n as f64;
    let passes = |lmin: f64| lmin >= floor;
    let finish = |sigma: f64, lambda_min: f64, bracket, transition_found, steps| -> Result<SigmaPsd> {
        Ok(SigmaPsd {
            sigma,
            lambda_min,
            bracket,
            transition_found,
            lambda_min_at_4x: lambda_min_at(distances, 4.0 * sigma)?,
            steps,
        })
    };

    let at_hi = lambda_min_at(distances, sigma_hi)?;
    if passes(at_hi) {
        return finish(sigma_hi, at_hi, (sigma_hi, sigma_hi), false, 0);
    }
    let Some((d_min, _)) = distance_range(distances) else {
        return finish(sigma_hi, at_hi, (sigma_hi, sigma_hi), false, 0);
    };
    let mut lo = (1e-2 * d_min).min(sigma_hi);
    let mut at_lo = lambda_min_at(distances, lo)?;
    if !passes(at_lo) {
        return Err(Error::domain(format!(
            "kernel is not PSD even at σ = {lo:e} (λ_min = {at_lo:e})"
        )));
    }
    let mut hi = sigma_hi;
    let mut steps = 0;
    while steps < BISECTION_STEPS && hi / lo - 1.0 > tol {
        let mid = (lo * hi).sqrt();
        let at_mid = lambda_min_at(distances, mid)?;
        if passes(at_mid) {
            lo = mid;
            at_lo = at_mid;
        } else {
            hi = mid;
        }
        steps += 1;
    }
    finish(lo, at_lo, (lo, hi), true, steps)
}
