//! Exponential kernels built from squared Wasserstein or Euclidean distances.
//!
//! All three kinds share the form `exp(−d²/(2σ²))`. The reweighted kind
//! multiplies by the original image masses, which makes it covariant under
//! intensity rescaling. Except for the Euclidean RBF these matrices are in
//! general indefinite.

use std::str::FromStr;

use nalgebra::DMatrix;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::measure::{DiscreteMeasure, GroundCost};
use crate::transport::{self, ConvergenceReport, SinkhornConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `exp(−W₂²(α, β)/(2σ²))`
    WassersteinExp,
    /// `‖u‖₁‖v‖₁ · exp(−W₂²(α, β)/(2σ²))`
    ReweightedWassersteinExp,
    /// `exp(−‖u − v‖²/(2σ²))` on raw intensities.
    EuclideanRbf,
}

impl KernelKind {
    pub fn tag(self) -> &'static str {
        match self {
            KernelKind::WassersteinExp => "wasserstein",
            KernelKind::ReweightedWassersteinExp => "reweighted",
            KernelKind::EuclideanRbf => "rbf",
        }
    }

    pub fn uses_transport(self) -> bool {
        !matches!(self, KernelKind::EuclideanRbf)
    }
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "wasserstein" => Ok(KernelKind::WassersteinExp),
            "reweighted" => Ok(KernelKind::ReweightedWassersteinExp),
            "rbf" => Ok(KernelKind::EuclideanRbf),
            _ => Err(Error::usage(format!("unknown kernel kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    pub kind: KernelKind,
    pub sigma: f64,
    /// Ignored by [`KernelKind::EuclideanRbf`].
    pub sinkhorn: SinkhornConfig,
}

impl KernelSpec {
    pub fn new(kind: KernelKind, sigma: f64, sinkhorn: SinkhornConfig) -> Self {
        KernelSpec {
            kind,
            sigma,
            sinkhorn,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_sigma(self.sigma)?;
        if self.kind.uses_transport() {
            self.sinkhorn.validate()?;
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// `exp(−d²/(2σ²))` for a squared distance `d²`.
pub fn exp_kernel(distance_sq: f64, sigma: f64) -> f64 {
    (-distance_sq / (2.0 * sigma * sigma)).exp()
}

/// Kernel matrix, symmetric when built from one set.
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub entries: DMatrix<f64>,
    pub spec: KernelSpec,
    /// True when the diagonal distances were fixed to zero rather than
    /// solved. The entropic objective of a measure with itself is not zero,
    /// so this is a convention, applied to the distance matrix.
    pub diagonal_zeroed: bool,
    pub report: ConvergenceReport,
}

impl GramMatrix {
    pub fn len(&self) -> usize {
        self.entries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.nrows() == 0
    }
}

/// Squared Euclidean distance between raw intensities.
fn euclidean_sq(x: &DiscreteMeasure, y: &DiscreteMeasure) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::usage("measures of different sizes"));
    }
    Ok((0..x.len())
        .map(|i| {
            let d = x.intensity(i) - y.intensity(i);
            d * d
        })
        .sum())
}

/// Single kernel evaluation. Identical measures get distance exactly zero.
pub fn kernel_value(
    x: &DiscreteMeasure,
    y: &DiscreteMeasure,
    spec: &KernelSpec,
    cost: &GroundCost,
) -> Result<f64> {
    spec.validate()?;
    let d = match spec.kind {
        KernelKind::EuclideanRbf => euclidean_sq(x, y)?,
        _ if x.same_point(y) => 0.0,
        _ => transport::sinkhorn_summary(x, y, cost, &spec.sinkhorn)?.objective,
    };
    let k = exp_kernel(d, spec.sigma);
    Ok(match spec.kind {
        KernelKind::ReweightedWassersteinExp => x.mass_original() * y.mass_original() * k,
        _ => k,
    })
}

/// Applies the kernel map to a matrix of squared distances. `row_mass` and
/// `col_mass` are only read by the reweighted kind.
pub fn kernel_from_distances(
    distances: &DMatrix<f64>,
    kind: KernelKind,
    sigma: f64,
    row_mass: &[f64],
    col_mass: &[f64],
) -> Result<DMatrix<f64>> {
    check_sigma(sigma)?;
    let (m, n) = distances.shape();
    if distances.iter().any(|d| d.is_nan()) {
        return Err(Error::numerical("distance matrix contains NaN"));
    }
    Ok(match kind {
        KernelKind::ReweightedWassersteinExp => {
            if row_mass.len() != m || col_mass.len() != n {
                return Err(Error::usage("mass vectors do not match the distance matrix"));
            }
            DMatrix::from_fn(m, n, |i, j| {
                row_mass[i] * col_mass[j] * exp_kernel(distances[(i, j)], sigma)
            })
        }
        _ => distances.map(|d| exp_kernel(d, sigma)),
    })
}

/// Gram matrix from a precomputed symmetric distance matrix.
pub fn gram_from_distances(
    distances: &DMatrix<f64>,
    spec: &KernelSpec,
    masses: &[f64],
) -> Result<GramMatrix> {
    if !distances.is_square() {
        return Err(Error::usage("Gram matrix needs a square distance matrix"));
    }
    let entries = kernel_from_distances(distances, spec.kind, spec.sigma, masses, masses)?;
    Ok(GramMatrix {
        entries,
        spec: *spec,
        diagonal_zeroed: spec.kind.uses_transport(),
        report: ConvergenceReport::default(),
    })
}

/// Squared distances of the kind `spec` needs: Sinkhorn objectives or
/// squared Euclidean distances.
pub fn distances_for(
    rows: &[DiscreteMeasure],
    cols: &[DiscreteMeasure],
    spec: &KernelSpec,
    cost: &GroundCost,
) -> Result<(DMatrix<f64>, ConvergenceReport)> {
    spec.validate()?;
    if spec.kind.uses_transport() {
        let d = transport::pairwise_distances(rows, cols, cost, &spec.sinkhorn)?;
        Ok((d.matrix, d.report))
    } else {
        let rows: Vec<Vec<f64>> = rows.iter().map(intensities).collect();
        let cols: Vec<Vec<f64>> = cols.iter().map(intensities).collect();
        Ok((squared_euclidean_distances(&rows, &cols), ConvergenceReport::default()))
    }
}

fn intensities(m: &DiscreteMeasure) -> Vec<f64> {
    (0..m.len()).map(|i| m.intensity(i)).collect()
}

fn masses(set: &[DiscreteMeasure]) -> Vec<f64> {
    set.iter().map(DiscreteMeasure::mass_original).collect()
}

/// `K_ij = k(x_i, x_j)` over one set.
pub fn gram(set: &[DiscreteMeasure], spec: &KernelSpec, cost: &GroundCost) -> Result<GramMatrix> {
    let (d, report) = distances_for(set, set, spec, cost)?;
    let mut g = gram_from_distances(&d, spec, &masses(set))?;
    g.report = report;
    Ok(g)
}

/// `K_ij = k(x_i, y_j)`, used for out-of-sample evaluation.
pub fn cross_gram(
    rows: &[DiscreteMeasure],
    cols: &[DiscreteMeasure],
    spec: &KernelSpec,
    cost: &GroundCost,
) -> Result<(DMatrix<f64>, ConvergenceReport)> {
    let (d, report) = distances_for(rows, cols, spec, cost)?;
    let k = kernel_from_distances(&d, spec.kind, spec.sigma, &masses(rows), &masses(cols))?;
    Ok((k, report))
}

/// `‖x_i − y_j‖²` for all pairs. `rows` and `cols` must share a length.
pub fn squared_euclidean_distances<T: AsRef<[f64]> + Sync>(rows: &[T], cols: &[T]) -> DMatrix<f64> {
    let values: Vec<f64> = rows
        .par_iter()
        .flat_map_iter(|x| {
            cols.iter().map(move |y| {
                x.as_ref()
                    .iter()
                    .zip(y.as_ref())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
        })
        .collect();
    DMatrix::from_row_slice(rows.len(), cols.len(), &values)
}
