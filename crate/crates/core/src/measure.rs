//! Images as probability measures on a pixel lattice.
//!
//! A grayscale image `u` becomes the measure `a_i = u_i / ‖u‖₁` supported on
//! the pixel centres of a [`PixelGrid`]. The grid is shared between measures
//! through an [`Arc`], and the squared Euclidean [`GroundCost`] between two
//! grids is built once and reused by every transport problem.

use std::sync::Arc;

use crate::error::{Error, Result};

/// Tolerance on the total mass of a normalized measure.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A grayscale image with nonnegative intensities stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    intensities: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, intensities: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::usage(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if intensities.len() != width * height {
            return Err(Error::usage(format!(
                "image {width}x{height} needs {} intensities, got {}",
                width * height,
                intensities.len()
            )));
        }
        if let Some((i, v)) = intensities
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && **v >= 0.0))
        {
            return Err(Error::domain(format!(
                "intensity {i} is {v}; intensities must be finite and nonnegative"
            )));
        }
        Ok(GrayImage {
            width,
            height,
            intensities,
        })
    }

    /// Builds an image from raw bytes, mapping each byte to a real in [0, 255].
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| f64::from(b)).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.intensities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intensities.is_empty()
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    /// Total ink `‖u‖₁`.
    pub fn mass(&self) -> f64 {
        self.intensities.iter().sum()
    }

    /// Multiplies every intensity by `factor` (which must be positive).
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::usage(format!("scale factor must be positive, got {factor}")));
        }
        Self::new(
            self.width,
            self.height,
            self.intensities.iter().map(|v| v * factor).collect(),
        )
    }
}

/// How pixel indices are turned into coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CoordinateScale {
    /// One unit per pixel: pixel `(r, c)` sits at `(r, c)`.
    Pixel,
    /// Lattice scaled into `[0, 1]²` by `1 / (max(width, height) − 1)`.
    Unit,
}

impl CoordinateScale {
    pub fn tag(self) -> &'static str {
        match self {
            CoordinateScale::Pixel => "pixel",
            CoordinateScale::Unit => "unit",
        }
    }
}

impl std::str::FromStr for CoordinateScale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pixel" => Ok(CoordinateScale::Pixel),
            "unit" => Ok(CoordinateScale::Unit),
            other => Err(Error::usage(format!(
                "unknown coordinate scale {other:?} (expected pixel or unit)"
            ))),
        }
    }
}

/// Row-major lattice of support points.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelGrid {
    width: usize,
    height: usize,
    scale: CoordinateScale,
    coordinates: Vec<[f64; 2]>,
}

impl PixelGrid {
    pub fn new(width: usize, height: usize, scale: CoordinateScale) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::usage(format!(
                "grid dimensions must be positive, got {width}x{height}"
            )));
        }
        let step = match scale {
            CoordinateScale::Pixel => 1.0,
            CoordinateScale::Unit => {
                let span = width.max(height) - 1;
                if span == 0 {
                    1.0
                } else {
                    1.0 / span as f64
                }
            }
        };
        let coordinates = (0..height)
            .flat_map(|r| (0..width).map(move |c| [r as f64 * step, c as f64 * step]))
            .collect();
        Ok(PixelGrid {
            width,
            height,
            scale,
            coordinates,
        })
    }

    /// Grid coordinates in `[0, 1]²`.
    pub fn unit(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, CoordinateScale::Unit)
    }

    /// Grid coordinates in pixel units.
    pub fn pixel(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, CoordinateScale::Pixel)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn scale(&self) -> CoordinateScale {
        self.scale
    }

    pub fn len(&self) -> usize {
        self.coordinates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coordinates.is_empty()
    }

    pub fn coordinates(&self) -> &[[f64; 2]] {
        &self.coordinates
    }
}

/// Normalized weights on a shared pixel grid.
#[derive(Debug, Clone)]
pub struct DiscreteMeasure {
    weights: Vec<f64>,
    support: Arc<PixelGrid>,
    mass_original: f64,
}

impl DiscreteMeasure {
    /// Builds a measure from weights that already sum to one.
    pub fn from_weights(weights: Vec<f64>, support: Arc<PixelGrid>) -> Result<Self> {
        if weights.len() != support.len() {
            return Err(Error::usage(format!(
                "{} weights for a grid of {} points",
                weights.len(),
                support.len()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::domain("measure weights must be finite and nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::domain(format!(
                "measure weights sum to {total}, expected 1"
            )));
        }
        Ok(DiscreteMeasure {
            weights,
            support,
            mass_original: 1.0,
        })
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn support(&self) -> &Arc<PixelGrid> {
        &self.support
    }

    /// `‖u‖₁` of the image this measure was built from.
    pub fn mass_original(&self) -> f64 {
        self.mass_original
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Indices of atoms carrying positive weight.
    pub fn active_atoms(&self) -> Vec<usize> {
        self.weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(i, _)| i)
            .collect()
    }

    /// Reconstructs the raw intensity `a_i · ‖u‖₁` at atom `i`.
    pub fn intensity(&self, i: usize) -> f64 {
        self.weights[i] * self.mass_original
    }

    /// True when both measures sit on the same grid with identical weights.
    pub fn same_point(&self, other: &DiscreteMeasure) -> bool {
        (Arc::ptr_eq(&self.support, &other.support) || self.support == other.support)
            && self.weights == other.weights
    }
}

/// Maps an image to the probability measure `a_i = u_i / ‖u‖₁` on `grid`.
pub fn image_to_measure(img: &GrayImage, grid: &Arc<PixelGrid>) -> Result<DiscreteMeasure> {
    if img.width() != grid.width() || img.height() != grid.height() {
        return Err(Error::usage(format!(
            "image is {}x{} but grid is {}x{}",
            img.width(),
            img.height(),
            grid.width(),
            grid.height()
        )));
    }
    let mass = img.mass();
    if !(mass > 0.0) {
        return Err(Error::domain("zero-mass image"));
    }
    let weights = img.intensities().iter().map(|u| u / mass).collect();
    Ok(DiscreteMeasure {
        weights,
        support: Arc::clone(grid),
        mass_original: mass,
    })
}

/// Squared Euclidean distances between the points of two grids, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundCost {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
    symmetric: bool,
}

impl GroundCost {
    /// Metric power of the ground cost; fixed to squared distances.
    pub const METRIC_POWER: u32 = 2;

    /// Wraps an explicit cost matrix (row-major), e.g. for 1D test problems.
    pub fn from_entries(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || entries.len() != rows * cols {
            return Err(Error::usage(format!(
                "cost matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err(Error::domain("cost entries must be finite and nonnegative"));
        }
        Ok(GroundCost::assemble(rows, cols, entries))
    }

    fn assemble(rows: usize, cols: usize, entries: Vec<f64>) -> Self {
        let symmetric =
            rows == cols && (0..rows).all(|i| (0..i).all(|j| entries[i * cols + j] == entries[j * cols + i]));
        GroundCost {
            rows,
            cols,
            entries,
            symmetric,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.cols..(i + 1) * self.cols]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn max(&self) -> f64 {
        self.entries.iter().copied().fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }
}

/// Builds `d²_ij = ‖y_i − z_j‖²` between the points of `grid_a` and `grid_b`.
pub fn build_ground_cost(grid_a: &PixelGrid, grid_b: &PixelGrid) -> GroundCost {
    let ya = grid_a.coordinates();
    let zb = grid_b.coordinates();
    let mut entries = Vec::with_capacity(ya.len() * zb.len());
    for y in ya {
        for z in zb {
            let dr = y[0] - z[0];
            let dc = y[1] - z[1];
            entries.push(dr * dr + dc * dc);
        }
    }
    GroundCost::assemble(ya.len(), zb.len(), entries)
}
