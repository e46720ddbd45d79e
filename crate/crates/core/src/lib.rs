//! Wasserstein squared exponential kernels.
//!
//! Grayscale images are lifted to probability measures on their pixel grid
//! ([`measure`]), compared with entropic-regularized optimal transport
//! ([`transport`]), and turned into exponential kernel matrices
//! ([`kernel`]). Because those matrices need not be positive semi-definite,
//! [`spectral`] truncates their spectrum into finite "Wasserstein features"
//! with an out-of-sample extension, and locates the bandwidth below which a
//! given dataset's kernel is PSD. [`classify`] trains LS-SVM and kNN
//! classifiers on top, with one-versus-one multiclass decoding, and [`data`]
//! reads IDX/CSV image sets and draws balanced splits.

pub mod classify;
pub mod container;
pub mod data;
pub mod error;
pub mod kernel;
pub mod measure;
pub mod spectral;
pub mod transport;

pub use error::{Error, Result};
