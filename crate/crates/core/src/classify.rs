//! LS-SVM and kNN classifiers with one-vs-one multiclass decoding.
//!
//! Binary LS-SVMs come in two forms. The primal form works on explicit
//! features `φ` (one row per sample) and solves the `(ℓ+1)×(ℓ+1)` system
//!
//! ```text
//! [ΦᵀΦ + (N/γ)I  Φᵀ1] [w]   [Φᵀy]
//! [1ᵀΦ           N  ] [b] = [1ᵀy]
//! ```
//!
//! and the dual form works on a Gram matrix, possibly indefinite:
//!
//! ```text
//! [K + (N/γ)I  1] [α]   [y]
//! [1ᵀ          0] [b] = [0]
//! ```
//!
//! Both are solved by LU with one step of iterative refinement, and every
//! solution is checked against `‖A x − rhs‖∞ ≤ 1e−8 ‖rhs‖∞`.
//!
//! Multiclass problems train one model per class pair `(i, j)`, `i < j`,
//! with labels `+1` for `i` and `−1` for `j`, and decode the signs by
//! Hamming distance to each class's codeword.

use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::container::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::kernel::exp_kernel;
use crate::spectral::{eigendecompose, FeatureMap};

/// Relative residual accepted from a linear solve.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

/// Positive class for a score of exactly zero.
pub fn sign(score: f64) -> i8 {
    if score >= 0.0 {
        1
    } else {
        -1
    }
}

fn check_labels(labels: &[f64], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::usage(format!("{} labels for {n} samples", labels.len())));
    }
    if n == 0 {
        return Err(Error::usage("no training samples"));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::usage("binary labels must be +1 or −1"));
    }
    Ok(())
}

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma.is_finite() && gamma > 0.0 {
        Ok(())
    } else {
        Err(Error::usage(format!("gamma must be positive and finite, got {gamma}")))
    }
}

/// Solves `a x = rhs` with one refinement step and checks the residual.
/// Returns the solution and `‖a x − rhs‖∞ / ‖rhs‖∞`.
fn solve_checked(a: &DMatrix<f64>, rhs: &DVector<f64>, what: &str) -> Result<(DVector<f64>, f64)> {
    let lu = a.clone().lu();
    let singular = || {
        Error::numerical(format!(
            "{what}: singular system (pivot ratio {:e}); perturb gamma slightly",
            pivot_ratio(a)
        ))
    };
    let mut x = lu.solve(rhs).ok_or_else(singular)?;
    let r = rhs - a * &x;
    if let Some(dx) = lu.solve(&r) {
        x += dx;
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(singular());
    }
    let scale = rhs.amax().max(f64::MIN_POSITIVE);
    let residual = (a * &x - rhs).amax() / scale;
    if residual > RESIDUAL_TOLERANCE {
        return Err(Error::numerical(format!(
            "{what}: residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e} (pivot ratio {:e}); \
             the system is ill-conditioned, try another gamma",
            pivot_ratio(a)
        )));
    }
    Ok((x, residual))
}

/// `min |u_ii| / max |u_ii|` of the LU factor, a cheap conditioning hint.
fn pivot_ratio(a: &DMatrix<f64>) -> f64 {
    let u = a.clone().lu().u();
    let (lo, hi) = u
        .diagonal()
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), d| (lo.min(d.abs()), hi.max(d.abs())));
    if hi > 0.0 {
        lo / hi
    } else {
        0.0
    }
}

/// `wᵀφ + b`
#[derive(Debug, Clone, PartialEq)]
pub struct PrimalModel {
    pub w: Vec<f64>,
    pub b: f64,
    pub gamma: f64,
    /// Relative residual of the solve.
    pub residual: f64,
}

impl PrimalModel {
    pub fn score(&self, phi: &[f64]) -> f64 {
        self.w.iter().zip(phi).map(|(w, p)| w * p).sum::<f64>() + self.b
    }
}

/// Trains on `features` (`N × ℓ`) with `±1` labels.
pub fn train_primal(features: &DMatrix<f64>, labels: &[f64], gamma: f64) -> Result<PrimalModel> {
    let (n, ell) = features.shape();
    check_labels(labels, n)?;
    check_gamma(gamma)?;
    let y = DVector::from_column_slice(labels);
    let mut a = DMatrix::zeros(ell + 1, ell + 1);
    let gram = features.tr_mul(features);
    a.view_mut((0, 0), (ell, ell)).copy_from(&gram);
    for l in 0..ell {
        a[(l, l)] += n as f64 / gamma;
    }
    let col_sums = features.row_sum().transpose();
    a.view_mut((0, ell), (ell, 1)).copy_from(&col_sums);
    a.view_mut((ell, 0), (1, ell)).copy_from(&col_sums.transpose());
    a[(ell, ell)] = n as f64;
    let mut rhs = DVector::zeros(ell + 1);
    rhs.rows_mut(0, ell).copy_from(&features.tr_mul(&y));
    rhs[ell] = y.sum();
    let (x, residual) = solve_checked(&a, &rhs, "primal LS-SVM")?;
    Ok(PrimalModel {
        w: x.rows(0, ell).iter().copied().collect(),
        b: x[ell],
        gamma,
        residual,
    })
}

/// `Σ αᵢ k(x, xᵢ) + b`
#[derive(Debug, Clone, PartialEq)]
pub struct DualModel {
    pub alpha: Vec<f64>,
    pub b: f64,
    pub gamma: f64,
    pub residual: f64,
}

impl DualModel {
    /// `k_col` is the kernel between the input and every training point.
    pub fn score(&self, k_col: &[f64]) -> f64 {
        self.alpha.iter().zip(k_col).map(|(a, k)| a * k).sum::<f64>() + self.b
    }
}

/// Trains on a square kernel matrix with `±1` labels.
pub fn train_dual(k: &DMatrix<f64>, labels: &[f64], gamma: f64) -> Result<DualModel> {
    if !k.is_square() {
        return Err(Error::usage("dual LS-SVM needs a square kernel matrix"));
    }
    let n = k.nrows();
    check_labels(labels, n)?;
    check_gamma(gamma)?;
    let mut a = DMatrix::zeros(n + 1, n + 1);
    a.view_mut((0, 0), (n, n)).copy_from(k);
    for i in 0..n {
        a[(i, i)] += n as f64 / gamma;
        a[(i, n)] = 1.0;
        a[(n, i)] = 1.0;
    }
    let mut rhs = DVector::zeros(n + 1);
    rhs.rows_mut(0, n).copy_from_slice(labels);
    let (x, residual) = solve_checked(&a, &rhs, "dual LS-SVM")?;
    Ok(DualModel {
        alpha: x.rows(0, n).iter().copied().collect(),
        b: x[n],
        gamma,
        residual,
    })
}

/// The four LS-SVM pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// Truncated features of the full training Gram matrix, primal solves.
    Core,
    /// Features from the core subset, extended to the other training points.
    CoreOos,
    /// Dual solves on the raw Wasserstein Gram matrix.
    Indefinite,
    /// Dual solves on a Gaussian Gram matrix of raw intensities.
    Rbf,
}

impl Method {
    pub fn tag(self) -> u8 {
        match self {
            Method::Core => 0,
            Method::CoreOos => 1,
            Method::Indefinite => 2,
            Method::Rbf => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        [Method::Core, Method::CoreOos, Method::Indefinite, Method::Rbf]
            .into_iter()
            .find(|m| m.tag() == tag)
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Core => "core",
            Method::CoreOos => "core-oos",
            Method::Indefinite => "indefinite",
            Method::Rbf => "rbf",
        }
    }

    pub fn is_primal(self) -> bool {
        matches!(self, Method::Core | Method::CoreOos)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Core, Method::CoreOos, Method::Indefinite, Method::Rbf]
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown LS-SVM method {s:?}")))
    }
}

/// One binary model of an ensemble. `weights` is `w` for primal models and
/// `α` (aligned with `indices`) for dual models.
#[derive(Debug, Clone, PartialEq)]
pub struct PairModel {
    /// Positions of the two classes in [`OvoEnsemble::classes`], first < second.
    pub first: usize,
    pub second: usize,
    /// Training samples used, as indices into the training set.
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
    pub b: f64,
    pub residual: f64,
}

/// What binary models are trained on.
#[derive(Debug, Clone, Copy)]
pub enum TrainingInput<'a> {
    /// `N × ℓ` features, primal solves.
    Features(&'a DMatrix<f64>),
    /// `N × N` Gram matrix, dual solves.
    Gram(&'a DMatrix<f64>),
}

/// What predictions are computed from.
#[derive(Debug, Clone, Copy)]
pub enum TestInput<'a> {
    /// `M × ℓ` features.
    Features(&'a DMatrix<f64>),
    /// `M × N` kernel values against the full training set.
    KernelRows(&'a DMatrix<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OvoEnsemble {
    /// Sorted class labels.
    pub classes: Vec<usize>,
    pub method: Method,
    pub sigma: f64,
    pub gamma: f64,
    /// Feature dimension, for primal methods.
    pub ell: Option<usize>,
    /// In lexicographic pair order.
    pub pairs: Vec<PairModel>,
}

fn sorted_classes(labels: &[usize]) -> Vec<usize> {
    let mut c = labels.to_vec();
    c.sort_unstable();
    c.dedup();
    c
}

fn class_pairs(c: usize) -> Vec<(usize, usize)> {
    (0..c).flat_map(|i| (i + 1..c).map(move |j| (i, j))).collect()
}

/// Trains all `C(C−1)/2` binary models in parallel.
pub fn train_ovo(
    input: TrainingInput<'_>,
    labels: &[usize],
    method: Method,
    sigma: f64,
    gamma: f64,
) -> Result<OvoEnsemble> {
    let n = match input {
        TrainingInput::Features(f) => f.nrows(),
        TrainingInput::Gram(k) => k.nrows(),
    };
    if labels.len() != n {
        return Err(Error::usage(format!("{} labels for {n} training samples", labels.len())));
    }
    if matches!(input, TrainingInput::Features(_)) != method.is_primal() {
        return Err(Error::usage(format!("wrong training input for method {}", method.name())));
    }
    let classes = sorted_classes(labels);
    if classes.len() < 2 {
        return Err(Error::usage("one-vs-one training needs at least two classes"));
    }
    let pairs = class_pairs(classes.len())
        .into_par_iter()
        .map(|(a, b)| {
            let indices: Vec<usize> = (0..n)
                .filter(|&i| labels[i] == classes[a] || labels[i] == classes[b])
                .collect();
            let y: Vec<f64> = indices
                .iter()
                .map(|&i| if labels[i] == classes[a] { 1.0 } else { -1.0 })
                .collect();
            let (weights, bias, residual) = match input {
                TrainingInput::Features(f) => {
                    let sub = f.select_rows(indices.iter());
                    let m = train_primal(&sub, &y, gamma)?;
                    (m.w, m.b, m.residual)
                }
                TrainingInput::Gram(k) => {
                    let sub = k.select_rows(indices.iter()).select_columns(indices.iter());
                    let m = train_dual(&sub, &y, gamma)?;
                    (m.alpha, m.b, m.residual)
                }
            };
            Ok(PairModel {
                first: a,
                second: b,
                indices,
                weights,
                b: bias,
                residual,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ell = match input {
        TrainingInput::Features(f) => Some(f.ncols()),
        TrainingInput::Gram(_) => None,
    };
    Ok(OvoEnsemble {
        classes,
        method,
        sigma,
        gamma,
        ell,
        pairs,
    })
}

/// Class of smallest Hamming distance between `signs` (lexicographic pair
/// order) and the class codewords. Pairs not involving a class do not
/// count for it. Ties go to the smallest class position.
pub fn decode_ovo(class_count: usize, signs: &[i8]) -> usize {
    let mut disagreements = vec![0usize; class_count];
    for ((a, b), &s) in class_pairs(class_count).into_iter().zip(signs) {
        if s != 1 {
            disagreements[a] += 1;
        }
        if s != -1 {
            disagreements[b] += 1;
        }
    }
    let best = *disagreements.iter().min().unwrap_or(&0);
    disagreements.iter().position(|&d| d == best).unwrap_or(0)
}

impl OvoEnsemble {
    /// Raw binary scores, `M × C(C−1)/2`.
    pub fn scores(&self, input: TestInput<'_>) -> Result<DMatrix<f64>> {
        let m = match input {
            TestInput::Features(f) => {
                if self.ell != Some(f.ncols()) {
                    return Err(Error::usage(format!(
                        "test features have {} columns, model expects {:?}",
                        f.ncols(),
                        self.ell
                    )));
                }
                f.nrows()
            }
            TestInput::KernelRows(k) => {
                if self.method.is_primal() {
                    return Err(Error::usage("primal ensembles predict from features"));
                }
                let needed = self.pairs.iter().flat_map(|p| p.indices.iter()).max().map_or(0, |i| i + 1);
                if k.ncols() < needed {
                    return Err(Error::usage(format!(
                        "kernel rows have {} columns, model needs {needed}",
                        k.ncols()
                    )));
                }
                k.nrows()
            }
        };
        let columns: Vec<Vec<f64>> = self
            .pairs
            .par_iter()
            .map(|p| {
                (0..m)
                    .map(|r| match input {
                        TestInput::Features(f) => {
                            p.weights.iter().enumerate().map(|(l, w)| w * f[(r, l)]).sum::<f64>() + p.b
                        }
                        TestInput::KernelRows(k) => {
                            p.indices
                                .iter()
                                .zip(&p.weights)
                                .map(|(&i, a)| a * k[(r, i)])
                                .sum::<f64>()
                                + p.b
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(DMatrix::from_fn(m, self.pairs.len(), |r, c| columns[c][r]))
    }

    /// Predicted class labels.
    pub fn predict(&self, input: TestInput<'_>) -> Result<Vec<usize>> {
        let scores = self.scores(input)?;
        Ok((0..scores.nrows())
            .map(|r| {
                let signs: Vec<i8> = scores.row(r).iter().map(|&s| sign(s)).collect();
                self.classes[decode_ovo(self.classes.len(), &signs)]
            })
            .collect())
    }

    /// Section layout: class count u32, class labels u32[C], method u8,
    /// σ f64, γ f64, ℓ u32 (0 for dual), pair count u32; then per pair
    /// first u32, second u32, index count u32, indices u32[], weight count
    /// u32, weights f64[], b f64, residual f64.
    pub fn to_section(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.classes.len() as u32);
        for &c in &self.classes {
            w.u32(c as u32);
        }
        w.bytes.push(self.method.tag());
        w.f64(self.sigma);
        w.f64(self.gamma);
        w.u32(self.ell.unwrap_or(0) as u32);
        w.u32(self.pairs.len() as u32);
        for p in &self.pairs {
            w.u32(p.first as u32);
            w.u32(p.second as u32);
            w.u32(p.indices.len() as u32);
            for &i in &p.indices {
                w.u32(i as u32);
            }
            w.u32(p.weights.len() as u32);
            w.f64s(&p.weights);
            w.f64(p.b);
            w.f64(p.residual);
        }
        w.bytes
    }

    pub fn from_section(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = ByteReader::new(bytes, path);
        let c = r.u32("class count")? as usize;
        let classes = (0..c).map(|_| Ok(r.u32("class label")? as usize)).collect::<Result<Vec<_>>>()?;
        let offset = r.offset;
        let tag = r.take(1, "method")?[0];
        let method = Method::from_tag(tag).ok_or_else(|| r.error("method", offset, "unknown method tag"))?;
        let sigma = r.f64("sigma")?;
        let gamma = r.f64("gamma")?;
        let ell = r.u32("ell")? as usize;
        let count = r.u32("pair count")? as usize;
        if count != c * c.saturating_sub(1) / 2 {
            return Err(r.error("pair count", r.offset, "does not match the class count"));
        }
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            let first = r.u32("pair")? as usize;
            let second = r.u32("pair")? as usize;
            if first >= second || second >= c {
                return Err(r.error("pair", r.offset, "invalid class pair"));
            }
            let k = r.u32("index count")? as usize;
            let indices = (0..k).map(|_| Ok(r.u32("indices")? as usize)).collect::<Result<Vec<_>>>()?;
            let nw = r.u32("weight count")? as usize;
            let weights = r.f64s(nw, "weights")?;
            let b = r.f64("bias")?;
            let residual = r.f64("residual")?;
            pairs.push(PairModel {
                first,
                second,
                indices,
                weights,
                b,
                residual,
            });
        }
        if !r.is_done() {
            return Err(r.error("model", r.offset, "trailing bytes"));
        }
        Ok(OvoEnsemble {
            classes,
            method,
            sigma,
            gamma,
            ell: (ell > 0).then_some(ell),
            pairs,
        })
    }
}

/// A trained LS-SVM pipeline: the ensemble plus the feature map that
/// primal methods need for new inputs.
#[derive(Debug, Clone)]
pub struct FittedLssvm {
    pub ensemble: OvoEnsemble,
    pub feature_map: Option<FeatureMap>,
    /// Smallest eigenvalue of the Gram matrix the features came from.
    pub lambda_min: Option<f64>,
    /// Number of leading training points the kernel columns of new inputs
    /// must cover (the core size for [`Method::CoreOos`]).
    pub basis_len: usize,
}

impl FittedLssvm {
    /// Predicts from squared distances of new inputs to the training set
    /// (`M × N`; only the first `basis_len` columns are read by primal
    /// methods).
    pub fn predict_from_distances(&self, distances: &DMatrix<f64>) -> Result<Vec<usize>> {
        let sigma = self.ensemble.sigma;
        match &self.feature_map {
            Some(fm) => {
                if distances.ncols() < self.basis_len {
                    return Err(Error::usage("distance rows do not cover the feature basis"));
                }
                let k = distances.columns(0, self.basis_len).map(|d| exp_kernel(d, sigma));
                let f = fm.features_from_kernel_rows(&k)?;
                self.ensemble.predict(TestInput::Features(&f))
            }
            None => {
                let k = distances.map(|d| exp_kernel(d, sigma));
                self.ensemble.predict(TestInput::KernelRows(&k))
            }
        }
    }
}

/// Trains one LS-SVM pipeline from squared training distances. `core` is
/// required by [`Method::CoreOos`]: the first `core` training points form
/// the feature basis.
pub fn fit_lssvm(
    method: Method,
    distances: &DMatrix<f64>,
    labels: &[usize],
    sigma: f64,
    gamma: f64,
    threshold: f64,
    core: Option<usize>,
) -> Result<FittedLssvm> {
    let prep = KernelPrep::new(method, distances, sigma, threshold, core)?;
    prep.fit(labels, gamma)
}

/// The γ-independent part of [`fit_lssvm`], reused across a γ grid.
struct KernelPrep {
    method: Method,
    sigma: f64,
    gram: DMatrix<f64>,
    features: Option<(FeatureMap, DMatrix<f64>, f64)>,
    basis_len: usize,
}

impl KernelPrep {
    fn new(method: Method, distances: &DMatrix<f64>, sigma: f64, threshold: f64, core: Option<usize>) -> Result<Self> {
        let n = distances.nrows();
        if !distances.is_square() {
            return Err(Error::usage("training distances must be square"));
        }
        let gram = distances.map(|d| exp_kernel(d, sigma));
        let (features, basis_len) = match method {
            Method::Indefinite | Method::Rbf => (None, n),
            Method::Core => {
                let sys = eigendecompose(&gram)?;
                let fm = FeatureMap::truncate(&sys, threshold)?;
                let f = fm.train_features();
                (Some((fm, f, sys.lambda_min())), n)
            }
            Method::CoreOos => {
                let c = core.ok_or_else(|| Error::usage("core-oos needs a core size"))?;
                if c == 0 || c > n {
                    return Err(Error::usage(format!("core size {c} must lie in [1, {n}]")));
                }
                let sys = eigendecompose(&gram.view((0, 0), (c, c)).into_owned())?;
                let fm = FeatureMap::truncate(&sys, threshold)?;
                let f = fm.features_from_kernel_rows(&gram.columns(0, c).into_owned())?;
                (Some((fm, f, sys.lambda_min())), c)
            }
        };
        Ok(KernelPrep {
            method,
            sigma,
            gram,
            features,
            basis_len,
        })
    }

    fn fit(&self, labels: &[usize], gamma: f64) -> Result<FittedLssvm> {
        let input = match &self.features {
            Some((_, f, _)) => TrainingInput::Features(f),
            None => TrainingInput::Gram(&self.gram),
        };
        let ensemble = train_ovo(input, labels, self.method, self.sigma, gamma)?;
        Ok(FittedLssvm {
            ensemble,
            feature_map: self.features.as_ref().map(|(fm, _, _)| fm.clone()),
            lambda_min: self.features.as_ref().map(|(_, _, l)| *l),
            basis_len: self.basis_len,
        })
    }
}

/// Percentage of mismatches.
pub fn error_rate(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let wrong = predicted.iter().zip(truth).filter(|(p, t)| p != t).count();
    100.0 * wrong as f64 / truth.len() as f64
}

/// One evaluated grid point; `error` is `None` when training failed there.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationCell {
    pub sigma: f64,
    pub gamma: f64,
    pub error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub sigma: f64,
    pub gamma: f64,
    /// Validation error in percent.
    pub error: f64,
    pub cells: Vec<ValidationCell>,
}

/// Picks the cell of least error; ties prefer larger σ, then smaller γ.
pub fn best_cell(cells: &[ValidationCell]) -> Option<&ValidationCell> {
    cells.iter().filter(|c| c.error.is_some()).min_by(|a, b| {
        a.error
            .partial_cmp(&b.error)
            .expect("finite errors")
            .then(b.sigma.total_cmp(&a.sigma))
            .then(a.gamma.total_cmp(&b.gamma))
    })
}

/// Exhaustive (σ, γ) search on a validation split.
///
/// `train_distances` is `N × N`, `validation_distances` is `V × N`, both
/// squared. Cells where training fails numerically are recorded without an
/// error and skipped.
#[allow(clippy::too_many_arguments)]
pub fn validate(
    method: Method,
    train_distances: &DMatrix<f64>,
    train_labels: &[usize],
    validation_distances: &DMatrix<f64>,
    validation_labels: &[usize],
    sigmas: &[f64],
    gammas: &[f64],
    threshold: f64,
    core: Option<usize>,
) -> Result<Validation> {
    if sigmas.is_empty() || gammas.is_empty() {
        return Err(Error::usage("validation grids must not be empty"));
    }
    if validation_distances.ncols() != train_distances.ncols() {
        return Err(Error::usage("validation distances do not match the training set"));
    }
    let mut cells = Vec::with_capacity(sigmas.len() * gammas.len());
    for &sigma in sigmas {
        let prep = KernelPrep::new(method, train_distances, sigma, threshold, core);
        for &gamma in gammas {
            let error = match &prep {
                Ok(p) => p
                    .fit(train_labels, gamma)
                    .and_then(|m| m.predict_from_distances(validation_distances))
                    .ok()
                    .map(|pred| error_rate(&pred, validation_labels)),
                Err(_) => None,
            };
            cells.push(ValidationCell { sigma, gamma, error });
        }
    }
    let best = best_cell(&cells)
        .cloned()
        .ok_or_else(|| Error::numerical("training failed at every validation grid point"))?;
    Ok(Validation {
        sigma: best.sigma,
        gamma: best.gamma,
        error: best.error.expect("filtered"),
        cells,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DistanceKind {
    Euclidean,
    Wasserstein,
}

/// kNN over a fixed training set; the distances themselves are supplied
/// per query.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub distance_kind: DistanceKind,
    pub labels: Vec<usize>,
}

impl KnnModel {
    pub fn new(k: usize, distance_kind: DistanceKind, labels: Vec<usize>) -> Result<Self> {
        if k == 0 || k > labels.len() {
            return Err(Error::usage(format!(
                "k = {k} must lie in [1, {}]",
                labels.len()
            )));
        }
        Ok(KnnModel {
            k,
            distance_kind,
            labels,
        })
    }

    /// Classifies one query from its distances to every training point.
    pub fn classify(&self, distances: &[f64]) -> Result<usize> {
        if distances.len() != self.labels.len() {
            return Err(Error::usage("distance row does not match the training set"));
        }
        Ok(knn_vote(distances, &self.labels, self.k))
    }

    /// Classifies each row of an `M × N` distance matrix.
    pub fn classify_rows(&self, distances: &DMatrix<f64>) -> Result<Vec<usize>> {
        if distances.ncols() != self.labels.len() {
            return Err(Error::usage("distance rows do not match the training set"));
        }
        Ok((0..distances.nrows())
            .into_par_iter()
            .map(|r| {
                let row: Vec<f64> = distances.row(r).iter().copied().collect();
                knn_vote(&row, &self.labels, self.k)
            })
            .collect())
    }
}

/// Majority vote among the `k` nearest; distance ties go to the lower
/// training index, vote ties to the smallest summed distance, then to the
/// smallest label.
fn knn_vote(distances: &[f64], labels: &[usize], k: usize) -> usize {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    let mut tally: Vec<(usize, usize, f64)> = Vec::new();
    for &i in &order[..k] {
        match tally.iter_mut().find(|(c, _, _)| *c == labels[i]) {
            Some(t) => {
                t.1 += 1;
                t.2 += distances[i];
            }
            None => tally.push((labels[i], 1, distances[i])),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|t| t.0)
        .expect("k ≥ 1")
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnnValidation {
    pub k: usize,
    pub error: f64,
    pub cells: Vec<(usize, f64)>,
}

/// Chooses `k` by validation error; ties go to the larger `k`.
pub fn validate_knn(
    validation_distances: &DMatrix<f64>,
    train_labels: &[usize],
    validation_labels: &[usize],
    k_grid: &[usize],
    distance_kind: DistanceKind,
) -> Result<KnnValidation> {
    if k_grid.is_empty() {
        return Err(Error::usage("k grid must not be empty"));
    }
    let cells = k_grid
        .iter()
        .map(|&k| {
            let model = KnnModel::new(k, distance_kind, train_labels.to_vec())?;
            let pred = model.classify_rows(validation_distances)?;
            Ok((k, error_rate(&pred, validation_labels)))
        })
        .collect::<Result<Vec<_>>>()?;
    let &(k, error) = cells
        .iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .expect("non-empty grid");
    Ok(KnnValidation { k, error, cells })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_point_dual_by_hand() {
        let m = train_dual(&DMatrix::identity(2, 2), &[1.0, -1.0], 2.0).unwrap();
        assert!((m.alpha[0] - 0.5).abs() < 1e-12);
        assert!((m.alpha[1] + 0.5).abs() < 1e-12);
        assert!(m.b.abs() < 1e-12);
        assert!((m.score(&[1.0, 0.0]) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_score_is_positive() {
        assert_eq!(sign(0.0), 1);
        assert_eq!(sign(-0.0), 1);
        assert_eq!(sign(-1e-300), -1);
    }

    #[test]
    fn rejects_bad_inputs() {
        let k = DMatrix::identity(2, 2);
        assert!(matches!(train_dual(&k, &[1.0, 0.0], 1.0), Err(Error::Usage(_))));
        assert!(matches!(train_dual(&k, &[1.0, -1.0], 0.0), Err(Error::Usage(_))));
        assert!(matches!(train_dual(&k, &[1.0], 1.0), Err(Error::Usage(_))));
    }

    #[test]
    fn decoding_examples() {
        assert_eq!(decode_ovo(3, &[1, 1, 1]), 0);
        // Disagreements are (1, 1, 1); the tie goes to the first class.
        assert_eq!(decode_ovo(3, &[1, -1, 1]), 0);
        assert_eq!(decode_ovo(3, &[-1, -1, -1]), 2);
        assert_eq!(decode_ovo(2, &[-1]), 1);
    }

    #[test]
    fn knn_tie_rules() {
        // Nearest three: labels 5, 5, 7 → 5.
        assert_eq!(knn_vote(&[0.1, 0.2, 0.3, 9.0], &[5, 5, 7, 7], 3), 5);
        // Vote tie 1–1; label 7 is closer in total.
        assert_eq!(knn_vote(&[0.5, 0.2], &[5, 7], 2), 7);
        // Equal distances: lower index wins the single slot.
        assert_eq!(knn_vote(&[1.0, 1.0], &[3, 2], 1), 3);
    }

    #[test]
    fn best_cell_tie_break() {
        let cells = vec![
            ValidationCell { sigma: 1.0, gamma: 1.0, error: Some(5.0) },
            ValidationCell { sigma: 2.0, gamma: 10.0, error: Some(5.0) },
            ValidationCell { sigma: 2.0, gamma: 3.0, error: Some(5.0) },
            ValidationCell { sigma: 9.0, gamma: 3.0, error: None },
        ];
        let b = best_cell(&cells).unwrap();
        assert_eq!((b.sigma, b.gamma), (2.0, 3.0));
    }
}
