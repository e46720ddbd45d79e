//! Repetitions of validate → train → test for each configured method.

use std::time::Instant;

use rayon::prelude::*;
use wexp_core::classify::{self, fit_lssvm, validate, validate_knn, DistanceKind, KnnModel};
use wexp_core::data::LabeledImageSet;
use wexp_core::kernel::exp_kernel;
use wexp_core::spectral::{eigenvalues, median_distance};
use wexp_core::{Error, Result};

use crate::config::{ExperimentConfig, Method, SplitSizes};
use crate::experiment::{self, PreparedSplit, SplitDistances};
use crate::model::{Classifier, ModelFile};

/// Outcome of one method on one repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub method: Method,
    pub seed: u64,
    pub train_size: usize,
    pub sigma: Option<f64>,
    pub gamma: Option<f64>,
    pub k: Option<usize>,
    pub ell: Option<usize>,
    pub lambda_min: Option<f64>,
    /// Percent.
    pub validation_error: Option<f64>,
    /// Percent.
    pub test_error: Option<f64>,
    /// Pairs whose Sinkhorn solve hit the iteration cap.
    pub non_converged: usize,
    /// `ok`, or the error that aborted this cell.
    pub status: String,
    /// Wall-clock time; kept out of the deterministic results file.
    pub seconds: f64,
}

impl ResultRecord {
    fn empty(method: Method, seed: u64, train_size: usize) -> Self {
        ResultRecord {
            method,
            seed,
            train_size,
            sigma: None,
            gamma: None,
            k: None,
            ell: None,
            lambda_min: None,
            validation_error: None,
            test_error: None,
            non_converged: 0,
            status: "ok".into(),
            seconds: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.test_error.is_some()
    }
}

fn lssvm_method(m: Method) -> Option<classify::Method> {
    match m {
        Method::Core => Some(classify::Method::Core),
        Method::CoreOos => Some(classify::Method::CoreOos),
        Method::Indefinite => Some(classify::Method::Indefinite),
        Method::Rbf => Some(classify::Method::Rbf),
        Method::WassKnn | Method::L2Knn => None,
    }
}

fn evaluate(
    method: Method,
    cfg: &ExperimentConfig,
    sizes: &SplitSizes,
    prep: &PreparedSplit,
    d: &SplitDistances,
    record: &mut ResultRecord,
) -> Result<ModelFile> {
    let train_labels = &prep.splits.train.labels;
    let val_labels = &prep.splits.validation.labels;
    let test_labels = &prep.splits.test.labels;
    record.non_converged = d.report.non_converged.len();
    let classifier = if let Some(lm) = lssvm_method(method) {
        let median = median_distance(&d.train)
            .filter(|m| *m > 0.0)
            .ok_or_else(|| Error::domain("all training distances are zero"))?;
        let sigmas: Vec<f64> = cfg.sigma_factors.values().iter().map(|f| f * median).collect();
        let gammas = cfg.gamma.values();
        let core = sizes.core;
        let v = validate(
            lm,
            &d.train,
            train_labels,
            &d.validation,
            val_labels,
            &sigmas,
            &gammas,
            cfg.spectral_threshold,
            core,
        )?;
        record.sigma = Some(v.sigma);
        record.gamma = Some(v.gamma);
        record.validation_error = Some(v.error);
        let fitted = fit_lssvm(lm, &d.train, train_labels, v.sigma, v.gamma, cfg.spectral_threshold, core)?;
        record.ell = fitted.feature_map.as_ref().map(|fm| fm.rank());
        record.lambda_min = match fitted.lambda_min {
            Some(l) => Some(l),
            None => {
                let k = d.train.map(|x| exp_kernel(x, v.sigma));
                eigenvalues(&k)?.last().copied()
            }
        };
        let pred = fitted.predict_from_distances(&d.test)?;
        record.test_error = Some(classify::error_rate(&pred, test_labels));
        Classifier::Lssvm(fitted)
    } else {
        let kind = if method == Method::WassKnn {
            DistanceKind::Wasserstein
        } else {
            DistanceKind::Euclidean
        };
        let v = validate_knn(&d.validation, train_labels, val_labels, &cfg.k_grid, kind)?;
        record.k = Some(v.k);
        record.validation_error = Some(v.error);
        let model = KnnModel::new(v.k, kind, train_labels.clone())?;
        let pred = model.classify_rows(&d.test)?;
        record.test_error = Some(classify::error_rate(&pred, test_labels));
        Classifier::Knn(model)
    };
    Ok(ModelFile {
        method,
        classifier,
        width: prep.splits.train.width,
        height: prep.splits.train.height,
        coordinates: cfg.coordinates,
        sinkhorn: cfg.sinkhorn,
        training: prep.splits.train.images.clone(),
    })
}

/// Runs every configured method on one seed. Failures are recorded in the
/// returned records; only a failure to build the split itself is an error.
pub fn run_repetition(
    cfg: &ExperimentConfig,
    set: &LabeledImageSet,
    sizes: &SplitSizes,
    seed: u64,
    verbose: bool,
) -> Result<Vec<(ResultRecord, Option<ModelFile>)>> {
    let prep = experiment::prepare_split(set, sizes, seed, cfg.coordinates)?;
    let needs_w = cfg.methods.iter().any(|m| m.uses_transport());
    let needs_e = cfg.methods.iter().any(|m| !m.uses_transport());
    let started = Instant::now();
    let wass = needs_w.then(|| {
        let dir = experiment::split_cache_dir(&cfg.cache_dir, sizes, seed);
        experiment::wasserstein_distances(&prep, &cfg.sinkhorn, &dir, verbose)
    });
    let distance_seconds = started.elapsed().as_secs_f64();
    let eucl = needs_e.then(|| experiment::euclidean_distances(&prep));
    let mut out = Vec::new();
    for &method in &cfg.methods {
        let mut record = ResultRecord::empty(method, seed, sizes.train);
        let t = Instant::now();
        let d = if method.uses_transport() {
            match wass.as_ref().expect("computed when needed") {
                Ok(d) => Ok(d),
                Err(e) => Err(Error::numerical(e.to_string())),
            }
        } else {
            Ok(eucl.as_ref().expect("computed when needed"))
        };
        let model = d.and_then(|d| evaluate(method, cfg, sizes, &prep, d, &mut record));
        record.seconds = t.elapsed().as_secs_f64() + if method.uses_transport() { distance_seconds } else { 0.0 };
        let model = match model {
            Ok(m) => Some(m),
            Err(e) => {
                record.test_error = None;
                record.status = e.to_string().replace([',', '\n'], ";");
                None
            }
        };
        if verbose {
            eprintln!(
                "seed {seed} {method}: {}",
                record
                    .test_error
                    .map_or(record.status.clone(), |e| format!("test error {e:.2}%"))
            );
        }
        out.push((record, model));
    }
    Ok(out)
}

/// All repetitions of one split size, in seed order.
pub fn run_all(
    cfg: &ExperimentConfig,
    set: &LabeledImageSet,
    sizes: &SplitSizes,
    verbose: bool,
) -> Vec<(u64, Result<Vec<(ResultRecord, Option<ModelFile>)>>)> {
    let one = |&seed: &u64| (seed, run_repetition(cfg, set, sizes, seed, verbose));
    if cfg.concurrent_repetitions {
        cfg.seeds.par_iter().map(one).collect()
    } else {
        cfg.seeds.iter().map(one).collect()
    }
}

/// Mean and sample standard deviation of the completed test errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub train_size: usize,
    pub completed: usize,
    pub failed: usize,
    pub mean: Option<f64>,
    pub std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (Some(mean), Some(std))
}

pub fn summarize(methods: &[Method], train_size: usize, records: &[ResultRecord]) -> Vec<SummaryRow> {
    methods
        .iter()
        .map(|&method| {
            let mine: Vec<&ResultRecord> = records
                .iter()
                .filter(|r| r.method == method && r.train_size == train_size)
                .collect();
            let errors: Vec<f64> = mine.iter().filter_map(|r| r.test_error).collect();
            let (mean, std) = mean_std(&errors);
            SummaryRow {
                method,
                train_size,
                completed: errors.len(),
                failed: mine.len() - errors.len(),
                mean,
                std,
            }
        })
        .collect()
}
