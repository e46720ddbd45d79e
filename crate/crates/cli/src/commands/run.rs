use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use wexp_core::{Error, Result};

use crate::config::{ExperimentConfig, SplitSizes};
use crate::experiment;
use crate::pipeline::{run_all, summarize, ResultRecord, SummaryRow};

/// Files written by `run`.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub records: Vec<ResultRecord>,
    pub summary: Vec<SummaryRow>,
    pub sweep: Vec<SummaryRow>,
    pub results_csv: PathBuf,
    pub summary_csv: PathBuf,
    pub timings_csv: PathBuf,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn results_csv(records: &[ResultRecord]) -> String {
    let mut s = String::from(
        "method,seed,train_size,sigma,gamma,k,ell,lambda_min,validation_error,test_error,non_converged,status\n",
    );
    for r in records {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.seed,
            r.train_size,
            opt(r.sigma),
            opt(r.gamma),
            opt(r.k),
            opt(r.ell),
            opt(r.lambda_min),
            opt(r.validation_error),
            opt(r.test_error),
            r.non_converged,
            r.status
        );
    }
    s
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,train_size,completed,failed,mean_test_error,std_test_error\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.method,
            r.train_size,
            r.completed,
            r.failed,
            opt(r.mean),
            opt(r.std)
        );
    }
    s
}

/// Method × mean ± std table; missing cells are marked.
pub fn summary_table(rows: &[SummaryRow]) -> String {
    let mut s = format!("{:<12} {:>18} {:>6}\n", "method", "test error (%)", "runs");
    for r in rows {
        let cell = match (r.mean, r.std) {
            (Some(m), Some(sd)) => format!("{m:.2} ± {sd:.2}"),
            _ => "missing".to_string(),
        };
        let runs = if r.failed > 0 {
            format!("{}/{}", r.completed, r.completed + r.failed)
        } else {
            r.completed.to_string()
        };
        let _ = writeln!(s, "{:<12} {:>18} {:>6}", r.method.tag(), cell, runs);
    }
    s
}

fn sweep_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("method,train_size,mean_error,std_error\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{}", r.method, r.train_size, opt(r.mean), opt(r.std));
    }
    s
}

fn timings_csv(records: &[ResultRecord]) -> String {
    let mut s = String::from("method,seed,train_size,seconds\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{:.3}", r.method, r.seed, r.train_size, r.seconds);
    }
    s
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn collect(cfg: &ExperimentConfig, set: &wexp_core::data::LabeledImageSet, sizes: &SplitSizes, models: Option<&Path>, verbose: bool) -> Result<Vec<ResultRecord>> {
    let mut records = Vec::new();
    for (seed, outcome) in run_all(cfg, set, sizes, verbose) {
        match outcome {
            Ok(items) => {
                for (record, model) in items {
                    if let (Some(dir), Some(model)) = (models, model) {
                        model.write(&dir.join(format!("{}-seed{seed}.wskn", record.method)))?;
                    }
                    records.push(record);
                }
            }
            Err(e) => {
                let status = e.to_string().replace([',', '\n'], ";");
                if verbose {
                    eprintln!("seed {seed}: {status}");
                }
                for &method in &cfg.methods {
                    records.push(ResultRecord {
                        method,
                        seed,
                        train_size: sizes.train,
                        sigma: None,
                        gamma: None,
                        k: None,
                        ell: None,
                        lambda_min: None,
                        validation_error: None,
                        test_error: None,
                        non_converged: 0,
                        status: status.clone(),
                        seconds: 0.0,
                    });
                }
            }
        }
    }
    Ok(records)
}

/// Runs all repetitions (and the optional training-size sweep) and writes
/// `results.csv`, `summary.csv`, `summary.txt`, `timings.csv`, `sweep.csv`
/// and one model file per method and seed under the output directory.
pub fn cmd_run(cfg: &ExperimentConfig, verbose: bool) -> Result<RunOutput> {
    let sizes = cfg
        .split
        .ok_or_else(|| Error::usage("run needs a [split] section"))?;
    let set = experiment::load_dataset(cfg)?;
    let out = &cfg.output_dir;
    let models = out.join("models");
    fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;

    let records = collect(cfg, &set, &sizes, Some(&models), verbose)?;
    let summary = summarize(&cfg.methods, sizes.train, &records);

    let mut sweep = Vec::new();
    let mut all_records = records.clone();
    for &n in &cfg.sweep_train_sizes {
        let s = SplitSizes { train: n, core: sizes.core.map(|c| c.min(n)), ..sizes };
        let r = if n == sizes.train { records.clone() } else { collect(cfg, &set, &s, None, verbose)? };
        sweep.extend(summarize(&cfg.methods, n, &r));
        if n != sizes.train {
            all_records.extend(r);
        }
    }

    let results_path = out.join("results.csv");
    let summary_path = out.join("summary.csv");
    let timings_path = out.join("timings.csv");
    write(&results_path, &results_csv(&records))?;
    write(&summary_path, &summary_csv(&summary))?;
    write(&out.join("summary.txt"), &summary_table(&summary))?;
    write(&timings_path, &timings_csv(&all_records))?;
    if !sweep.is_empty() {
        write(&out.join("sweep.csv"), &sweep_csv(&sweep))?;
    }
    Ok(RunOutput {
        records,
        summary,
        sweep,
        results_csv: results_path,
        summary_csv: summary_path,
        timings_csv: timings_path,
    })
}
