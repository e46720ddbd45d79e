use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wexp_cli::cache::CacheStatus;
use wexp_cli::commands::{self, ExportTarget, PredictInput};
use wexp_cli::config::RawConfig;
use wexp_cli::experiment::load_dataset;
use wexp_core::{Error, Result};

#[derive(Parser)]
#[command(name = "wexp", version, about = "Wasserstein exponential kernel experiments")]
struct Cli {
    /// Configuration file (`key = value` with sections).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set transport.epsilon=0.2`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Idx,
}

#[derive(Subcommand)]
enum Command {
    /// Compute and cache pairwise Sinkhorn distances.
    Dist {
        /// Recompute cached matrices and compare them bit for bit.
        #[arg(long)]
        verify: bool,
    },
    /// Smallest Gram eigenvalue over a bandwidth grid, and the PSD bandwidth.
    SigmaScan,
    /// Validate, train and test every configured method for every seed.
    Run,
    /// Label images with a saved model.
    Predict {
        #[arg(long)]
        model: PathBuf,
        /// IDX image file.
        #[arg(long, conflicts_with = "csv")]
        images: Option<PathBuf>,
        /// IDX label file; enables the error rate report.
        #[arg(long, requires = "images")]
        labels: Option<PathBuf>,
        /// CSV input (label column included).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Convert the configured dataset between IDX and CSV.
    Export {
        #[arg(long, value_enum)]
        to: Format,
        /// Output file (CSV) or image file (IDX).
        #[arg(long)]
        out: PathBuf,
        /// IDX label output file.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Write truncated Wasserstein features of the cached set.
    Features {
        /// Bandwidth; defaults to the median distance.
        #[arg(long)]
        sigma: Option<f64>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut raw = match &cli.config {
        Some(p) => RawConfig::from_file(p)?,
        None => RawConfig::default(),
    };
    for o in &cli.overrides {
        raw.apply_override(o)?;
    }
    raw.apply_env(|k| std::env::var(k).ok());
    let verbose = !cli.quiet;
    if let Command::Predict { model, images, labels, csv } = &cli.command {
        let input = match (images, csv) {
            (Some(i), None) => PredictInput::Idx {
                images: i,
                labels: labels.as_deref(),
            },
            (None, Some(c)) => PredictInput::Csv(c),
            _ => return Err(Error::usage("predict needs --images or --csv")),
        };
        let (labels, error) = commands::cmd_predict(model, &input)?;
        for l in labels {
            println!("{l}");
        }
        if let Some(e) = error {
            eprintln!("error rate: {e:.2}%");
        }
        return Ok(());
    }
    let cfg = raw.resolve()?;
    match cli.command {
        Command::Dist { verify } => {
            let files = commands::cmd_dist(&cfg, verify, verbose)?;
            if files.iter().all(|f| f.status == CacheStatus::Hit) {
                println!("cache hit");
            }
            for f in files {
                println!("{} {}x{} non-converged {}", f.path.display(), f.rows, f.cols, f.non_converged);
            }
        }
        Command::SigmaScan => {
            let s = commands::cmd_sigma_scan(&cfg)?;
            println!("wrote {}", s.csv.display());
            println!(
                "sigma_psd {} (lambda_min {:e}, at 4x {:e}{})",
                s.psd.sigma,
                s.psd.lambda_min,
                s.psd.lambda_min_at_4x,
                if s.psd.transition_found { "" } else { "; no transition found" }
            );
        }
        Command::Run => {
            let out = commands::cmd_run(&cfg, verbose)?;
            print!("{}", commands::summary_table(&out.summary));
            println!("wrote {}", out.results_csv.display());
        }
        Command::Export { to, out, labels_out } => {
            let set = load_dataset(&cfg)?;
            let target = match (to, &labels_out) {
                (Format::Csv, _) => ExportTarget::Csv(&out),
                (Format::Idx, Some(l)) => ExportTarget::Idx { images: &out, labels: l },
                (Format::Idx, None) => return Err(Error::usage("IDX export needs --labels-out")),
            };
            commands::cmd_export(&set, &target)?;
        }
        Command::Features { sigma } => {
            let (path, ell) = commands::cmd_features(&cfg, sigma)?;
            println!("wrote {} with {ell} features", path.display());
        }
        Command::Predict { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
