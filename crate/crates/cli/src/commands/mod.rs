//! One function per subcommand; `main.rs` only parses arguments.

mod dist;
mod io;
mod run;
mod scan;

pub use dist::{cmd_dist, DistFile};
pub use io::{cmd_export, cmd_predict, ExportTarget, PredictInput};
pub use run::{cmd_run, results_csv, summary_csv, summary_table, RunOutput};
pub use scan::{cached_distances, cmd_features, cmd_sigma_scan, ScanOutput};
