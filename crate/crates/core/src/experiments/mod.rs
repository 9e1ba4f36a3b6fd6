//! Experiment drivers behind the `sharelab` command line: single runs, share
//! sweeps, paired convergence comparisons, and bucketed score analysis.

pub mod analyze;
pub mod compare;
pub mod config;
pub mod run;
pub mod sweep;

pub use analyze::{bucket_report, cmd_analyze, BucketReport};
pub use compare::{cmd_compare, compare_records, CompareReport};
pub use config::{ExperimentConfig, OutputConfig};
pub use run::{cmd_run, train_config, RunSummary};
pub use sweep::{cmd_sweep_share, SweepReport};

use crate::error::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_IO: i32 = 4;

/// Process exit code for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_VALIDATION,
        Error::Io { .. } => EXIT_IO,
        _ => EXIT_OTHER,
    }
}
