//! Reproducible experiments over the federated attack/defense benchmark.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::ExperimentConfig;
pub use experiment::{run_experiment, RunArtifacts};

use shadowdef_core::Error;

/// Process exit status for an error: 1 for configuration problems, 2 for
/// failures while running.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::NotImplemented(_) => 1,
        _ => 2,
    }
}
