//! Configuration, model archives, the experiment driver and the `oodnet`
//! command line.

pub mod archive;
pub mod commands;
pub mod config;
pub mod experiment;

use std::path::PathBuf;

use thiserror::Error;

pub use archive::{load_model, save_model, ArchiveError, ModelState};
pub use commands::{run, Cli, Command};
pub use config::{DataSource, DatasetSpec, RunConfig, SyntheticSpec};
pub use experiment::{evaluate, run_experiment, CellReport, Evaluation, Report};

/// Every failure carries the stage it happened in.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("[config] {0}")]
    Config(String),
    #[error("[{stage}] {source}")]
    Data {
        stage: &'static str,
        source: crate::data::DataError,
    },
    #[error("[{stage}] {source}")]
    Nn {
        stage: &'static str,
        source: crate::nn::NnError,
    },
    #[error("[{stage}] {source}")]
    Detector {
        stage: &'static str,
        source: crate::detector::DetectorError,
    },
    #[error("[{stage}] {source}")]
    Head {
        stage: &'static str,
        source: crate::head::HeadError,
    },
    #[error("[{stage}] {source}")]
    Eval {
        stage: &'static str,
        source: crate::evalkit::EvalError,
    },
    #[error("[{stage}] {source}")]
    Archive { stage: &'static str, source: ArchiveError },
    #[error("[{stage}] {}: {source}", path.display())]
    Io {
        stage: &'static str,
        path: PathBuf,
        source: std::io::Error,
    },
}
