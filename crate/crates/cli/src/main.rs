//! `acae`: reproducible runs for corpus synthesis, autoencoder fitting,
//! latent-count sweeps, the consistency fine-tuning demo and evaluation.
//!
//! Every run writes its outputs into `--out` and finishes with a
//! `manifest.json` holding the full configuration and the SHA-256 of each
//! input and output. `acae replay --manifest <file> --out <dir>` re-executes
//! the recorded run and checks that every output is byte-identical.

mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use acae::AcaeError;
use clap::Parser;

use crate::args::Cli;
use crate::manifest::ReplayMismatch;

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ReplayMismatch>().is_some() {
        return 6;
    }
    match err.downcast_ref::<AcaeError>() {
        Some(
            AcaeError::ConfigInvalid(_)
            | AcaeError::UnknownFormat(_)
            | AcaeError::UnknownTag(_)
            | AcaeError::EmptyLabelSet(_)
            | AcaeError::TooFewLatents { .. },
        ) => 3,
        Some(AcaeError::Io(_)) => 4,
        Some(
            AcaeError::Parse(_)
            | AcaeError::ShapeMismatch(_)
            | AcaeError::CatalogMismatch(_)
            | AcaeError::IncompleteInput
            | AcaeError::EmptyCorpus,
        ) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
