//! Experiment commands behind the `depthflow` binary.
//!
//! Each command resolves its settings (flag, then config file, then
//! default), writes its outputs into one run directory and finishes with a
//! `run.json` manifest echoing the resolved settings.

pub mod ablate;
pub mod args;
pub mod config;
pub mod data;
pub mod eval;
pub mod field;
pub mod gen;
pub mod model;
pub mod output;
pub mod quant;
pub mod svg;
pub mod train;

use std::fmt;

use depthflow_core::Error as CoreError;

/// Bad flags, config keys or combinations. Exit code 1.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "usage: {}", self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

/// Maps an error chain onto the exit code contract.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_USAGE;
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Config(_) => EXIT_USAGE,
                CoreError::Io(_)
                | CoreError::Corrupt(_)
                | CoreError::Json(_)
                | CoreError::Csv(_) => EXIT_IO,
                CoreError::Domain(_)
                | CoreError::Shape(_)
                | CoreError::Contract(_)
                | CoreError::Degenerate(_) => EXIT_NUMERIC,
            };
        }
        if cause.is::<std::io::Error>() || cause.is::<serde_json::Error>() {
            return EXIT_IO;
        }
    }
    EXIT_USAGE
}

/// Runs a parsed command line.
pub fn run(cli: args::Cli) -> anyhow::Result<()> {
    use args::Command;
    match cli.command {
        Command::QuantTable(a) => quant::run(a),
        Command::GenData(a) => gen::run(a),
        Command::Train(a) => train::run(a),
        Command::Eval(a) => eval::run(a),
        Command::FieldPlot(a) => field::run(a),
        Command::Ablate(a) => ablate::run(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_error_kind() {
        let usage = anyhow::Error::new(UsageError("x".into()));
        assert_eq!(exit_code(&usage), EXIT_USAGE);
        let io = anyhow::Error::new(CoreError::Corrupt("x".into())).context("loading");
        assert_eq!(exit_code(&io), EXIT_IO);
        let raw_io = anyhow::Error::new(std::io::Error::other("x"));
        assert_eq!(exit_code(&raw_io), EXIT_IO);
        let num = anyhow::Error::new(CoreError::Degenerate("flat".into()));
        assert_eq!(exit_code(&num), EXIT_NUMERIC);
        assert_eq!(
            exit_code(&anyhow::Error::new(CoreError::Config("k".into()))),
            EXIT_USAGE
        );
    }
}
