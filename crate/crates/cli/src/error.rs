//! Failure classification for the process exit code.

use std::fmt;
use std::io;
use std::path::Path;

use proxylab_core::proxyfit::FitError;
use proxylab_core::trainer::TrainError;

/// Everything that can stop a command, sorted by what the caller should do
/// about it: fix the config (1), investigate the numerical blow-up (2), or
/// loosen the density mask (3).
#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config keys, parameter values, or unusable paths.
    Config(String),
    /// A training loss went non-finite; partial artifacts were still written.
    Abort(String),
    /// The density mask rejected every grid node, so no proxy point exists
    /// under the configured threshold.
    Infeasible(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Abort(_) => 2,
            CliError::Infeasible(_) => 3,
        }
    }

    /// Wraps an IO failure with the path it concerned. Filesystem problems
    /// exit like config errors: the fix is in the invocation, not the run.
    pub fn io(path: &Path, err: io::Error) -> Self {
        CliError::Config(format!("{}: {err}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Abort(msg) => write!(f, "runtime abort: {msg}"),
            CliError::Infeasible(msg) => write!(f, "infeasible: {msg}"),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NumericalAbort(msg) => CliError::Abort(msg),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<FitError> for CliError {
    fn from(e: FitError) -> Self {
        match e {
            FitError::NoFeasibleRegion => CliError::Infeasible(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
