//! CLI error type with machine-parsable codes for the diagnostic stream.

use std::fmt;
use std::path::Path;

use ghost_core::baselines::BaselineError;
use ghost_core::budget::BudgetError;
use ghost_core::domain::CoreError;
use ghost_core::engine::EngineError;
use ghost_core::scoring::ScoreError;
use ghost_core::simgen::SimError;
use ghost_core::trace::TraceError;

#[derive(Debug)]
pub enum CliError {
    /// File IO, always naming the path involved.
    Io { path: String, source: std::io::Error },
    Parse { path: String, message: String },
    InvalidInput(String),
    InfeasibleBudget(String),
    UnknownPolicy { name: String },
    DimensionMismatch(String),
    Usage(String),
}

impl CliError {
    pub fn code(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "io",
            CliError::Parse { .. } => "parse",
            CliError::InvalidInput(_) => "invalid_input",
            CliError::InfeasibleBudget(_) => "infeasible_budget",
            CliError::UnknownPolicy { .. } => "unknown_policy",
            CliError::DimensionMismatch(_) => "dimension_mismatch",
            CliError::Usage(_) => "usage",
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl fmt::Display) -> Self {
        CliError::Parse {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }

    pub fn from_trace(path: &Path, err: TraceError) -> Self {
        match err {
            TraceError::Io(source) => CliError::io(path, source),
            other => CliError::parse(path, other),
        }
    }

    pub fn from_sim(err: SimError) -> Self {
        match err {
            SimError::UnknownSignal { name, .. } => CliError::Usage(format!(
                "unknown signal {name:?}"
            )),
            SimError::Engine(e) => CliError::from_engine(e),
            SimError::Baseline(e) => CliError::from_baseline(e),
            other => CliError::InvalidInput(other.to_string()),
        }
    }

    pub fn from_engine(err: EngineError) -> Self {
        match err {
            EngineError::LayoutMismatch { .. } => CliError::DimensionMismatch(err.to_string()),
            EngineError::Budget(e) => CliError::from_budget(e),
            other => CliError::InvalidInput(other.to_string()),
        }
    }

    pub fn from_baseline(err: BaselineError) -> Self {
        match err {
            BaselineError::InfeasibleSinkWindow { .. } => {
                CliError::InfeasibleBudget(err.to_string())
            }
            BaselineError::KeyCountMismatch { .. } | BaselineError::KeyDimMismatch { .. } => {
                CliError::DimensionMismatch(err.to_string())
            }
            other => CliError::InvalidInput(other.to_string()),
        }
    }

    pub fn from_budget(err: BudgetError) -> Self {
        match err {
            BudgetError::InfeasibleBudget { .. } => CliError::InfeasibleBudget(err.to_string()),
            other => CliError::InvalidInput(other.to_string()),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io { path, source } => write!(f, "{path}: {source}"),
            CliError::Parse { path, message } => write!(f, "{path}: {message}"),
            CliError::InvalidInput(msg)
            | CliError::InfeasibleBudget(msg)
            | CliError::DimensionMismatch(msg)
            | CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::UnknownPolicy { name } => write!(
                f,
                "unknown policy {name:?}; valid policies: {}",
                ghost_core::baselines::PolicyConfig::NAMES.join(", ")
            ),
        }
    }
}

impl std::error::Error for CliError {}

impl From<CoreError> for CliError {
    fn from(err: CoreError) -> Self {
        CliError::InvalidInput(err.to_string())
    }
}

impl From<ScoreError> for CliError {
    fn from(err: ScoreError) -> Self {
        CliError::InvalidInput(err.to_string())
    }
}
