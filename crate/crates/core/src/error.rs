use std::fmt;

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by dataset ingestion, model construction and solving.
#[derive(Debug, Error)]
pub enum Error {
    /// A dataset file is missing, malformed, or fails referential checks.
    /// Carries the offending file and, where known, the 1-based data row.
    #[error("{file}{}: {message}", fmt_row(*.row))]
    Ingest {
        file: String,
        row: Option<usize>,
        message: String,
    },

    /// A structurally invalid network or fleet (disconnected graph,
    /// non-positive reactance, bad slack, ...).
    #[error("invalid case: {0}")]
    InvalidCase(String),

    /// Bad scenario configuration or parameter values.
    #[error("configuration error: {0}")]
    Config(String),

    /// The optimization problem has no feasible point.
    #[error("{0}")]
    Infeasible(InfeasibilityReport),

    /// The optimization problem is unbounded, which indicates a
    /// mis-configured scenario (e.g. a negative cost coefficient).
    #[error("unbounded problem in {context}: check penalties and cost data")]
    Unbounded { context: String },

    /// The solver terminated abnormally (numerical failure, iteration limit).
    #[error("solver failure in {context}: {status}")]
    Solver { context: String, status: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A pipeline stage failed; wraps the underlying error with the stage
    /// name and the hash of the configuration that produced it.
    #[error("stage {stage} failed (config {config_hash}): {source}")]
    Stage {
        stage: String,
        config_hash: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Walk through stage wrappers to the primary cause.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}

fn fmt_row(row: Option<usize>) -> String {
    match row {
        Some(r) => format!(", row {r}"),
        None => String::new(),
    }
}

/// Structured description of an infeasible solve: which stage and timestep
/// failed and, when a diagnostic solve was possible, which constraints had
/// to be violated to restore feasibility.
#[derive(Debug, Clone)]
pub struct InfeasibilityReport {
    /// Human-readable problem context, e.g. "market clearing (flow-based)".
    pub context: String,
    /// Timestep label of the failing subproblem, if per-timestep.
    pub timestep: Option<String>,
    /// Constraints identified as binding by the elastic diagnostic solve,
    /// e.g. "cnec L3 (outage L5)" or "generator g4 upper bound".
    pub binding: Vec<String>,
}

impl fmt::Display for InfeasibilityReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "infeasible: {}", self.context)?;
        if let Some(t) = &self.timestep {
            write!(f, " at timestep {t}")?;
        }
        if !self.binding.is_empty() {
            write!(f, " (binding: {})", self.binding.join(", "))?;
        }
        Ok(())
    }
}

impl Error {
    pub(crate) fn ingest(file: impl Into<String>, row: Option<usize>, message: impl Into<String>) -> Self {
        Error::Ingest {
            file: file.into(),
            row,
            message: message.into(),
        }
    }
}
