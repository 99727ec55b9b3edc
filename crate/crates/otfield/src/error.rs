use std::path::PathBuf;
use thiserror::Error;

/// Error variants for the whole pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible shapes or dimensions between two operands.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A parameter is outside its documented range.
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A graph failed validation.
    #[error("invalid graph{}: {violations:?}", sample_context(.sample))]
    InvalidGraph {
        sample: Option<usize>,
        violations: Vec<crate::graph::Violation>,
    },

    /// Iterative solver ran out of its iteration budget.
    #[error("solver did not converge{}: residual {residual:.3e} after {iterations} iterations (tolerance {tolerance:.3e})", sample_context(.sample))]
    NonConvergence {
        sample: Option<usize>,
        residual: f64,
        iterations: usize,
        tolerance: f64,
    },

    /// A matrix factorization failed even after the jitter ladder.
    #[error("conditioning failure: {0}")]
    Conditioning(String),

    /// Requested oracle instance exceeds the supported size.
    #[error("instance too large for exact oracle: {0}")]
    OracleTooLarge(String),

    /// Unknown strategy or registry key.
    #[error("unknown {kind} '{name}' (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    /// File could not be parsed.
    #[error("parse error in {path}{}: {message}", line_context(.line))]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        message: String,
    },

    /// Dataset-level inconsistency (lengths, missing files, sample mismatch).
    #[error("data error{}: {message}", sample_context(.sample))]
    Data {
        sample: Option<usize>,
        message: String,
    },

    /// Archive format or checksum problem.
    #[error("archive error: {0}")]
    Archive(String),

    /// Archive was written by an unsupported format version.
    #[error("unsupported archive version {found} (supported: {supported})")]
    ArchiveVersion { found: u32, supported: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn sample_context(sample: &Option<usize>) -> String {
    match sample {
        Some(i) => format!(" (sample {i})"),
        None => String::new(),
    }
}

fn line_context(line: &Option<usize>) -> String {
    match line {
        Some(l) => format!(" (line {l})"),
        None => String::new(),
    }
}

/// Coarse classification used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad arguments or configuration (exit code 1).
    Usage,
    /// Malformed or inconsistent data (exit code 2).
    Data,
    /// Numerical failure such as non-convergence or conditioning (exit code 3).
    Numerical,
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidParameter(_) | Error::UnknownName { .. } => ErrorCategory::Usage,
            Error::NonConvergence { .. } | Error::Conditioning(_) => ErrorCategory::Numerical,
            Error::ShapeMismatch(_)
            | Error::InvalidGraph { .. }
            | Error::OracleTooLarge(_)
            | Error::Parse { .. }
            | Error::Data { .. }
            | Error::Archive(_)
            | Error::ArchiveVersion { .. }
            | Error::Io { .. } => ErrorCategory::Data,
        }
    }

    /// Attach a sample index to errors raised while processing one sample.
    pub fn with_sample(self, sample: usize) -> Self {
        match self {
            Error::InvalidGraph { violations, .. } => Error::InvalidGraph {
                sample: Some(sample),
                violations,
            },
            Error::NonConvergence {
                residual,
                iterations,
                tolerance,
                ..
            } => Error::NonConvergence {
                sample: Some(sample),
                residual,
                iterations,
                tolerance,
            },
            Error::Data { message, .. } => Error::Data {
                sample: Some(sample),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
