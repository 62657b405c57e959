use thiserror::Error;

/// Errors surfaced by solvers, configuration parsing and file I/O.
///
/// Shape mismatches between fields on different grids are programming
/// errors and panic instead (see `GridSpec::assert_same`).
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}:{line}: {msg}")]
    ConfigSyntax {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("numerical breakdown in {context} at iteration {iteration}")]
    Breakdown { context: &'static str, iteration: usize },

    #[error("{context} did not converge at step {step}: residual {residual:.3e} after {iterations} iterations")]
    SolverFailure {
        context: &'static str,
        step: usize,
        residual: f64,
        iterations: usize,
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported field file version in {path}: {found:?}")]
    FieldVersion { path: String, found: String },

    #[error("malformed field file {path}, row {row}: {msg}")]
    FieldFormat {
        path: String,
        row: usize,
        msg: String,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
