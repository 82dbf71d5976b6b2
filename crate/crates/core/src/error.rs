use thiserror::Error;

/// Errors raised anywhere in the solver stack.
///
/// The variants are grouped by failure class so that front ends can map
/// them onto exit codes (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("point map is undefined at index {index} (map has {len} entries)")]
    UndefinedMap { index: usize, len: usize },

    #[error("sample {index} lies outside the dual grid")]
    Coverage { index: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("unphysical state: {0}")]
    Physicality(String),

    #[error("problem of size {cells}x{particles} exceeds the exact-solver cap {cap_cells}x{cap_particles}")]
    Capacity {
        cells: usize,
        particles: usize,
        cap_cells: usize,
        cap_particles: usize,
    },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    Convergence { iterations: usize, residual: f64 },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("check failed: {0}")]
    Check(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("time step ending at t = {t} failed: {source}")]
    Step {
        t: f64,
        #[source]
        source: Box<Error>,
    },
}

/// Coarse failure classes used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Numerical,
    Capacity,
    Other,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::Input(_) => ErrorClass::Config,
            Error::Capacity { .. } => ErrorClass::Capacity,
            Error::Convergence { .. }
            | Error::Numerical(_)
            | Error::Check(_)
            | Error::Physicality(_)
            | Error::Domain(_)
            | Error::Coverage { .. }
            | Error::UndefinedMap { .. }
            | Error::Internal(_) => ErrorClass::Numerical,
            Error::Io { .. } => ErrorClass::Other,
            Error::Step { source, .. } => source.class(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
