use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or physically inadmissible configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// An operation was called on data in the wrong state, e.g. a forward
    /// transform on a photon already in the momentum domain.
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("memory budget exceeded: {what} needs {required} bytes, budget is {budget} bytes")]
    Budget { what: String, required: u64, budget: u64 },

    #[error("cache exhausted: writing {attempted} bytes would exceed the cache limit of {limit} bytes")]
    CacheFull { attempted: u64, limit: u64 },

    #[error("not enough free space in {path}: {required} bytes needed, {available} available")]
    InsufficientSpace {
        path: String,
        required: u64,
        available: u64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error(
        "fringe fit did not converge after {iterations} iterations (best residual {residual:.3e}, V={visibility:.4})"
    )]
    FitNonConvergence {
        iterations: usize,
        residual: f64,
        visibility: f64,
    },
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    /// True for errors caused by insufficient memory or cache resources.
    pub fn is_resource(&self) -> bool {
        matches!(
            self,
            Error::Budget { .. } | Error::CacheFull { .. } | Error::InsufficientSpace { .. } | Error::Io(_)
        )
    }

    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::Numerical(_) | Error::FitNonConvergence { .. })
    }
}
