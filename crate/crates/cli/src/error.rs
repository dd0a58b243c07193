use thiserror::Error;

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] biphoton_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A validation check ran but missed its threshold.
    #[error("validation failed: {0}")]
    Validation(String),

    #[error("malformed matrix file {path}: {reason}")]
    Format { path: String, reason: String },
}

impl CliError {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 resource, 4 numerical or fit, 5 validation.
    pub fn exit_code(&self) -> i32 {
        use biphoton_core::Error as E;
        match self {
            CliError::Config(_) | CliError::Format { .. } => 2,
            CliError::Io { .. } => 3,
            CliError::Validation(_) => 5,
            CliError::Core(e) if e.is_resource() => 3,
            CliError::Core(e) if e.is_numerical() => 4,
            CliError::Core(E::Config(_) | E::Contract(_) | E::OutOfRange(_)) => 2,
            CliError::Core(_) => 4,
        }
    }
}
