//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller violated a precondition (bad dimensions, empty input, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An iterative factorization failed to converge, or the solution blew up.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The Sylvester operator is (numerically) singular: the left and right
    /// coefficient matrices share an eigenvalue.
    #[error("singular Sylvester pencil: {0}")]
    SingularPencil(String),

    /// Invalid run configuration (unknown problem, incompatible scheme, ...).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
