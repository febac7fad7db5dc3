use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("kernel not PSD: min eigenvalue {min_eig:.3e} below tolerance {tol:.3e}")]
    NotPsd { min_eig: f64, tol: f64 },

    #[error("flow not invertible: |det A| = {0:.3e}")]
    NotInvertible(f64),

    #[error("ground set too large for enumeration: N = {n} (limit {limit})")]
    TooLarge { n: usize, limit: usize },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training failed at iteration {iter}: {source}")]
    Training {
        iter: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("misaligned ids: {0:?}")]
    Misaligned(Vec<i64>),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        Error::Json {
            context: context.into(),
            source,
        }
    }
}
