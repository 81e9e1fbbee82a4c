use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// Malformed caller input: wrong dimensions, empty sets, bad indices.
    #[error("input error: {0}")]
    Input(String),

    /// Invalid configuration or incompatible architecture.
    #[error("configuration error: {0}")]
    Config(String),

    /// Non-finite intermediate value.
    #[error("numeric error{}: {message}", layer.map(|l| format!(" in layer {l}")).unwrap_or_default())]
    Numeric { layer: Option<usize>, message: String },

    #[error("argument {0} is outside the domain of the principal Lambert W branch (x < -1/e)")]
    Domain(f64),

    #[error("iteration did not converge (residual {residual:e})")]
    NoConvergence { residual: f64 },

    /// Two latent codes were mapped to the same output point.
    #[error("mode collapse: outputs {i} and {j} coincide")]
    ModeCollapse { i: usize, j: usize },

    /// File-format problem; `offset` is the byte (or line) position where it was detected.
    #[error("format error{}: {message}", offset.map(|o| format!(" at offset {o}")).unwrap_or_default())]
    Format { offset: Option<u64>, message: String },

    #[error("io error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn numeric(layer: Option<usize>, msg: impl Into<String>) -> Self {
        Error::Numeric {
            layer,
            message: msg.into(),
        }
    }

    pub(crate) fn format(offset: Option<u64>, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
