use thiserror::Error;

/// Errors raised by every stage of the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, hyperparameters or configuration files that cannot be honored.
    #[error("configuration error: {0}")]
    Config(String),

    /// A non-finite or out-of-domain value showed up during computation.
    #[error("numeric error in {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// A caller broke a contract between modules (sampler, namespace, classifier sync).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Replay was requested before the memory holds a full batch of identities.
    #[error("memory warm-up: {resident} resident ids, {required} required")]
    WarmUp { resident: usize, required: usize },

    /// DBSCAN produced no usable clusters.
    #[error("clustering failure: {0}")]
    Clustering(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("config parse error: {0}")]
    TomlDe(#[from] toml::de::Error),

    #[error("config write error: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl Error {
    pub(crate) fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
