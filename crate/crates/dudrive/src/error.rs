use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path} row {row}: {msg}")]
    MalformedRow { path: PathBuf, row: usize, msg: String },

    #[error("dataset is empty after ingestion: {0}")]
    EmptyDataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("non-finite loss at step {step} (epoch {epoch}): d={loss_d} g_adv={loss_g_adv} task={loss_task}")]
    NonFiniteLoss {
        step: usize,
        epoch: usize,
        loss_d: f64,
        loss_g_adv: f64,
        loss_task: f64,
    },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
