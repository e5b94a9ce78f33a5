use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("load error in {path}: row {row}, column {column}: {reason}")]
    Load {
        path: PathBuf,
        row: usize,
        column: String,
        reason: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Dimension(format!($($arg)*))
    };
}

macro_rules! contract_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Contract(format!($($arg)*))
    };
}

macro_rules! config_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Config(format!($($arg)*))
    };
}

pub(crate) use {config_err, contract_err, dim_err};
