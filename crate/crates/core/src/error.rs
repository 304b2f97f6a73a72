use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LaffError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LaffError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("graph state error: {0}")]
    State(String),

    #[error("numeric error in {node}: {detail}")]
    Numeric { node: String, detail: String },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),

    #[error("image error ({path}): {detail}")]
    Image { path: PathBuf, detail: String },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// Load failures for the `LAFF` container format. Each failure mode is distinct.
#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes {0:?}, expected \"LAFF\"")]
    BadMagic([u8; 4]),

    #[error("unsupported format version {0}")]
    Version(u32),

    #[error("file truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: u64, found: u64 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("manifest mismatch: {0}")]
    ManifestMismatch(String),
}

macro_rules! dim_err {
    ($($arg:tt)*) => {
        $crate::error::LaffError::Dimension(format!($($arg)*))
    };
}

pub(crate) use dim_err;
