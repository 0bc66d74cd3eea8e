use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum UclError {
    #[error(transparent)]
    Core(#[from] ucl_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Toml(String),
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error("record does not match schema: {0}")]
    Schema(String),
    #[error("no data root: set `data_root` in the config or {0}")]
    NoDataRoot(&'static str),
    #[error("missing checkpoint {0}")]
    MissingCheckpoint(PathBuf),
    #[error("{0}")]
    Usage(String),
    #[error("plot: {0}")]
    Plot(String),
    #[error("incomplete record: {0}")]
    Incomplete(String),
}

pub type Result<T> = std::result::Result<T, UclError>;

pub(crate) trait IoContext<T> {
    fn at(self, path: &Path) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: &Path) -> Result<T> {
        self.map_err(|source| UclError::Io { path: path.to_path_buf(), source })
    }
}

pub(crate) fn format_err(path: &Path, msg: impl Into<String>) -> UclError {
    UclError::Format { path: path.to_path_buf(), msg: msg.into() }
}
