use std::path::PathBuf;

use thiserror::Error;

use crate::format::FormatError;

#[derive(Debug, Error)]
pub enum EdgeError {
    #[error(transparent)]
    Core(#[from] cactus_core::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("manifest line {line}: {reason}")]
    Manifest { line: usize, reason: String },
    #[error("missing image files:{}", list(.0))]
    MissingImages(Vec<PathBuf>),
    #[error("{0}")]
    Usage(String),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| format!("\n  {}", p.display())).collect()
}

pub type Result<T, E = EdgeError> = std::result::Result<T, E>;
