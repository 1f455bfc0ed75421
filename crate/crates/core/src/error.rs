use std::path::PathBuf;

use crate::training::TrainingHistory;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing directory: {}", .0.display())]
    MissingDirectory(PathBuf),

    #[error("class `{class}` has no readable images under {}", .dir.display())]
    EmptyClass { class: String, dir: PathBuf },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("stratification needs both classes, found only `{0}`")]
    Stratification(String),

    #[error("pretrained weights unavailable for {backbone}: {reason}")]
    Environment { backbone: String, reason: String },

    #[error("training diverged at epoch {epoch} (non-finite loss)")]
    Diverged {
        epoch: usize,
        history: Box<TrainingHistory>,
    },

    #[error("export failed: {0}")]
    Export(String),

    #[error("not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("malformed model file: {0}")]
    Format(String),

    #[error("bundle version {found} is newer than supported {supported}")]
    UnsupportedVersion { found: String, supported: String },

    #[error("model runtime: {0}")]
    Runtime(String),

    #[error("image decode: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn runtime(e: impl std::fmt::Display) -> Self {
        Error::Runtime(e.to_string())
    }
}
