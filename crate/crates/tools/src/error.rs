use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum ToolError {
    #[error("{path}: {source}")]
    Storage {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: unrecognized format")]
    Format { path: PathBuf },
    #[error("{path}: size mismatch: expected {expected} bytes")]
    Size { path: PathBuf, expected: u64 },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Core(#[from] cbm_core::Error),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("protocol error: {message}")]
    Protocol { message: String, raw: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("stage {stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<ToolError>,
    },
}

pub type Result<T, E = ToolError> = std::result::Result<T, E>;

impl ToolError {
    pub fn storage(path: &Path, source: std::io::Error) -> Self {
        ToolError::Storage {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn parse(path: &Path, message: impl Into<String>) -> Self {
        ToolError::Parse {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }

    /// Wraps with a stage name; already staged errors pass through.
    pub fn in_stage(self, stage: &'static str) -> Self {
        match self {
            ToolError::Stage { .. } => self,
            other => ToolError::Stage {
                stage,
                source: Box::new(other),
            },
        }
    }
}

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<ToolError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| e.into().in_stage(stage))
    }
}
