use std::fmt;
use std::path::Path;

use spotlight_core::metrics::MetricsError;
use spotlight_core::model::ModelError;
use spotlight_core::pathway::PathwayError;
use spotlight_core::synth::SynthError;
use spotlight_core::train::TrainError;
use spotlight_core::TensorError;

/// Short machine-readable category printed as `error[kind]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Usage,
    Io,
    Format,
    Config,
    Dimension,
    Data,
    Model,
    Train,
    Metrics,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Usage => "usage",
            Self::Io => "io",
            Self::Format => "format",
            Self::Config => "config",
            Self::Dimension => "dimension",
            Self::Data => "data",
            Self::Model => "model",
            Self::Train => "train",
            Self::Metrics => "metrics",
        }
    }
}

impl fmt::Display for ErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Dimension(String),
    #[error(transparent)]
    Pathway(#[from] PathwayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl Error {
    /// A missing file is reported as a usage error: the caller named it.
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        if source.kind() == std::io::ErrorKind::NotFound {
            return Self::Usage(format!(
                "{}: no such file or directory",
                path.as_ref().display()
            ));
        }
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub fn json(path: impl AsRef<Path>, err: serde_json::Error) -> Self {
        Self::Format(format!("{}: {err}", path.as_ref().display()))
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Self::Usage(_) => ErrorKind::Usage,
            Self::Io { .. } => ErrorKind::Io,
            Self::Format(_) => ErrorKind::Format,
            Self::Config(_) => ErrorKind::Config,
            Self::Dimension(_) => ErrorKind::Dimension,
            Self::Pathway(PathwayError::Config(_)) => ErrorKind::Config,
            Self::Pathway(_) | Self::Synth(SynthError::NoEvents) => ErrorKind::Data,
            Self::Synth(_) => ErrorKind::Config,
            Self::Model(ModelError::Dimension(_)) | Self::Tensor(TensorError::Dimension(_)) => {
                ErrorKind::Dimension
            }
            Self::Model(ModelError::Config(_)) => ErrorKind::Config,
            Self::Model(_) | Self::Tensor(_) => ErrorKind::Model,
            Self::Train(_) => ErrorKind::Train,
            Self::Metrics(_) => ErrorKind::Metrics,
        }
    }

    /// `error[kind]: message` on a single line.
    pub fn one_line(&self) -> String {
        let msg = self.to_string().replace(['\n', '\r'], " ");
        format!("error[{}]: {}", self.kind(), msg.trim())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
