use std::fmt;
use std::path::Path;

use actionformer::data::DataError;
use actionformer::eval::EvalError;
use actionformer::model::ModelError;
use actionformer::postprocess::PostprocessError;
use actionformer::targets::TargetError;
use actionformer::trainer::TrainError;
use af_tensor::{CheckpointError, TensorError};
use serde::Serialize;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Internal,
    Usage,
    Io,
    Parse,
    Config,
    Training,
    CheckFailed,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Internal => 1,
            ErrorKind::Usage => 2,
            ErrorKind::Io => 3,
            ErrorKind::Parse => 4,
            ErrorKind::Config => 5,
            ErrorKind::Training => 6,
            ErrorKind::CheckFailed => 7,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: ErrorKind,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, message: impl Into<String>) -> Self {
        CliError {
            kind,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, message)
    }

    pub fn io(path: &Path, err: std::io::Error) -> Self {
        Self::new(ErrorKind::Io, format!("{}: {err}", path.display()))
    }

    pub fn json(path: &Path, err: serde_json::Error) -> Self {
        Self::new(ErrorKind::Parse, format!("{}: {err}", path.display()))
    }

    /// Machine-readable form written to stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Body<'a> {
            kind: ErrorKind,
            code: i32,
            message: &'a str,
        }
        #[derive(Serialize)]
        struct Wrapper<'a> {
            error: Body<'a>,
        }
        serde_json::to_string(&Wrapper {
            error: Body {
                kind: self.kind,
                code: self.kind.exit_code(),
                message: &self.message,
            },
        })
        .expect("error body serializes")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match &e {
            DataError::Io { .. } => ErrorKind::Io,
            DataError::Json(..)
            | DataError::BadMagic
            | DataError::Version(_)
            | DataError::Truncated { .. }
            | DataError::Empty
            | DataError::NonFinite { .. } => ErrorKind::Parse,
            DataError::MissingVideo(_)
            | DataError::InvalidAnnotation(_)
            | DataError::NoActions(_)
            | DataError::Config(_) => ErrorKind::Config,
            DataError::Tensor(_) => ErrorKind::Internal,
        };
        CliError::new(kind, e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        let kind = match e {
            CheckpointError::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Parse,
        };
        CliError::new(kind, format!("checkpoint: {e}"))
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::new(ErrorKind::Internal, e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Tensor(t) => t.into(),
            other => CliError::config(other.to_string()),
        }
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<PostprocessError> for CliError {
    fn from(e: PostprocessError) -> Self {
        CliError::config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Model(e) => e.into(),
            TrainError::Data(e) => e.into(),
            TrainError::Targets(e) => e.into(),
            TrainError::Tensor(e) => e.into(),
            TrainError::Checkpoint(e) => e.into(),
            TrainError::Config(m) => CliError::config(m),
            e @ TrainError::NonFiniteLoss { .. } => CliError::new(ErrorKind::Training, e.to_string()),
        }
    }
}
