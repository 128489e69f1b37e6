use std::path::PathBuf;

use duge_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("timestep {t} outside 0..={max}")]
    Timestep { t: usize, max: usize },
    #[error("attention map mismatch at block {block}, head {head}: {detail}")]
    MapMismatch {
        block: usize,
        head: usize,
        detail: String,
    },
    #[error("unsatisfiable plan: {0}")]
    Plan(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("non-finite total loss at iteration {iteration}: L_U={unlearn}, L_pr={prior}, R_pr={penalty}")]
    NonFiniteLoss {
        iteration: usize,
        unlearn: f64,
        prior: f64,
        penalty: f64,
    },
    #[error("classifier reached {accuracy:.2}% validation accuracy (floor {floor}%); raise `classifier.epochs` or images per class")]
    ClassifierFloor { accuracy: f64, floor: f64 },
    #[error("unlearning run aborted at {0}")]
    Aborted(String),
    #[error("missing artifact {}: run `duge {command}` first", path.display())]
    MissingArtifact { path: PathBuf, command: &'static str },
    #[error("refusing to write into non-empty directory {} (pass --force)", .0.display())]
    NonEmptyOutput(PathBuf),
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("config write: {0}")]
    TomlSer(#[from] toml::ser::Error),
}

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CoreError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user input rather than by the program.
    pub fn is_user_error(&self) -> bool {
        matches!(
            self,
            CoreError::Config(_)
                | CoreError::Plan(_)
                | CoreError::Precondition(_)
                | CoreError::MissingArtifact { .. }
                | CoreError::NonEmptyOutput(_)
                | CoreError::TomlDe(_)
                | CoreError::ClassifierFloor { .. }
        )
    }
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;
