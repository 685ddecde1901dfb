use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Pipeline stage a failure is attributed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Data,
    Build,
    Train,
    Checkpoint,
    Evaluate,
    Attack,
    Diversity,
    Persist,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Data => "data",
            Stage::Build => "build",
            Stage::Train => "train",
            Stage::Checkpoint => "checkpoint",
            Stage::Evaluate => "evaluate",
            Stage::Attack => "attack",
            Stage::Diversity => "diversity",
            Stage::Persist => "persist",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: Stage,
        #[source]
        source: rls_core::Error,
    },

    #[error("stage `{stage}`: i/o error on {path}: {source}")]
    Io {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("stage `{stage}`: csv error on {path}: {source}")]
    Csv {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("stage `{stage}`: json error on {path}: {source}")]
    Json {
        stage: Stage,
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("missing artifacts in {dir}: {}", names.join(", "))]
    MissingArtifacts { dir: PathBuf, names: Vec<String> },
}

impl HarnessError {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        HarnessError::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Stage the failure belongs to; config problems map to [`Stage::Config`].
    pub fn stage(&self) -> Stage {
        match self {
            HarnessError::Config { .. } => Stage::Config,
            HarnessError::Stage { stage, .. }
            | HarnessError::Io { stage, .. }
            | HarnessError::Csv { stage, .. }
            | HarnessError::Json { stage, .. } => *stage,
            HarnessError::MissingArtifacts { .. } => Stage::Report,
        }
    }
}

/// Attaches a stage to core results. Core config errors keep their field.
pub trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T>;
}

impl<T> AtStage<T> for rls_core::Result<T> {
    fn at(self, stage: Stage) -> Result<T> {
        self.map_err(|source| match source {
            rls_core::Error::Config { field, reason } => HarnessError::Config { field, reason },
            source => HarnessError::Stage { stage, source },
        })
    }
}

pub(crate) fn io_err(stage: Stage, path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Io { stage, path, source }
}

pub(crate) fn csv_err(stage: Stage, path: impl Into<PathBuf>) -> impl FnOnce(csv::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Csv { stage, path, source }
}

pub(crate) fn json_err(
    stage: Stage,
    path: impl Into<PathBuf>,
) -> impl FnOnce(serde_json::Error) -> HarnessError {
    let path = path.into();
    move |source| HarnessError::Json { stage, path, source }
}
