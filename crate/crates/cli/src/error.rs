use mmntp_core::codec::CodecError;
use mmntp_core::metrics::MetricsError;
use mmntp_core::model::ModelError;
use mmntp_core::planner::PlanError;
use mmntp_core::scene::SceneError;
use mmntp_core::training::TrainError;
use serde::Serialize;
use thiserror::Error;

/// Failure classes, each with its own process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

#[derive(Serialize)]
struct Report<'a> {
    error: &'a str,
    exit_code: i32,
    message: String,
}

impl CliError {
    pub fn config(e: impl std::fmt::Display) -> Self {
        Self::Config(e.to_string())
    }

    pub fn data(e: impl std::fmt::Display) -> Self {
        Self::Data(e.to_string())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) => 3,
            Self::Numerical(_) => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Data(_) => "data",
            Self::Numerical(_) => "numerical",
        }
    }

    /// One-line JSON for the diagnostic stream.
    pub fn to_json(&self) -> String {
        let r = Report { error: self.kind(), exit_code: self.exit_code(), message: self.to_string() };
        serde_json::to_string(&r).expect("plain strings serialize")
    }

    /// Prefixes the message with the file or stage it came from.
    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            Self::Config(m) => Self::Config(format!("{what}: {m}")),
            Self::Data(m) => Self::Data(format!("{what}: {m}")),
            Self::Numerical(m) => Self::Numerical(format!("{what}: {m}")),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<CodecError> for CliError {
    fn from(e: CodecError) -> Self {
        match e {
            CodecError::NonPositiveHorizon { .. } | CodecError::ChangeLongerThanHorizon { .. } | CodecError::ZeroFps => {
                Self::config(e)
            }
            _ => Self::data(e),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Config(_) | SceneError::Infeasible(_) => Self::config(e),
            SceneError::Codec(c) => c.into(),
            _ => Self::data(e),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::config(e),
            ModelError::NonFinite(_) => Self::Numerical(e.to_string()),
            ModelError::Codec(c) => c.into(),
            _ => Self::data(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::config(e),
            TrainError::NonFinite(_) => Self::Numerical(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Codec(c) => c.into(),
            _ => Self::data(e),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::KTooLarge { .. } | MetricsError::KTooSmall { .. } | MetricsError::BadHorizon(_) => {
                Self::config(e)
            }
            MetricsError::Model(m) => m.into(),
            MetricsError::Codec(c) => c.into(),
            _ => Self::data(e),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Config(_) | PlanError::InfeasibleBox(_) => Self::config(e),
            PlanError::NonFinite(_) => Self::Numerical(e.to_string()),
            _ => Self::data(e),
        }
    }
}
