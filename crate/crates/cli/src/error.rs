use codebias_core::corpus::CorpusError;
use codebias_core::editor::EditError;
use codebias_core::locator::LocateError;
use codebias_core::metrics::MetricsError;
use codebias_core::model::ModelError;
use codebias_core::train::TrainError;

use crate::adapter::AdapterError;

/// Exit code 2 for bad input or configuration, 1 for anything that failed
/// while running.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        let msg = format!("{}: {e}", path.display());
        match e.kind() {
            std::io::ErrorKind::NotFound | std::io::ErrorKind::InvalidData => CliError::Config(msg),
            _ => CliError::Runtime(msg),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match &e {
            CorpusError::Io { source, .. } if source.kind() != std::io::ErrorKind::NotFound => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match &e {
            ModelError::Config(_) | ModelError::Format(_) | ModelError::Address(_) | ModelError::Tokenize(_) => {
                CliError::Config(e.to_string())
            }
            ModelError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Diverged { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::Probe(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LocateError> for CliError {
    fn from(e: LocateError) -> Self {
        match e {
            LocateError::Model(m) => m.into(),
            LocateError::Degenerate(_) => CliError::Runtime(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EditError> for CliError {
    fn from(e: EditError) -> Self {
        match e {
            EditError::Config(_) | EditError::Mask(_) => CliError::Config(e.to_string()),
            EditError::Model(m) => m.into(),
            EditError::Metrics(m) => m.into(),
            EditError::Degenerate(_) => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<AdapterError> for CliError {
    fn from(e: AdapterError) -> Self {
        match e {
            AdapterError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}
