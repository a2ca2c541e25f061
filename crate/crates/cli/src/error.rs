use std::path::PathBuf;

use perimeter_core::{PpoError, SimError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing inputs: {}", list(.0))]
    Missing(Vec<PathBuf>),
    #[error("invariant breach: {0}")]
    Invariant(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Data(String),
    #[error(transparent)]
    Run(PpoError),
}

fn list(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Missing(_) => 2,
            CliError::Invariant(_) => 3,
            _ => 1,
        }
    }
}

impl From<PpoError> for CliError {
    fn from(e: PpoError) -> Self {
        match e {
            PpoError::Sim(s @ (SimError::Conservation { .. } | SimError::Storage { .. })) => {
                CliError::Invariant(s.to_string())
            }
            e @ PpoError::NonFinite { .. } => CliError::Invariant(e.to_string()),
            PpoError::Config(m) => CliError::Config(m),
            PpoError::Net(n) => CliError::Config(format!("scenario.grid: {n}")),
            PpoError::Demand(d) => CliError::Config(format!("scenario.demand: {d}")),
            e => CliError::Run(e),
        }
    }
}
