use pod_core::scenario::ConfigError;
use serde_json::json;
use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("{path} line {line}: {message}")]
    Trace { path: PathBuf, line: usize, message: String },
    #[error("cannot listen on {addr}: {source}")]
    Bind { addr: String, source: std::io::Error },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("simulation reported {count} fault(s), first: {first}")]
    Faults { count: usize, first: String },
}

impl RunnerError {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Self {
        let path = path.into();
        move |source| Self::Io { path, source }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Io { .. } => "io",
            Self::Grid(_) => "grid",
            Self::Trace { .. } => "trace",
            Self::Bind { .. } => "bind",
            Self::Csv(_) => "csv",
            Self::Faults { .. } => "simulation_fault",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Grid(_) | Self::Trace { .. } => 2,
            _ => 1,
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}
