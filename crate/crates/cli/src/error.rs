use std::path::Path;

use serde_json::json;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] ckequant_core::Error),

    #[error("cannot read config {path}: {message}")]
    ConfigRead { path: String, message: String },

    #[error("i/o error at {path}: {message}")]
    Io { path: String, message: String },
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), message: e.to_string() }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.code(),
            CliError::ConfigRead { .. } => "CONFIG_READ",
            CliError::Io { .. } => "IO_ERROR",
        }
    }

    /// 2 for configuration problems, 4 for non-convergence, 3 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.code() {
            "SPEC_INVALID" | "CONFIG_READ" => 2,
            "NOT_CONVERGED" => 4,
            _ => 3,
        }
    }

    pub fn to_json(&self) -> String {
        json!({ "error": { "code": self.code(), "exit": self.exit_code(), "message": self.to_string() } }).to_string()
    }
}
