use monitorvlm_core::Error as CoreError;
use monitorvlm_server::ServerError;
use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flag combinations or missing inputs detected by the CLI itself.
    #[error("{0}")]
    Usage(String),
    #[error("configuration: {0}")]
    Config(#[from] Box<figment::Error>),
    #[error(transparent)]
    Core(#[from] CoreError),
    #[error(transparent)]
    Server(#[from] ServerError),
}

fn core_is_validation(err: &CoreError) -> bool {
    matches!(
        err,
        CoreError::Validation(_) | CoreError::Schema { .. } | CoreError::Shape { .. }
    )
}

impl CliError {
    pub fn is_validation(&self) -> bool {
        match self {
            CliError::Usage(_) | CliError::Config(_) => true,
            CliError::Core(e) => core_is_validation(e),
            CliError::Server(ServerError::Config(_)) => true,
            CliError::Server(ServerError::Core(e)) => core_is_validation(e),
            CliError::Server(_) => false,
        }
    }

    /// 1 for invalid input or configuration, 2 for failures while running.
    pub fn exit_code(&self) -> u8 {
        if self.is_validation() {
            1
        } else {
            2
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        error_json(
            if self.is_validation() { "validation" } else { "runtime" },
            self.exit_code(),
            &self.to_string(),
        )
    }
}

pub fn error_json(kind: &str, exit_code: u8, message: &str) -> serde_json::Value {
    json!({
        "error": {
            "kind": kind,
            "exit_code": exit_code,
            "message": message,
        }
    })
}
