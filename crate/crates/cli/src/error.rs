use std::fmt;

/// Pipeline stage an error came from; printed as the diagnostic tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Generate,
    Identify,
    Decouple,
    Evaluate,
    Manifest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Generate => "generate",
            Stage::Identify => "identify",
            Stage::Decouple => "decouple",
            Stage::Evaluate => "evaluate",
            Stage::Manifest => "manifest",
        })
    }
}

#[derive(Debug, thiserror::Error)]
#[error("[{stage}] {message}")]
pub struct CliError {
    pub stage: Stage,
    pub message: String,
}

impl CliError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        Self {
            stage,
            message: message.into(),
        }
    }
}

/// Tags core errors with the stage they occurred in.
pub trait StageContext<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError>;
}

impl<T> StageContext<T> for pnlss::Result<T> {
    fn stage(self, stage: Stage) -> Result<T, CliError> {
        self.map_err(|e| CliError::new(stage, e.to_string()))
    }
}
