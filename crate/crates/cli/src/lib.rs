//! Pipeline orchestration behind the `pnlss` binary: benchmark generation,
//! identification, decoupling sweep and evaluation.

pub mod config;
pub mod error;
pub mod evaluate;
pub mod manifest;
pub mod pipeline;

pub use config::PipelineConfig;
pub use error::{CliError, Stage};
