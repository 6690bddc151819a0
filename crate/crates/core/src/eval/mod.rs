//! Metrics, evaluation reports and the command implementations behind the CLI.

pub mod commands;
pub mod metrics;
mod report;

pub use report::{evaluate, Categories, EvalConfig, EvalReport};
