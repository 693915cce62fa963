//! Scenarios, the turn engine, trajectory logs, metrics and replay.

mod engine;
mod log;
mod metrics;
mod replay;
mod scenario;

use thiserror::Error;

use crate::config::ConfigError;

pub use engine::{EngineConfig, EnsembleSpec, LookaheadSpec, MemberSpec, Session};
pub use log::{
    chain_lines, Footer, Header, LogLine, ModeSwitchRecord, TrajectoryLog, TurnRecord, UserRecord, GENESIS,
    LOG_VERSION,
};
pub use metrics::{metrics, Metrics};
pub use replay::{replay, replay_text, ReplayReport};
pub use scenario::{
    run_scenario, LoadedScenario, Overrides, PolicySpec, ScenarioFile, UserTurnSpec,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Config { path: String, source: ConfigError },
    #[error("validation: {0}")]
    Validation(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("adapter: {0}")]
    Adapter(String),
    #[error("invariant violated{}: {message}", turn_suffix(.turn))]
    Invariant { turn: Option<String>, message: String },
}

fn turn_suffix(turn: &Option<String>) -> String {
    turn.as_ref().map(|t| format!(" at {t}")).unwrap_or_default()
}

impl HarnessError {
    /// CLI exit status: 1 validation, 2 invariant, 3 adapter.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config { .. } | HarnessError::Validation(_) | HarnessError::Io { .. } => 1,
            HarnessError::Invariant { .. } => 2,
            HarnessError::Adapter(_) => 3,
        }
    }

    pub(crate) fn invariant(turn: Option<String>, message: impl Into<String>) -> Self {
        HarnessError::Invariant { turn, message: message.into() }
    }
}
