//! Base policies: the unconstrained candidate generators the observer wraps.

mod remote;
mod scripted;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::observer::FeedbackDirective;
use crate::state::{CandidateAction, InteractionState};

pub use remote::{
    build_request, parse_response, ChatMessage, FixtureResponse, FixtureTransport, HttpTransport,
    RemoteChatPolicy, RemoteConfig, Transport, TransportError, TransportResponse, API_KEY_ENV,
};
pub use scripted::{ScriptEntry, ScriptSpec, ScriptedPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnavailableReason {
    Timeout,
    Auth,
    MalformedResponse(String),
    Status(u16),
    Transport(String),
}

impl fmt::Display for UnavailableReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            UnavailableReason::Timeout => write!(f, "timeout"),
            UnavailableReason::Auth => write!(f, "auth"),
            UnavailableReason::MalformedResponse(m) => write!(f, "malformed response: {m}"),
            UnavailableReason::Status(code) => write!(f, "http status {code}"),
            UnavailableReason::Transport(m) => write!(f, "transport: {m}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("base policy unavailable: {0}")]
    Unavailable(UnavailableReason),
}

/// Behavioral contract: returns exactly `n` candidates or fails with
/// [`PolicyError::Unavailable`]. Implementations see the state, the mode's
/// profile id and any pending feedback, never the overlays.
pub trait BasePolicy: Send + Sync {
    fn sample(
        &self,
        state: &InteractionState,
        profile: &str,
        feedback: Option<&FeedbackDirective>,
        n: usize,
    ) -> Result<Vec<CandidateAction>, PolicyError>;
}
