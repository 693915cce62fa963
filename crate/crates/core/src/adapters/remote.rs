//! Chat-completion client.
//!
//! Request body:
//!
//! ```json
//! {"model": "m", "messages": [{"role": "system", "content": "..."}, ...], "n": 2}
//! ```
//!
//! Messages: the mode profile as a system message, then the transcript
//! (user turns as `user`, agent utterances as `assistant`; silences and
//! system turns omitted), then pending feedback as a final system message.
//! Response: `{"choices": [{"message": {"content": "..."}}, ...]}`.

use std::collections::{BTreeMap, VecDeque};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BasePolicy, PolicyError, UnavailableReason};
use crate::observer::FeedbackDirective;
use crate::state::{CandidateAction, InteractionState, Speaker, REGENERATION_COUNT};

pub const API_KEY_ENV: &str = "GUARD_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
    /// Profile id to system prompt. Unknown ids are sent verbatim.
    #[serde(default)]
    pub profiles: BTreeMap<String, String>,
}

fn default_timeout() -> u64 {
    10_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransportResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Other(String),
}

pub trait Transport: Send + Sync {
    fn post(
        &self,
        url: &str,
        bearer: Option<&str>,
        body: &Value,
        timeout: Duration,
    ) -> Result<TransportResponse, TransportError>;
}

/// Recorded responses served in order; captures every request body.
#[derive(Debug, Default)]
pub struct FixtureTransport {
    responses: Mutex<VecDeque<FixtureResponse>>,
    captured: Mutex<Vec<Value>>,
}

/// One recorded exchange. `timeout: true` simulates a timed-out call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureResponse {
    #[serde(default = "ok_status")]
    pub status: u16,
    #[serde(default)]
    pub body: Value,
    #[serde(default)]
    pub timeout: bool,
}

fn ok_status() -> u16 {
    200
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FixtureFile {
    responses: Vec<FixtureResponse>,
}

impl FixtureTransport {
    pub fn new(responses: Vec<FixtureResponse>) -> Self {
        FixtureTransport { responses: Mutex::new(responses.into()), captured: Mutex::new(Vec::new()) }
    }

    /// Parses `{"responses": [{"status": 200, "body": {...}}, ...]}`.
    pub fn from_json(text: &str) -> Result<Self, crate::config::ConfigError> {
        let file: FixtureFile = crate::config::parse_json(text)?;
        Ok(Self::new(file.responses))
    }

    pub fn captured(&self) -> Vec<Value> {
        self.captured.lock().expect("fixture lock").clone()
    }
}

impl Transport for FixtureTransport {
    fn post(&self, _url: &str, _bearer: Option<&str>, body: &Value, _timeout: Duration) -> Result<TransportResponse, TransportError> {
        self.captured.lock().expect("fixture lock").push(body.clone());
        let next = self.responses.lock().expect("fixture lock").pop_front();
        match next {
            None => Err(TransportError::Other("fixture exhausted".into())),
            Some(r) if r.timeout => Err(TransportError::Timeout),
            Some(r) => Ok(TransportResponse { status: r.status, body: r.body.to_string() }),
        }
    }
}

/// Blocking HTTP transport.
#[derive(Debug, Default)]
pub struct HttpTransport;

impl Transport for HttpTransport {
    fn post(&self, url: &str, bearer: Option<&str>, body: &Value, timeout: Duration) -> Result<TransportResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        if let Some(token) = bearer {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let map_err = |e: ureq::Error| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Other(other.to_string()),
        };
        let mut resp = req.send(body.to_string()).map_err(map_err)?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(map_err)?;
        Ok(TransportResponse { status, body })
    }
}

pub fn build_request(
    config: &RemoteConfig,
    state: &InteractionState,
    profile: &str,
    feedback: Option<&FeedbackDirective>,
    n: usize,
) -> Value {
    let system = config.profiles.get(profile).map_or(profile, String::as_str);
    let mut messages = vec![ChatMessage { role: "system".into(), content: system.to_string() }];
    for turn in &state.history {
        let role = match turn.speaker {
            Speaker::User => "user",
            Speaker::Agent if !turn.text.is_empty() => "assistant",
            _ => continue,
        };
        messages.push(ChatMessage { role: role.into(), content: turn.text.clone() });
    }
    if let Some(fb) = feedback {
        messages.push(ChatMessage { role: "system".into(), content: fb.directive_text.clone() });
    }
    json!({ "model": config.model, "messages": messages, "n": n })
}

pub fn parse_response(resp: &TransportResponse, n: usize) -> Result<Vec<String>, UnavailableReason> {
    match resp.status {
        200..=299 => {}
        401 | 403 => return Err(UnavailableReason::Auth),
        408 | 504 => return Err(UnavailableReason::Timeout),
        code => return Err(UnavailableReason::Status(code)),
    }
    let malformed = |m: &str| UnavailableReason::MalformedResponse(m.to_string());
    let body: Value = serde_json::from_str(&resp.body).map_err(|e| malformed(&e.to_string()))?;
    let choices = body
        .get("choices")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed("missing `choices`"))?;
    let texts = choices
        .iter()
        .map(|c| {
            c.pointer("/message/content")
                .and_then(Value::as_str)
                .map(str::to_string)
                .ok_or_else(|| malformed("choice without `message.content`"))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if texts.len() != n {
        return Err(malformed(&format!("expected {n} choices, got {}", texts.len())));
    }
    Ok(texts)
}

pub struct RemoteChatPolicy {
    config: RemoteConfig,
    transport: Box<dyn Transport>,
    api_key: Option<String>,
}

impl RemoteChatPolicy {
    /// Reads the bearer token from `GUARD_API_KEY`.
    pub fn from_env(config: RemoteConfig, transport: Box<dyn Transport>) -> Self {
        let api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        RemoteChatPolicy { config, transport, api_key }
    }

    pub fn with_api_key(config: RemoteConfig, transport: Box<dyn Transport>, api_key: impl Into<String>) -> Self {
        RemoteChatPolicy { config, transport, api_key: Some(api_key.into()) }
    }
}

impl BasePolicy for RemoteChatPolicy {
    fn sample(
        &self,
        state: &InteractionState,
        profile: &str,
        feedback: Option<&FeedbackDirective>,
        n: usize,
    ) -> Result<Vec<CandidateAction>, PolicyError> {
        let unavailable = PolicyError::Unavailable;
        let Some(key) = self.api_key.as_deref() else {
            return Err(unavailable(UnavailableReason::Auth));
        };
        let body = build_request(&self.config, state, profile, feedback, n);
        let timeout = Duration::from_millis(self.config.timeout_ms);
        let resp = self
            .transport
            .post(&self.config.endpoint, Some(key), &body, timeout)
            .map_err(|e| {
                unavailable(match e {
                    TransportError::Timeout => UnavailableReason::Timeout,
                    TransportError::Other(m) => UnavailableReason::Transport(m),
                })
            })?;
        let attempt = state.counter(REGENERATION_COUNT) as u32;
        Ok(parse_response(&resp, n)
            .map_err(unavailable)?
            .into_iter()
            .map(|t| CandidateAction::utterance(t, attempt))
            .collect())
    }
}
