use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU32, Ordering};

use serde::{Deserialize, Serialize};

use super::{BasePolicy, PolicyError, UnavailableReason};
use crate::observer::FeedbackDirective;
use crate::state::{CandidateAction, InteractionState, REGENERATION_COUNT};

/// Deterministic policy keyed on `(turn_index, attempt)`.
///
/// The attempt is read from the state's regeneration counter. Candidate `i`
/// takes `texts[i]`; further candidates repeat the last text with a ` #i`
/// suffix.
#[derive(Debug)]
pub struct ScriptedPolicy {
    script: BTreeMap<(u64, u32), Vec<String>>,
    default: String,
    fail: Option<UnavailableReason>,
    calls: AtomicU32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    pub turn: u64,
    #[serde(default)]
    pub attempt: u32,
    pub texts: Vec<String>,
}

/// JSON form: `{"default": "...", "script": [{"turn": 0, "attempt": 0, "texts": ["..."]}]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptSpec {
    pub default: String,
    #[serde(default)]
    pub script: Vec<ScriptEntry>,
}

impl ScriptedPolicy {
    pub fn new(default: impl Into<String>) -> Self {
        ScriptedPolicy { script: BTreeMap::new(), default: default.into(), fail: None, calls: AtomicU32::new(0) }
    }

    pub fn with(mut self, turn: u64, attempt: u32, texts: Vec<String>) -> Self {
        self.script.insert((turn, attempt), texts);
        self
    }

    /// Every call fails with `reason`.
    pub fn failing(mut self, reason: UnavailableReason) -> Self {
        self.fail = Some(reason);
        self
    }

    pub fn from_spec(spec: &ScriptSpec) -> Self {
        spec.script
            .iter()
            .fold(Self::new(spec.default.clone()), |p, e| p.with(e.turn, e.attempt, e.texts.clone()))
    }

    pub fn calls(&self) -> u32 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn reset_calls(&self) {
        self.calls.store(0, Ordering::SeqCst);
    }

    pub fn texts(&self, turn: u64, attempt: u32, n: usize) -> Vec<String> {
        let base: &[String] = match self.script.get(&(turn, attempt)) {
            Some(t) if !t.is_empty() => t,
            _ => std::slice::from_ref(&self.default),
        };
        (0..n)
            .map(|i| match base.get(i) {
                Some(t) => t.clone(),
                None => format!("{} #{i}", base[base.len() - 1]),
            })
            .collect()
    }
}

impl BasePolicy for ScriptedPolicy {
    fn sample(
        &self,
        state: &InteractionState,
        _profile: &str,
        _feedback: Option<&FeedbackDirective>,
        n: usize,
    ) -> Result<Vec<CandidateAction>, PolicyError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(reason) = &self.fail {
            return Err(PolicyError::Unavailable(reason.clone()));
        }
        let attempt = state.counter(REGENERATION_COUNT) as u32;
        Ok(self
            .texts(state.turn_index, attempt, n)
            .into_iter()
            .map(|t| CandidateAction::utterance(t, attempt))
            .collect())
    }
}
