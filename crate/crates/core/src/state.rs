//! Interaction state, candidate actions and the transition function.
//!
//! States are immutable values: every operation returns a new state. The
//! canonical JSON serialization (field order as declared, ordered maps and
//! sets) feeds [`InteractionState::digest`] and the trajectory log.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::digest::Digest64;
use crate::features::FeatureMap;

pub type ModeId = String;
pub type Counters = BTreeMap<String, f64>;

/// Consecutive agent turns that ended in a fallback instead of a base-policy action.
pub const CONSECUTIVE_REJECTIONS: &str = "consecutive_rejections";
/// Regenerations performed so far in the turn being decided.
pub const REGENERATION_COUNT: &str = "regeneration_count_this_turn";
/// Generation attempt of the action executed in the previous agent turn.
pub const LAST_TURN_REGENERATIONS: &str = "last_turn_regenerations";
/// Agent turns since the active mode was entered.
pub const MODE_TURNS: &str = "mode_turns";
/// Prefix of per-tag streak counters maintained from user-turn tags.
pub const STREAK_PREFIX: &str = "streak:";

const TICK_MS: i64 = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Speaker {
    User,
    Agent,
    System,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Utterance,
    ModeSwitch(ModeId),
    Silence,
    Defer,
    FallbackRef { id: String, resets_trajectory: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSource {
    BasePolicy,
    FallbackLibrary,
    Supervisor,
}

/// A proposed action awaiting an admissibility judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateAction {
    pub content: String,
    pub kind: ActionKind,
    pub generation_attempt: u32,
    pub source: ActionSource,
}

impl CandidateAction {
    pub fn utterance(content: impl Into<String>, generation_attempt: u32) -> Self {
        CandidateAction {
            content: content.into(),
            kind: ActionKind::Utterance,
            generation_attempt,
            source: ActionSource::BasePolicy,
        }
    }

    /// An explicit no-content action issued by the supervisor (gating, defer).
    pub fn supervisor_silence(generation_attempt: u32) -> Self {
        CandidateAction {
            content: String::new(),
            kind: ActionKind::Silence,
            generation_attempt,
            source: ActionSource::Supervisor,
        }
    }

    pub fn mode_switch(target: impl Into<String>) -> Self {
        let target = target.into();
        CandidateAction {
            content: format!("mode_switch:{target}"),
            kind: ActionKind::ModeSwitch(target),
            generation_attempt: 0,
            source: ActionSource::Supervisor,
        }
    }

    pub fn is_agent_turn(&self) -> bool {
        !matches!(self.kind, ActionKind::ModeSwitch(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    pub timestamp_ms: i64,
    pub kind: ActionKind,
}

/// The trajectory-aware state the observer judges against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionState {
    pub session_id: String,
    pub turn_index: u64,
    pub history: Vec<Turn>,
    pub feature_cache: FeatureMap,
    pub trajectory_stats: Counters,
    pub active_mode: ModeId,
    pub exogenous_tags: BTreeSet<String>,
}

impl InteractionState {
    pub fn new(session_id: impl Into<String>, initial_mode: impl Into<ModeId>) -> Self {
        let mut trajectory_stats = Counters::new();
        for name in [CONSECUTIVE_REJECTIONS, LAST_TURN_REGENERATIONS, MODE_TURNS, REGENERATION_COUNT] {
            trajectory_stats.insert(name.to_string(), 0.0);
        }
        InteractionState {
            session_id: session_id.into(),
            turn_index: 0,
            history: Vec::new(),
            feature_cache: FeatureMap::new(),
            trajectory_stats,
            active_mode: initial_mode.into(),
            exogenous_tags: BTreeSet::new(),
        }
    }

    /// Counter value; absent counters read as zero.
    pub fn counter(&self, name: &str) -> f64 {
        self.trajectory_stats.get(name).copied().unwrap_or(0.0)
    }

    pub fn digest(&self) -> Digest64 {
        state_digest(self)
    }

    pub fn agent_turns(&self) -> impl DoubleEndedIterator<Item = &Turn> {
        self.history.iter().filter(|t| t.speaker == Speaker::Agent)
    }

    pub fn last_user_turn(&self) -> Option<&Turn> {
        self.history.iter().rev().find(|t| t.speaker == Speaker::User)
    }

    fn next_timestamp(&self) -> i64 {
        self.history.last().map_or(0, |t| t.timestamp_ms + TICK_MS)
    }

    /// Appends a user turn and replaces the exogenous tags.
    ///
    /// Streak counters (`streak:<tag>`) advance for every plain tag present
    /// and are dropped for tags that are absent. Key/value tags such as
    /// `persons:2` are readings, not events, and carry no streak.
    pub fn record_user_turn(&self, text: &str, tags: &BTreeSet<String>) -> Self {
        let mut next = self.clone();
        next.history.push(Turn {
            speaker: Speaker::User,
            text: text.to_string(),
            timestamp_ms: self.next_timestamp(),
            kind: ActionKind::Utterance,
        });
        next.trajectory_stats
            .retain(|k, _| !k.starts_with(STREAK_PREFIX) || tags.contains(&k[STREAK_PREFIX.len()..]));
        for tag in tags.iter().filter(|t| !t.contains(':')) {
            *next
                .trajectory_stats
                .entry(format!("{STREAK_PREFIX}{tag}"))
                .or_insert(0.0) += 1.0;
        }
        next.exogenous_tags = tags.clone();
        next
    }

    /// Copy of the state with the within-turn regeneration counter set.
    pub fn with_regeneration_count(&self, attempt: u32) -> Self {
        let mut next = self.clone();
        next.trajectory_stats
            .insert(REGENERATION_COUNT.to_string(), f64::from(attempt));
        next
    }

    /// Replaces the feature cache wholesale.
    pub fn with_feature_cache(mut self, features: FeatureMap) -> Self {
        self.feature_cache = features;
        self
    }
}

/// The transition function: appends the action's turn and updates counters.
///
/// Agent actions advance `turn_index`; a mode switch is recorded as a system
/// turn that changes `active_mode` without consuming an agent turn.
pub fn apply_transition(
    state: &InteractionState,
    action: &CandidateAction,
    exogenous: &BTreeSet<String>,
) -> InteractionState {
    let mut next = state.clone();
    let timestamp_ms = state.next_timestamp();
    let stats = &mut next.trajectory_stats;

    match &action.kind {
        ActionKind::ModeSwitch(target) => {
            next.history.push(Turn {
                speaker: Speaker::System,
                text: action.content.clone(),
                timestamp_ms,
                kind: action.kind.clone(),
            });
            next.active_mode = target.clone();
            stats.insert(MODE_TURNS.to_string(), 0.0);
        }
        kind => {
            let text = match kind {
                ActionKind::Silence | ActionKind::Defer => String::new(),
                _ => action.content.clone(),
            };
            next.history.push(Turn {
                speaker: Speaker::Agent,
                text,
                timestamp_ms,
                kind: kind.clone(),
            });
            next.turn_index += 1;

            let rejections = stats.get(CONSECUTIVE_REJECTIONS).copied().unwrap_or(0.0);
            let rejections = match action.source {
                ActionSource::BasePolicy => 0.0,
                ActionSource::FallbackLibrary => rejections + 1.0,
                ActionSource::Supervisor => rejections,
            };
            stats.insert(CONSECUTIVE_REJECTIONS.to_string(), rejections);
            stats.insert(REGENERATION_COUNT.to_string(), 0.0);
            stats.insert(
                LAST_TURN_REGENERATIONS.to_string(),
                f64::from(action.generation_attempt),
            );
            *stats.entry(MODE_TURNS.to_string()).or_insert(0.0) += 1.0;

            if let ActionKind::FallbackRef { resets_trajectory: true, .. } = kind {
                stats.retain(|k, _| !k.starts_with(STREAK_PREFIX));
                stats.insert(CONSECUTIVE_REJECTIONS.to_string(), 0.0);
                stats.insert(MODE_TURNS.to_string(), 0.0);
            }
        }
    }
    next.exogenous_tags = exogenous.clone();
    next
}

pub fn state_digest(state: &InteractionState) -> Digest64 {
    Digest64::of_json(state)
}

/// One executed step of the trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub prev_state_digest: Digest64,
    pub action: CandidateAction,
    pub next_state_digest: Digest64,
    pub exogenous_tags: BTreeSet<String>,
    pub decision_ref: u64,
}
