//! Engagement gating and mode selection above the utterance observer.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::condition::{Condition, Subject};
use crate::config::{parse_json, ConfigError};
use crate::features::{FeatureMap, FeatureRegistry};
use crate::state::{CandidateAction, InteractionState, ModeId, MODE_TURNS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mode {
    pub id: ModeId,
    pub overlay_pack: String,
    pub policy_profile: String,
    pub entry_condition: Condition,
    pub exit_condition: Condition,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_duration_turns: Option<u32>,
}

/// A condition under which no engagement happens at all.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateRule {
    pub id: String,
    pub condition: Condition,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupervisorConfig {
    pub modes: Vec<Mode>,
    pub initial_mode: ModeId,
    #[serde(default)]
    pub gating: Vec<GateRule>,
    /// Pack judging mode switches; absent means switches are always admissible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub switch_overlays: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Engage,
    /// Names the gating rule that held.
    Skip(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeSelection {
    Stay,
    Switch(ModeId),
    /// The current mode wants to exit but no other mode's entry holds.
    NoEligibleMode,
}

impl SupervisorConfig {
    /// A one-mode supervisor with no gating.
    pub fn single(mode_id: &str, pack: &str, profile: &str) -> Self {
        SupervisorConfig {
            modes: vec![Mode {
                id: mode_id.into(),
                overlay_pack: pack.into(),
                policy_profile: profile.into(),
                entry_condition: Condition::Always,
                exit_condition: Condition::Never,
                max_duration_turns: None,
            }],
            initial_mode: mode_id.into(),
            gating: Vec::new(),
            switch_overlays: None,
        }
    }

    pub fn mode(&self, id: &str) -> Option<&Mode> {
        self.modes.iter().find(|m| m.id == id)
    }

    /// Parses and validates; the second value lists load warnings.
    pub fn parse(text: &str, registry: &FeatureRegistry) -> Result<(Self, Vec<String>), ConfigError> {
        let config: SupervisorConfig = parse_json(text)?;
        let warnings = config.validate(registry).map_err(|(id, msg)| {
            if msg.starts_with("duplicate") {
                ConfigError::duplicate(text, &id, msg)
            } else {
                ConfigError::validation(text, &id, msg)
            }
        })?;
        Ok((config, warnings))
    }

    /// Structural checks. Entry/exit overlap is only a warning.
    pub fn validate(&self, registry: &FeatureRegistry) -> Result<Vec<String>, (String, String)> {
        if self.modes.is_empty() {
            return Err((String::new(), "at least one mode is required".into()));
        }
        let mut ids = BTreeSet::new();
        let mut warnings = Vec::new();
        for m in &self.modes {
            if !ids.insert(m.id.as_str()) {
                return Err((m.id.clone(), format!("duplicate mode id `{}`", m.id)));
            }
            if m.max_duration_turns == Some(0) {
                return Err((m.id.clone(), "max_duration_turns must be >= 1".into()));
            }
            for c in [&m.entry_condition, &m.exit_condition] {
                check_features(&m.id, c, registry)?;
            }
            if !m.entry_condition.provably_disjoint(&m.exit_condition) {
                warnings.push(format!("mode `{}`: entry and exit conditions may hold together", m.id));
            }
        }
        if !ids.contains(self.initial_mode.as_str()) {
            return Err((self.initial_mode.clone(), format!("initial_mode `{}` is not a mode", self.initial_mode)));
        }
        let mut gates = BTreeSet::new();
        for g in &self.gating {
            if !gates.insert(g.id.as_str()) {
                return Err((g.id.clone(), format!("duplicate gating rule `{}`", g.id)));
            }
            check_features(&g.id, &g.condition, registry)?;
        }
        Ok(warnings)
    }

    /// Pack ids referenced by modes and the switch judge.
    pub fn pack_ids(&self) -> BTreeSet<&str> {
        self.modes
            .iter()
            .map(|m| m.overlay_pack.as_str())
            .chain(self.switch_overlays.as_deref())
            .collect()
    }
}

fn check_features(id: &str, c: &Condition, registry: &FeatureRegistry) -> Result<(), (String, String)> {
    for s in c.subjects() {
        if let Subject::Feature(f) = s {
            if !registry.declares(f) {
                return Err((id.to_string(), format!("unknown feature `{f}`")));
            }
        }
    }
    Ok(())
}

/// Features the supervisor sees: the state paired with a silence.
pub fn state_features(state: &InteractionState, registry: &FeatureRegistry) -> FeatureMap {
    registry.extract_lenient(state, &CandidateAction::supervisor_silence(0)).0
}

pub fn gate(state: &InteractionState, config: &SupervisorConfig, registry: &FeatureRegistry) -> Gate {
    gate_features(&state_features(state, registry), state, config)
}

pub fn gate_features(features: &FeatureMap, state: &InteractionState, config: &SupervisorConfig) -> Gate {
    config
        .gating
        .iter()
        .find(|g| g.condition.holds(features, &state.trajectory_stats))
        .map_or(Gate::Engage, |g| Gate::Skip(g.id.clone()))
}

/// Leaves the current mode when its exit holds or its duration is spent,
/// for the first other mode in config order whose entry holds.
pub fn select_mode(state: &InteractionState, config: &SupervisorConfig, features: &FeatureMap) -> ModeSelection {
    let counters = &state.trajectory_stats;
    let Some(current) = config.mode(&state.active_mode) else {
        // unknown active mode: recover into the first eligible one
        return config
            .modes
            .iter()
            .find(|m| m.entry_condition.holds(features, counters))
            .map_or(ModeSelection::NoEligibleMode, |m| ModeSelection::Switch(m.id.clone()));
    };
    let expired = current
        .max_duration_turns
        .is_some_and(|max| state.counter(MODE_TURNS) >= f64::from(max));
    if !(expired || current.exit_condition.holds(features, counters)) {
        return ModeSelection::Stay;
    }
    match config
        .modes
        .iter()
        .filter(|m| m.id != current.id)
        .find(|m| m.entry_condition.holds(features, counters))
    {
        Some(m) => ModeSelection::Switch(m.id.clone()),
        None => {
            log::warn!("mode `{}` wants to exit but no mode is eligible", current.id);
            ModeSelection::NoEligibleMode
        }
    }
}
