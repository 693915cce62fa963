use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::condition::{Condition, Subject};
use crate::config::{parse_json, ConfigError};
use crate::features::{FeatureMap, FeatureRegistry};
use crate::state::{ActionKind, ActionSource, CandidateAction, Counters};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallbackEntry {
    pub id: String,
    pub condition: Condition,
    pub action: String,
    #[serde(default)]
    pub resets_trajectory: bool,
}

impl FallbackEntry {
    pub fn to_action(&self, generation_attempt: u32) -> CandidateAction {
        CandidateAction {
            content: self.action.clone(),
            kind: ActionKind::FallbackRef { id: self.id.clone(), resets_trajectory: self.resets_trajectory },
            generation_attempt,
            source: ActionSource::FallbackLibrary,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FallbackError {
    #[error("fallback library is empty")]
    Empty,
    #[error("duplicate fallback id `{0}`")]
    DuplicateId(String),
    #[error("fallback `{0}` has an empty action")]
    EmptyAction(String),
    #[error("exactly one entry must have condition \"always\" (found {0})")]
    AlwaysCount(usize),
    #[error("the \"always\" entry `{0}` must be last")]
    AlwaysNotLast(String),
    #[error("fallback `{id}` references unknown feature `{feature}`")]
    UnknownFeature { id: String, feature: String },
}

impl FallbackError {
    fn id(&self) -> &str {
        match self {
            FallbackError::Empty | FallbackError::AlwaysCount(_) => "",
            FallbackError::DuplicateId(id)
            | FallbackError::EmptyAction(id)
            | FallbackError::AlwaysNotLast(id)
            | FallbackError::UnknownFeature { id, .. } => id,
        }
    }
}

/// Ordered, condition-indexed safe actions. The last entry always applies.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FallbackLibrary {
    entries: Vec<FallbackEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLibrary {
    entries: Vec<FallbackEntry>,
}

impl FallbackLibrary {
    pub fn new(entries: Vec<FallbackEntry>) -> Result<Self, FallbackError> {
        if entries.is_empty() {
            return Err(FallbackError::Empty);
        }
        let mut ids = BTreeSet::new();
        for e in &entries {
            if !ids.insert(e.id.as_str()) {
                return Err(FallbackError::DuplicateId(e.id.clone()));
            }
            if e.action.trim().is_empty() {
                return Err(FallbackError::EmptyAction(e.id.clone()));
            }
        }
        let always: Vec<&FallbackEntry> =
            entries.iter().filter(|e| e.condition == Condition::Always).collect();
        if always.len() != 1 {
            return Err(FallbackError::AlwaysCount(always.len()));
        }
        let last = entries.last().expect("non-empty");
        if last.condition != Condition::Always {
            return Err(FallbackError::AlwaysNotLast(always[0].id.clone()));
        }
        Ok(FallbackLibrary { entries })
    }

    /// Parses `{"entries": [...]}` and validates features against `registry`.
    pub fn parse(text: &str, registry: &FeatureRegistry) -> Result<Self, ConfigError> {
        let raw: RawLibrary = parse_json(text)?;
        let lib = Self::new(raw.entries).map_err(|e| match &e {
            FallbackError::DuplicateId(id) => ConfigError::duplicate(text, id, e.to_string()),
            _ => ConfigError::validation(text, e.id(), e.to_string()),
        })?;
        lib.check_features(registry)
            .map_err(|e| ConfigError::validation(text, e.id(), e.to_string()))?;
        Ok(lib)
    }

    pub fn check_features(&self, registry: &FeatureRegistry) -> Result<(), FallbackError> {
        for e in &self.entries {
            for s in e.condition.subjects() {
                if let Subject::Feature(f) = s {
                    if !registry.declares(f) {
                        return Err(FallbackError::UnknownFeature { id: e.id.clone(), feature: f.clone() });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> &[FallbackEntry] {
        &self.entries
    }

    pub fn get(&self, id: &str) -> Option<&FallbackEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn always_entry(&self) -> &FallbackEntry {
        self.entries.last().expect("validated library is non-empty")
    }

    /// First entry whose condition holds.
    pub fn select(&self, features: &FeatureMap, counters: &Counters) -> &FallbackEntry {
        self.entries
            .iter()
            .find(|e| e.condition.holds(features, counters))
            .unwrap_or_else(|| self.always_entry())
    }
}

impl<'de> Deserialize<'de> for FallbackLibrary {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawLibrary::deserialize(d)?;
        FallbackLibrary::new(raw.entries).map_err(serde::de::Error::custom)
    }
}

pub fn select_fallback<'a>(library: &'a FallbackLibrary, features: &FeatureMap, counters: &Counters) -> &'a str {
    &library.select(features, counters).id
}
