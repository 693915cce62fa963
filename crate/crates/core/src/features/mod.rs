//! Feature extraction: maps (state, candidate) pairs to named features.

mod builtin;
pub mod lexicon;
pub mod text;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::state::{CandidateAction, InteractionState};

pub use builtin::{
    builtin_extractors, AssistiveMotiveFlag, EmpathyLexicon, FrustrationKeywords,
    NegativityRunning, PersonCountStub, RepetitionNgram, SocialPresenceStub, TopicShiftFlag,
    VerbosityRatio, NEGATIVITY_WINDOW,
};

pub type FeatureMap = BTreeMap<String, FeatureValue>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScope {
    TurnLocal,
    TrajectoryAggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureData {
    /// Always within [0, 1].
    Scalar(f64),
    Count(u64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureValue {
    pub name: String,
    pub value: FeatureData,
    pub scope: FeatureScope,
    pub confidence: f64,
}

impl FeatureValue {
    /// Scalar feature, clamped to [0, 1], with full confidence.
    pub fn scalar(name: impl Into<String>, value: f64, scope: FeatureScope) -> Self {
        let value = if value.is_nan() { 0.0 } else { value.clamp(0.0, 1.0) };
        FeatureValue {
            name: name.into(),
            value: FeatureData::Scalar(value),
            scope,
            confidence: 1.0,
        }
    }

    pub fn count(name: impl Into<String>, value: u64, scope: FeatureScope) -> Self {
        FeatureValue { name: name.into(), value: FeatureData::Count(value), scope, confidence: 1.0 }
    }

    pub fn label(name: impl Into<String>, value: impl Into<String>, scope: FeatureScope) -> Self {
        FeatureValue {
            name: name.into(),
            value: FeatureData::Label(value.into()),
            scope,
            confidence: 1.0,
        }
    }

    pub fn with_confidence(mut self, confidence: f64) -> Self {
        self.confidence = if confidence.is_nan() { 0.0 } else { confidence.clamp(0.0, 1.0) };
        self
    }

    /// Numeric view: scalars as-is, counts as floats, labels as `None`.
    pub fn as_number(&self) -> Option<f64> {
        match &self.value {
            FeatureData::Scalar(v) => Some(*v),
            FeatureData::Count(c) => Some(*c as f64),
            FeatureData::Label(_) => None,
        }
    }

    pub fn as_label(&self) -> Option<&str> {
        match &self.value {
            FeatureData::Label(l) => Some(l),
            _ => None,
        }
    }
}

/// What an extractor reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    History,
    ExogenousTags,
    CandidateContent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureDecl {
    pub name: &'static str,
    pub scope: FeatureScope,
}

/// Behavioral contract for extractors: pure, and emitting exactly the
/// declared features.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn declared(&self) -> &[FeatureDecl];
    fn inputs(&self) -> &[Input];

    fn extract(
        &self,
        state: &InteractionState,
        action: &CandidateAction,
    ) -> Result<Vec<FeatureValue>, String>;

    /// Scope of the extractor's primary (first declared) feature.
    fn scope(&self) -> FeatureScope {
        self.declared().first().map_or(FeatureScope::TurnLocal, |d| d.scope)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("duplicate extractor name `{0}`")]
    DuplicateExtractor(String),
    #[error("feature `{feature}` declared by both `{first}` and `{second}`")]
    DuplicateFeature { feature: String, first: String, second: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("extractor `{name}` faulted: {message}")]
    ExtractorFault { name: String, message: String },
}

/// Ordered set of extractors with unique names and disjoint feature sets.
#[derive(Clone)]
pub struct FeatureRegistry {
    extractors: Vec<Arc<dyn FeatureExtractor>>,
}

impl std::fmt::Debug for FeatureRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.extractors.iter().map(|e| e.name())).finish()
    }
}

impl FeatureRegistry {
    pub fn new(extractors: Vec<Arc<dyn FeatureExtractor>>) -> Result<Self, RegistryError> {
        let mut names = BTreeSet::new();
        let mut owners: BTreeMap<&str, &str> = BTreeMap::new();
        for e in &extractors {
            if !names.insert(e.name().to_string()) {
                return Err(RegistryError::DuplicateExtractor(e.name().to_string()));
            }
            for d in e.declared() {
                if let Some(first) = owners.insert(d.name, e.name()) {
                    return Err(RegistryError::DuplicateFeature {
                        feature: d.name.to_string(),
                        first: first.to_string(),
                        second: e.name().to_string(),
                    });
                }
            }
        }
        Ok(FeatureRegistry { extractors })
    }

    /// The shipped deterministic pack.
    pub fn builtin() -> Self {
        Self::new(builtin_extractors()).expect("builtin extractors have unique names")
    }

    pub fn extractors(&self) -> &[Arc<dyn FeatureExtractor>] {
        &self.extractors
    }

    pub fn declares(&self, feature: &str) -> bool {
        self.extractors
            .iter()
            .any(|e| e.declared().iter().any(|d| d.name == feature))
    }

    pub fn feature_names(&self) -> BTreeSet<String> {
        self.extractors
            .iter()
            .flat_map(|e| e.declared().iter().map(|d| d.name.to_string()))
            .collect()
    }

    fn run_one(
        extractor: &dyn FeatureExtractor,
        state: &InteractionState,
        action: &CandidateAction,
    ) -> Result<Vec<FeatureValue>, ExtractError> {
        let fault = |message: String| ExtractError::ExtractorFault {
            name: extractor.name().to_string(),
            message,
        };
        let values = extractor.extract(state, action).map_err(fault)?;
        let declared: BTreeSet<&str> = extractor.declared().iter().map(|d| d.name).collect();
        let mut seen = BTreeSet::new();
        for v in &values {
            if !declared.contains(v.name.as_str()) {
                return Err(fault(format!("emitted undeclared feature `{}`", v.name)));
            }
            seen.insert(v.name.as_str());
        }
        if seen.len() != declared.len() || values.len() != declared.len() {
            return Err(fault("did not emit exactly its declared features".to_string()));
        }
        Ok(values)
    }

    /// Strict extraction; the first faulting extractor aborts.
    pub fn extract_all(
        &self,
        state: &InteractionState,
        action: &CandidateAction,
    ) -> Result<FeatureMap, ExtractError> {
        let mut out = FeatureMap::new();
        for e in &self.extractors {
            for v in Self::run_one(e.as_ref(), state, action)? {
                out.insert(v.name.clone(), v);
            }
        }
        Ok(out)
    }

    /// Extraction that degrades faulted extractors to confidence-0 values
    /// instead of failing. Returns the faults alongside the map.
    pub fn extract_lenient(
        &self,
        state: &InteractionState,
        action: &CandidateAction,
    ) -> (FeatureMap, Vec<ExtractError>) {
        let mut out = FeatureMap::new();
        let mut faults = Vec::new();
        for e in &self.extractors {
            match Self::run_one(e.as_ref(), state, action) {
                Ok(values) => {
                    for v in values {
                        out.insert(v.name.clone(), v);
                    }
                }
                Err(err) => {
                    log::warn!("{err}");
                    for d in e.declared() {
                        out.insert(
                            d.name.to_string(),
                            FeatureValue::scalar(d.name, 0.0, d.scope).with_confidence(0.0),
                        );
                    }
                    faults.push(err);
                }
            }
        }
        (out, faults)
    }
}

/// Free-function form of [`FeatureRegistry::extract_all`].
pub fn extract_all(
    registry: &FeatureRegistry,
    state: &InteractionState,
    action: &CandidateAction,
) -> Result<FeatureMap, ExtractError> {
    registry.extract_all(state, action)
}
