//! Judging candidate sets against overlays, the regeneration loop, feedback
//! and fallbacks.

mod decide;
mod fallback;
mod feedback;

use serde::{Deserialize, Serialize};

use crate::ensemble::DisagreementAction;
use crate::features::{FeatureMap, FeatureRegistry};
use crate::overlay::{OverlayKind, OverlayPack, OverlayVerdict};
use crate::state::{CandidateAction, InteractionState};

pub use decide::{decide, AttemptRecord, DecideOutcome, Decider, Disposition, ObserverDecision};
pub use fallback::{select_fallback, FallbackEntry, FallbackError, FallbackLibrary};
pub use feedback::{FeedbackDirective, FeedbackStrength, ViolatedOverlay};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    EmptyAdmissibleSet,
    LowConfidence,
    OverlayConflict,
    LookaheadFailure,
}

impl RejectionReason {
    pub fn as_str(self) -> &'static str {
        match self {
            RejectionReason::EmptyAdmissibleSet => "empty_admissible_set",
            RejectionReason::LowConfidence => "low_confidence",
            RejectionReason::OverlayConflict => "overlay_conflict",
            RejectionReason::LookaheadFailure => "lookahead_failure",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub conf_threshold: f64,
    pub conflict_threshold: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds { conf_threshold: 0.5, conflict_threshold: 1.0 }
    }
}

/// Loop limits for [`decide`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Limits {
    pub regen_bound: u32,
    pub conf_threshold: f64,
    pub conflict_threshold: f64,
    /// Near-miss window for implicit feedback.
    pub implicit_margin: f64,
    /// Candidates requested per base-policy call.
    pub candidates_per_call: usize,
}

impl Default for Limits {
    fn default() -> Self {
        let t = Thresholds::default();
        Limits {
            regen_bound: 2,
            conf_threshold: t.conf_threshold,
            conflict_threshold: t.conflict_threshold,
            implicit_margin: 0.05,
            candidates_per_call: 1,
        }
    }
}

impl Limits {
    pub fn thresholds(&self) -> Thresholds {
        Thresholds { conf_threshold: self.conf_threshold, conflict_threshold: self.conflict_threshold }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.candidates_per_call == 0 {
            return Err("candidates_per_call must be >= 1".into());
        }
        for (name, v) in [
            ("conf_threshold", self.conf_threshold),
            ("conflict_threshold", self.conflict_threshold),
            ("implicit_margin", self.implicit_margin),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(format!("{name} must be finite and >= 0"));
            }
        }
        Ok(())
    }
}

/// One candidate with its features and per-overlay verdicts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgedCandidate {
    pub action: CandidateAction,
    pub features: FeatureMap,
    pub verdicts: Vec<OverlayVerdict>,
    /// `Conf(a)`: minimum verdict confidence, 1 with no verdicts.
    pub confidence: f64,
    pub admissible: bool,
    /// Pairs of activated overlays demanding disjoint ranges of one feature.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub conflicts: Vec<(String, String)>,
}

impl JudgedCandidate {
    /// Largest deviation over the candidate's verdicts.
    pub fn worst_deviation(&self) -> f64 {
        self.verdicts
            .iter()
            .map(|v| v.deviation)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn aggregate_confidence(verdicts: &[OverlayVerdict]) -> f64 {
    verdicts.iter().map(|v| v.confidence).fold(1.0, f64::min)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdmissibleSet {
    pub candidates: Vec<JudgedCandidate>,
    pub admissible_indices: Vec<usize>,
}

impl AdmissibleSet {
    pub fn from_candidates(candidates: Vec<JudgedCandidate>) -> Self {
        let admissible_indices = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.admissible)
            .map(|(i, _)| i)
            .collect();
        AdmissibleSet { candidates, admissible_indices }
    }

    pub fn is_empty(&self) -> bool {
        self.admissible_indices.is_empty()
    }

    /// Admissible indices by preference: highest `Conf(a)`, then lowest
    /// worst-case deviation, then generation order.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx = self.admissible_indices.clone();
        idx.sort_by(|&a, &b| {
            let (ca, cb) = (&self.candidates[a], &self.candidates[b]);
            cb.confidence
                .total_cmp(&ca.confidence)
                .then(ca.worst_deviation().total_cmp(&cb.worst_deviation()))
                .then(a.cmp(&b))
        });
        idx
    }

    pub fn best(&self) -> Option<usize> {
        self.ranked().first().copied()
    }
}

/// A member observer's contribution to an ensemble judgment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberJudgment {
    pub observer_id: String,
    pub admissible_indices: Vec<usize>,
    pub rejection: Option<RejectionReason>,
}

/// The result of judging one candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct Judgment {
    pub set: AdmissibleSet,
    pub rejection: Option<RejectionReason>,
    /// Per-member detail when judged by an ensemble.
    pub members: Vec<MemberJudgment>,
    pub disagreement: bool,
    /// Set when ensemble disagreement routes the turn away from execution.
    pub escalation: Option<DisagreementAction>,
}

/// Anything that can judge a candidate list: a single observer or an ensemble.
pub trait Judge: Send + Sync {
    fn registry(&self) -> &FeatureRegistry;
    fn judge(&self, candidates: &[CandidateAction], state: &InteractionState) -> Judgment;
}

/// Rejection taxonomy in fixed order: empty set, low confidence, conflict.
pub fn classify(set: &AdmissibleSet, thresholds: &Thresholds) -> Option<RejectionReason> {
    if set.is_empty() {
        return Some(RejectionReason::EmptyAdmissibleSet);
    }
    let best_conf = set
        .admissible_indices
        .iter()
        .map(|&i| set.candidates[i].confidence)
        .fold(f64::NEG_INFINITY, f64::max);
    if best_conf < thresholds.conf_threshold {
        return Some(RejectionReason::LowConfidence);
    }
    if set.candidates.iter().all(|c| !c.conflicts.is_empty()) {
        return Some(RejectionReason::OverlayConflict);
    }
    None
}

/// Activated prohibitory overlays on one feature whose nominal ranges are
/// disjoint and whose combined weight reaches the conflict threshold.
pub fn conflicting_pairs(
    pack: &OverlayPack,
    verdicts: &[OverlayVerdict],
    conflict_threshold: f64,
) -> Vec<(String, String)> {
    let active: Vec<_> = pack
        .overlays
        .iter()
        .zip(verdicts)
        .filter(|(o, v)| {
            o.kind == OverlayKind::Prohibitory && v.activated && v.evaluable && o.constraint.bound.is_some()
        })
        .map(|(o, _)| o)
        .collect();
    let mut out = Vec::new();
    for (i, a) in active.iter().enumerate() {
        for b in &active[i + 1..] {
            if a.constraint.feature != b.constraint.feature {
                continue;
            }
            let (Some(ba), Some(bb)) = (a.constraint.bound, b.constraint.bound) else { continue };
            let disjoint = ba.nominal_range().intersect(&bb.nominal_range()).is_empty();
            if disjoint && a.severity_weight + b.severity_weight >= conflict_threshold {
                out.push((a.id.clone(), b.id.clone()));
            }
        }
    }
    out
}

/// Judges candidates under one pack: extracts features once per candidate,
/// evaluates every overlay, builds the admissible set and classifies.
pub fn judge(
    candidates: &[CandidateAction],
    state: &InteractionState,
    pack: &OverlayPack,
    registry: &FeatureRegistry,
    thresholds: &Thresholds,
) -> (AdmissibleSet, Option<RejectionReason>) {
    let judged = candidates
        .iter()
        .map(|action| judge_one(action, state, pack, registry, thresholds))
        .collect();
    let set = AdmissibleSet::from_candidates(judged);
    let reason = classify(&set, thresholds);
    (set, reason)
}

pub fn judge_one(
    action: &CandidateAction,
    state: &InteractionState,
    pack: &OverlayPack,
    registry: &FeatureRegistry,
    thresholds: &Thresholds,
) -> JudgedCandidate {
    let (features, _) = registry.extract_lenient(state, action);
    judge_features(action.clone(), features, state, pack, thresholds)
}

/// Judging from already-extracted features (used by replay).
pub fn judge_features(
    action: CandidateAction,
    features: FeatureMap,
    state: &InteractionState,
    pack: &OverlayPack,
    thresholds: &Thresholds,
) -> JudgedCandidate {
    let verdicts = pack.evaluate(&features, &state.trajectory_stats);
    let conflicts = conflicting_pairs(pack, &verdicts, thresholds.conflict_threshold);
    JudgedCandidate {
        admissible: verdicts.iter().all(|v| v.admissible),
        confidence: aggregate_confidence(&verdicts),
        action,
        features,
        verdicts,
        conflicts,
    }
}

/// A single observer: one overlay pack over one feature registry.
#[derive(Debug, Clone)]
pub struct Observer {
    pub id: String,
    pub registry: FeatureRegistry,
    pub pack: OverlayPack,
    pub thresholds: Thresholds,
}

impl Observer {
    pub fn new(registry: FeatureRegistry, pack: OverlayPack, thresholds: Thresholds) -> Self {
        Observer { id: pack.id.clone(), registry, pack, thresholds }
    }
}

impl Judge for Observer {
    fn registry(&self) -> &FeatureRegistry {
        &self.registry
    }

    fn judge(&self, candidates: &[CandidateAction], state: &InteractionState) -> Judgment {
        let (set, rejection) = judge(candidates, state, &self.pack, &self.registry, &self.thresholds);
        Judgment { set, rejection, members: Vec::new(), disagreement: false, escalation: None }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::{CmpOp, Predicate};
    use crate::features::{FeatureScope, FeatureValue};
    use crate::overlay::{Bound, Constraint, Overlay, RigidityPolicy};

    fn state_after(user: &str) -> InteractionState {
        InteractionState::new("s", "m").record_user_turn(user, &Default::default())
    }

    fn empathy_pack() -> OverlayPack {
        OverlayPack::new("p", vec![Overlay::at_least("empathy_ack", "frustration", 0.5, "empathy", 0.5, 0.05)])
    }

    const ANGRY: &str = "This is so frustrating, nothing works and I'm fed up.";

    #[test]
    fn worked_example_is_empty_set() {
        let s = state_after(ANGRY);
        let c = [CandidateAction::utterance("Okay, I see. Try restarting the router.", 0)];
        let (set, reason) = judge(&c, &s, &empathy_pack(), &FeatureRegistry::builtin(), &Thresholds::default());
        assert_eq!(reason, Some(RejectionReason::EmptyAdmissibleSet));
        assert!((set.candidates[0].verdicts[0].deviation - 0.29).abs() < 1e-9);
    }

    #[test]
    fn inactive_overlays_admit() {
        let s = state_after("What's the weather like?");
        let c = [CandidateAction::utterance("Sunny.", 0)];
        let (set, reason) = judge(&c, &s, &empathy_pack(), &FeatureRegistry::builtin(), &Thresholds::default());
        assert_eq!(reason, None);
        assert_eq!(set.admissible_indices, vec![0]);
    }

    fn verbosity(id: &str, bound: Bound, w: f64) -> Overlay {
        Overlay {
            id: id.into(),
            kind: OverlayKind::Prohibitory,
            activation: vec![],
            constraint: Constraint { feature: "verbosity".into(), bound: Some(bound) },
            rigidity: RigidityPolicy::fixed(0.35),
            transfer_target: None,
            permit_bonus: None,
            severity_weight: w,
            tags: vec![],
        }
    }

    #[test]
    fn incompatible_ranges_conflict() {
        let pack = OverlayPack::new(
            "p",
            vec![verbosity("long", Bound::AtLeast(0.8), 0.6), verbosity("short", Bound::AtMost(0.2), 0.6)],
        );
        let s = state_after("tell me");
        // 30 words -> verbosity 0.5, within 0.35 of both bounds
        let text = vec!["word"; 30].join(" ");
        let (set, reason) = judge(&[CandidateAction::utterance(text, 0)], &s, &pack, &FeatureRegistry::builtin(), &Thresholds::default());
        assert!(!set.is_empty());
        assert_eq!(reason, Some(RejectionReason::OverlayConflict));
        assert_eq!(set.candidates[0].conflicts, vec![("long".to_string(), "short".to_string())]);

        let light = OverlayPack::new(
            "p",
            vec![verbosity("long", Bound::AtLeast(0.8), 0.3), verbosity("short", Bound::AtMost(0.2), 0.6)],
        );
        let text = vec!["word"; 30].join(" ");
        let (_, reason) = judge(&[CandidateAction::utterance(text, 0)], &s, &light, &FeatureRegistry::builtin(), &Thresholds::default());
        assert_eq!(reason, None);
    }

    #[test]
    fn low_confidence_boundary() {
        let o = Overlay {
            id: "quiet_only".into(),
            kind: OverlayKind::Prohibitory,
            activation: vec![Predicate::label("social_presence", CmpOp::Ne, "conversation")],
            constraint: Constraint { feature: "verbosity".into(), bound: Some(Bound::AtMost(1.0)) },
            rigidity: RigidityPolicy::fixed(0.0),
            transfer_target: None,
            permit_bonus: None,
            severity_weight: 1.0,
            tags: vec![],
        };
        let pack = OverlayPack::new("p", vec![o]);
        let tags = ["presence_conf:0.3".to_string()].into_iter().collect();
        let s = InteractionState::new("s", "m").record_user_turn("hi", &tags);
        let (set, reason) = judge(&[CandidateAction::utterance("hello", 0)], &s, &pack, &FeatureRegistry::builtin(), &Thresholds::default());
        assert_eq!(set.admissible_indices, vec![0]);
        assert_eq!(set.candidates[0].confidence, 0.3);
        assert_eq!(reason, Some(RejectionReason::LowConfidence));
        let lax = Thresholds { conf_threshold: 0.3, ..Thresholds::default() };
        assert_eq!(classify(&set, &lax), None);
    }

    #[test]
    fn ranking_prefers_confidence_then_deviation_then_order() {
        let mk = |conf: f64, dev: f64| JudgedCandidate {
            action: CandidateAction::utterance("x", 0),
            features: FeatureMap::new(),
            verdicts: vec![OverlayVerdict {
                overlay_id: "o".into(),
                activated: true,
                deviation: dev,
                admissible: true,
                descriptor: String::new(),
                effective_epsilon: 1.0,
                confidence: conf,
                evaluable: true,
            }],
            confidence: conf,
            admissible: true,
            conflicts: vec![],
        };
        let set = AdmissibleSet::from_candidates(vec![mk(0.9, 0.0), mk(1.0, 0.2), mk(1.0, -0.1), mk(1.0, -0.1)]);
        assert_eq!(set.ranked(), vec![2, 3, 1, 0]);
    }

    #[test]
    fn missing_feature_verdict_is_zero_confidence() {
        let mut f = FeatureMap::new();
        f.insert("frustration".into(), FeatureValue::scalar("frustration", 0.9, FeatureScope::TurnLocal));
        let s = InteractionState::new("s", "m");
        let j = judge_features(CandidateAction::utterance("x", 0), f, &s, &empathy_pack(), &Thresholds::default());
        assert!(!j.admissible);
        assert_eq!(j.confidence, 0.0);
    }
}
