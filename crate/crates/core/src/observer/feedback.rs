use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdmissibleSet, RejectionReason, Thresholds};
use crate::overlay::OverlayVerdict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackStrength {
    /// A nudge carried into the next turn's prompt context.
    Implicit,
    /// Rejects the attempt and demands regeneration.
    Forced,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolatedOverlay {
    pub overlay_id: String,
    pub descriptor: String,
    pub deviation: f64,
}

/// Guidance appended to the base policy's next prompt context. Never shown
/// in the user-visible transcript.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackDirective {
    pub strength: FeedbackStrength,
    pub violated_overlays: Vec<ViolatedOverlay>,
    pub directive_text: String,
}

impl FeedbackDirective {
    fn render(strength: FeedbackStrength, reason: Option<RejectionReason>, items: Vec<ViolatedOverlay>) -> Self {
        let details: Vec<String> = items
            .iter()
            .map(|v| format!("{} ({})", v.descriptor, v.overlay_id))
            .collect();
        let directive_text = match strength {
            FeedbackStrength::Forced => format!(
                "Your previous reply was rejected ({}). Write a new reply that fixes: {}.",
                reason.map_or("rejected", RejectionReason::as_str),
                details.join("; ")
            ),
            FeedbackStrength::Implicit => {
                format!("Your last reply was close to a limit: {}. Keep clear of it.", details.join("; "))
            }
        };
        FeedbackDirective { strength, violated_overlays: items, directive_text }
    }

    /// Forced feedback for a rejected attempt. Lists the overlays behind the
    /// rejection: inadmissible verdicts for an empty set, the least confident
    /// verdicts for low confidence, the conflicting pair for a conflict.
    pub fn forced(reason: RejectionReason, set: &AdmissibleSet, thresholds: &Thresholds) -> Self {
        let mut items: Vec<ViolatedOverlay> = Vec::new();
        let mut push = |v: &OverlayVerdict, descriptor: String| {
            match items.iter_mut().find(|i| i.overlay_id == v.overlay_id) {
                Some(existing) if existing.deviation >= v.deviation => {}
                Some(existing) => {
                    existing.descriptor = descriptor;
                    existing.deviation = v.deviation;
                }
                None => items.push(ViolatedOverlay {
                    overlay_id: v.overlay_id.clone(),
                    descriptor,
                    deviation: v.deviation,
                }),
            }
        };
        match reason {
            RejectionReason::EmptyAdmissibleSet => {
                for v in set.candidates.iter().flat_map(|c| &c.verdicts).filter(|v| !v.admissible) {
                    push(v, v.descriptor.clone());
                }
            }
            RejectionReason::LowConfidence => {
                for &i in &set.admissible_indices {
                    for v in set.candidates[i].verdicts.iter().filter(|v| v.confidence < thresholds.conf_threshold) {
                        push(v, format!("uncertain judgment, confidence {:.2}", v.confidence));
                    }
                }
            }
            RejectionReason::OverlayConflict => {
                let mut seen: BTreeMap<String, String> = BTreeMap::new();
                for c in &set.candidates {
                    for (a, b) in &c.conflicts {
                        seen.entry(a.clone()).or_insert_with(|| b.clone());
                        seen.entry(b.clone()).or_insert_with(|| a.clone());
                    }
                }
                for (id, other) in seen {
                    items.push(ViolatedOverlay {
                        overlay_id: id,
                        descriptor: format!("incompatible with {other}"),
                        deviation: 0.0,
                    });
                }
            }
            RejectionReason::LookaheadFailure => {}
        }
        Self::render(FeedbackStrength::Forced, Some(reason), items)
    }

    /// Forced feedback after every admissible candidate failed lookahead.
    pub fn lookahead(worst_unsafe_fraction: f64) -> Self {
        let item = ViolatedOverlay {
            overlay_id: "lookahead".into(),
            descriptor: format!("continuation reaches an empty admissible set; unsafe={worst_unsafe_fraction:.3}"),
            deviation: worst_unsafe_fraction,
        };
        Self::render(FeedbackStrength::Forced, Some(RejectionReason::LookaheadFailure), vec![item])
    }

    /// Implicit feedback for near-boundary passes: activated, evaluable
    /// verdicts with `0 < ε_eff − δ ≤ margin`. `None` when there are none.
    pub fn near_miss(verdicts: &[OverlayVerdict], margin: f64) -> Option<Self> {
        let items: Vec<ViolatedOverlay> = verdicts
            .iter()
            .filter(|v| v.activated && v.evaluable && v.slack() > 0.0 && v.slack() <= margin)
            .map(|v| ViolatedOverlay {
                overlay_id: v.overlay_id.clone(),
                descriptor: v.descriptor.clone(),
                deviation: v.deviation,
            })
            .collect();
        (!items.is_empty()).then(|| Self::render(FeedbackStrength::Implicit, None, items))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn verdict(dev: f64, eps: f64) -> OverlayVerdict {
        OverlayVerdict {
            overlay_id: "empathy_ack".into(),
            activated: true,
            deviation: dev,
            admissible: dev <= eps,
            descriptor: format!("empathy insufficient; δ={dev:.3}"),
            effective_epsilon: eps,
            confidence: 1.0,
            evaluable: true,
        }
    }

    #[test]
    fn near_miss_window() {
        assert!(FeedbackDirective::near_miss(&[verdict(0.03, 0.05)], 0.05).is_some());
        assert!(FeedbackDirective::near_miss(&[verdict(-0.5, 0.05)], 0.05).is_none());
        assert!(FeedbackDirective::near_miss(&[verdict(0.05, 0.05)], 0.05).is_none());
        let mut inactive = verdict(0.0, 0.05);
        inactive.activated = false;
        assert!(FeedbackDirective::near_miss(&[inactive], 0.05).is_none());
    }

    #[test]
    fn forced_names_violations() {
        use crate::observer::JudgedCandidate;
        use crate::state::CandidateAction;
        let c = JudgedCandidate {
            action: CandidateAction::utterance("x", 0),
            features: Default::default(),
            verdicts: vec![verdict(0.29, 0.05)],
            confidence: 1.0,
            admissible: false,
            conflicts: vec![],
        };
        let set = AdmissibleSet::from_candidates(vec![c]);
        let fb = FeedbackDirective::forced(RejectionReason::EmptyAdmissibleSet, &set, &Thresholds::default());
        assert_eq!(fb.strength, FeedbackStrength::Forced);
        assert_eq!(fb.violated_overlays.len(), 1);
        assert!(fb.directive_text.contains("empathy insufficient; δ=0.290 (empathy_ack)"));
    }
}
