use serde::{Deserialize, Serialize};

use super::{
    FallbackLibrary, FeedbackDirective, Judge, JudgedCandidate, Limits, MemberJudgment, RejectionReason,
};
use crate::adapters::{BasePolicy, PolicyError};
use crate::ensemble::DisagreementAction;
use crate::features::FeatureMap;
use crate::lookahead::{Lookahead, LookaheadReport};
use crate::state::{ActionSource, CandidateAction, InteractionState};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Disposition {
    Execute { attempt: u32, index: usize },
    Regenerate,
    Fallback { id: String },
    /// Explicit silence; no utterance this turn.
    Defer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverDecision {
    pub disposition: Disposition,
    pub rejection_reason: Option<RejectionReason>,
    /// Implicit feedback carried into the next turn.
    pub feedback: Option<FeedbackDirective>,
    /// Index of the final attempt (regenerations used).
    pub attempts_used: u32,
}

/// Everything observed during one sampling attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub feedback_in: Option<FeedbackDirective>,
    pub candidates: Vec<JudgedCandidate>,
    pub admissible_indices: Vec<usize>,
    pub rejection: Option<RejectionReason>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lookahead: Vec<LookaheadReport>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub members: Vec<MemberJudgment>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub disagreement: bool,
    /// Feedback issued to the next attempt.
    pub forced_feedback: Option<FeedbackDirective>,
    /// Set when the base policy failed on this attempt.
    pub unavailable: Option<String>,
}

impl AttemptRecord {
    fn new(attempt: u32, feedback_in: Option<&FeedbackDirective>) -> Self {
        AttemptRecord {
            attempt,
            feedback_in: feedback_in.cloned(),
            candidates: Vec::new(),
            admissible_indices: Vec::new(),
            rejection: None,
            lookahead: Vec::new(),
            members: Vec::new(),
            disagreement: false,
            forced_feedback: None,
            unavailable: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecideOutcome {
    pub decision: ObserverDecision,
    pub executed: CandidateAction,
    /// Features of the executed candidate, or of the state for fallbacks.
    pub features: FeatureMap,
    pub attempts: Vec<AttemptRecord>,
    pub policy_calls: u32,
}

/// The bounded regeneration loop with its collaborators.
pub struct Decider<'a> {
    pub judge: &'a dyn Judge,
    pub policy: &'a dyn BasePolicy,
    pub profile: &'a str,
    pub fallbacks: &'a FallbackLibrary,
    pub limits: &'a Limits,
    pub lookahead: Option<&'a Lookahead<'a>>,
}

impl Decider<'_> {
    /// Samples, judges and either executes, regenerates with forced
    /// feedback, or falls back once `regen_bound` regenerations are spent.
    pub fn decide(&self, state: &InteractionState, pending: Option<&FeedbackDirective>) -> DecideOutcome {
        let n = self.limits.candidates_per_call.max(1);
        let thresholds = self.limits.thresholds();
        let mut attempts: Vec<AttemptRecord> = Vec::new();
        let mut forced: Option<FeedbackDirective> = None;
        let mut last_rejection = None;

        for k in 0..=self.limits.regen_bound {
            let st = state.with_regeneration_count(k);
            let feedback = if k == 0 { pending } else { forced.as_ref() };
            let mut record = AttemptRecord::new(k, feedback);
            let policy_calls = k + 1;

            let candidates = match self.policy.sample(&st, self.profile, feedback, n) {
                Ok(c) if c.len() == n => c,
                Ok(c) => {
                    record.unavailable = Some(format!("expected {n} candidates, got {}", c.len()));
                    attempts.push(record);
                    return self.fallback(&st, self.fallbacks.always_entry().id.clone(), None, attempts, policy_calls);
                }
                Err(PolicyError::Unavailable(reason)) => {
                    log::warn!("base policy unavailable: {reason}");
                    record.unavailable = Some(reason.to_string());
                    attempts.push(record);
                    return self.fallback(&st, self.fallbacks.always_entry().id.clone(), None, attempts, policy_calls);
                }
            };
            let candidates: Vec<CandidateAction> = candidates
                .into_iter()
                .map(|mut c| {
                    c.generation_attempt = k;
                    c.source = ActionSource::BasePolicy;
                    c
                })
                .collect();

            let judgment = self.judge.judge(&candidates, &st);
            record.admissible_indices = judgment.set.admissible_indices.clone();
            record.members = judgment.members.clone();
            record.disagreement = judgment.disagreement;
            record.rejection = judgment.rejection;

            if let Some(action) = &judgment.escalation {
                record.candidates = judgment.set.candidates;
                attempts.push(record);
                return match action {
                    DisagreementAction::Defer => self.defer(&st, attempts, policy_calls),
                    DisagreementAction::FallbackRef(id) | DisagreementAction::AskClarify(id) => {
                        self.fallback(&st, id.clone(), None, attempts, policy_calls)
                    }
                };
            }

            let mut rejection = judgment.rejection;
            let mut chosen = None;
            if rejection.is_none() {
                let ranked = judgment.set.ranked();
                match self.lookahead {
                    None => chosen = ranked.first().copied(),
                    Some(la) => {
                        for i in ranked {
                            let report = la.check(i, &candidates[i], &st, self.judge);
                            let pass = report.pass;
                            record.lookahead.push(report);
                            if pass {
                                chosen = Some(i);
                                break;
                            }
                        }
                        if chosen.is_none() {
                            rejection = Some(RejectionReason::LookaheadFailure);
                            record.rejection = rejection;
                        }
                    }
                }
            }
            record.candidates = judgment.set.candidates;

            if let Some(index) = chosen {
                let picked = &record.candidates[index];
                let executed = picked.action.clone();
                let features = picked.features.clone();
                let implicit = FeedbackDirective::near_miss(&picked.verdicts, self.limits.implicit_margin);
                attempts.push(record);
                return DecideOutcome {
                    decision: ObserverDecision {
                        disposition: Disposition::Execute { attempt: k, index },
                        rejection_reason: None,
                        feedback: implicit,
                        attempts_used: k,
                    },
                    executed,
                    features,
                    attempts,
                    policy_calls,
                };
            }

            let reason = rejection.expect("no candidate chosen implies a rejection");
            last_rejection = Some(reason);
            if k < self.limits.regen_bound {
                let fb = if reason == RejectionReason::LookaheadFailure {
                    let worst = record.lookahead.iter().map(|r| r.unsafe_fraction).fold(0.0, f64::max);
                    FeedbackDirective::lookahead(worst)
                } else {
                    let set = super::AdmissibleSet {
                        candidates: record.candidates.clone(),
                        admissible_indices: record.admissible_indices.clone(),
                    };
                    FeedbackDirective::forced(reason, &set, &thresholds)
                };
                record.forced_feedback = Some(fb.clone());
                forced = Some(fb);
            }
            attempts.push(record);
        }

        let st = state.with_regeneration_count(self.limits.regen_bound);
        let (features, _) = self
            .judge
            .registry()
            .extract_lenient(&st, &CandidateAction::supervisor_silence(self.limits.regen_bound));
        let id = self.fallbacks.select(&features, &st.trajectory_stats).id.clone();
        self.fallback(&st, id, last_rejection, attempts, self.limits.regen_bound + 1)
    }

    fn fallback(
        &self,
        st: &InteractionState,
        id: String,
        rejection: Option<RejectionReason>,
        attempts: Vec<AttemptRecord>,
        policy_calls: u32,
    ) -> DecideOutcome {
        let attempt = attempts.last().map_or(0, |a| a.attempt);
        let entry = self
            .fallbacks
            .get(&id)
            .unwrap_or_else(|| self.fallbacks.always_entry());
        let executed = entry.to_action(attempt);
        let (features, _) = self.judge.registry().extract_lenient(st, &executed);
        DecideOutcome {
            decision: ObserverDecision {
                disposition: Disposition::Fallback { id: entry.id.clone() },
                rejection_reason: rejection,
                feedback: None,
                attempts_used: attempt,
            },
            executed,
            features,
            attempts,
            policy_calls,
        }
    }

    fn defer(&self, st: &InteractionState, attempts: Vec<AttemptRecord>, policy_calls: u32) -> DecideOutcome {
        let attempt = attempts.last().map_or(0, |a| a.attempt);
        let executed = CandidateAction::supervisor_silence(attempt);
        let (features, _) = self.judge.registry().extract_lenient(st, &executed);
        DecideOutcome {
            decision: ObserverDecision {
                disposition: Disposition::Defer,
                rejection_reason: None,
                feedback: None,
                attempts_used: attempt,
            },
            executed,
            features,
            attempts,
            policy_calls,
        }
    }
}

/// Free-function form of [`Decider::decide`].
pub fn decide(
    state: &InteractionState,
    judge: &dyn Judge,
    policy: &dyn BasePolicy,
    profile: &str,
    fallbacks: &FallbackLibrary,
    limits: &Limits,
    lookahead: Option<&Lookahead<'_>>,
    pending: Option<&FeedbackDirective>,
) -> DecideOutcome {
    Decider { judge, policy, profile, fallbacks, limits, lookahead }.decide(state, pending)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{ScriptedPolicy, UnavailableReason};
    use crate::condition::Condition;
    use crate::features::FeatureRegistry;
    use crate::observer::{FallbackEntry, FeedbackStrength, Observer, Thresholds};
    use crate::overlay::{Overlay, OverlayPack};

    const ANGRY: &str = "This is so frustrating, nothing works and I'm fed up.";
    const COLD: &str = "Okay, I see. Try restarting the router.";
    const WARM: &str = "I see, that sounds frustrating. Let's try restarting the router.";

    fn observer(eps: f64) -> Observer {
        Observer::new(
            FeatureRegistry::builtin(),
            OverlayPack::new("p", vec![Overlay::at_least("empathy_ack", "frustration", 0.5, "empathy", 0.5, eps)]),
            Thresholds::default(),
        )
    }

    fn library() -> FallbackLibrary {
        FallbackLibrary::new(vec![FallbackEntry {
            id: "neutral".into(),
            condition: Condition::Always,
            action: "I hear you. Let's take this one step at a time.".into(),
            resets_trajectory: false,
        }])
        .unwrap()
    }

    fn state() -> InteractionState {
        InteractionState::new("s", "m").record_user_turn(ANGRY, &Default::default())
    }

    fn limits(regen_bound: u32) -> Limits {
        Limits { regen_bound, ..Limits::default() }
    }

    #[test]
    fn regenerates_then_executes() {
        let policy = ScriptedPolicy::new("default text")
            .with(0, 0, vec![COLD.to_string()])
            .with(0, 1, vec![WARM.to_string()]);
        let out = decide(&state(), &observer(0.05), &policy, "p", &library(), &limits(2), None, None);
        assert_eq!(out.decision.disposition, Disposition::Execute { attempt: 1, index: 0 });
        assert_eq!(out.decision.attempts_used, 1);
        assert_eq!(out.policy_calls, 2);
        assert_eq!(policy.calls(), 2);
        assert_eq!(out.executed.content, WARM);
        let forced: Vec<_> = out.attempts.iter().filter_map(|a| a.forced_feedback.as_ref()).collect();
        assert_eq!(forced.len(), 1);
        assert_eq!(forced[0].strength, FeedbackStrength::Forced);
        assert_eq!(out.attempts[1].feedback_in.as_ref(), Some(forced[0]));
        // δ=0.03 within 0.05 of the boundary: implicit feedback for next turn
        assert_eq!(out.decision.feedback.as_ref().map(|f| f.strength), Some(FeedbackStrength::Implicit));
    }

    #[test]
    fn zero_buffer_falls_back_immediately() {
        let policy = ScriptedPolicy::new(COLD);
        let out = decide(&state(), &observer(0.05), &policy, "p", &library(), &limits(0), None, None);
        assert_eq!(out.decision.disposition, Disposition::Fallback { id: "neutral".into() });
        assert_eq!(out.decision.rejection_reason, Some(RejectionReason::EmptyAdmissibleSet));
        assert_eq!(policy.calls(), 1);
        assert!(out.attempts[0].forced_feedback.is_none());
    }

    #[test]
    fn never_satisfied_makes_bound_plus_one_calls() {
        let policy = ScriptedPolicy::new(COLD);
        let out = decide(&state(), &observer(0.05), &policy, "p", &library(), &limits(3), None, None);
        assert_eq!(policy.calls(), 4);
        assert_eq!(out.policy_calls, 4);
        assert_eq!(out.decision.attempts_used, 3);
        assert!(matches!(out.decision.disposition, Disposition::Fallback { .. }));
        assert_eq!(out.executed.content, "I hear you. Let's take this one step at a time.");
    }

    #[test]
    fn unavailable_policy_uses_always_entry() {
        let policy = ScriptedPolicy::new(COLD).failing(UnavailableReason::Timeout);
        let out = decide(&state(), &observer(0.05), &policy, "p", &library(), &limits(3), None, None);
        assert_eq!(out.policy_calls, 1);
        assert_eq!(out.decision.disposition, Disposition::Fallback { id: "neutral".into() });
        assert_eq!(out.decision.rejection_reason, None);
        assert!(out.attempts[0].unavailable.is_some());
    }
}
