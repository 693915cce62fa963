//! Finite-horizon rollout checks.
//!
//! A candidate is simulated forward `H` turns, `K` times. A rollout is
//! unsafe when some simulated agent step faces an empty admissible set.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::adapters::PolicyError;
use crate::observer::Judge;
use crate::state::{apply_transition, CandidateAction, InteractionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookaheadConfig {
    pub horizon: u32,
    pub rollouts_per_candidate: u32,
    pub unsafe_fraction_threshold: f64,
    #[serde(default = "default_rollout_policy")]
    pub rollout_policy: String,
}

fn default_rollout_policy() -> String {
    "scripted".into()
}

impl LookaheadConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.horizon == 0 {
            return Err("horizon must be >= 1".into());
        }
        if self.rollouts_per_candidate == 0 {
            return Err("rollouts_per_candidate must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.unsafe_fraction_threshold) {
            return Err("unsafe_fraction_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulatedUser {
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
}

/// Simulates user follow-ups and agent replies during rollouts.
pub trait RolloutPolicy: Send + Sync {
    fn user_turn(&self, state: &InteractionState, rollout: u32, depth: u32) -> Result<SimulatedUser, PolicyError>;
    fn agent_candidates(
        &self,
        state: &InteractionState,
        rollout: u32,
        depth: u32,
    ) -> Result<Vec<CandidateAction>, PolicyError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RolloutBranch {
    /// Case-insensitive substring of the last agent turn.
    pub after: String,
    pub users: Vec<SimulatedUser>,
    pub replies: Vec<String>,
}

/// Rollout tree keyed on what the agent last said. Rollout `k` takes
/// `users[k % len]`; every reply in the branch becomes a candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRollout {
    #[serde(default)]
    pub branches: Vec<RolloutBranch>,
    pub default_user: SimulatedUser,
    pub default_replies: Vec<String>,
}

impl ScriptedRollout {
    /// Every rollout sees `user` and may answer with `replies`.
    pub fn echo(user: &str, replies: &[&str]) -> Self {
        ScriptedRollout {
            branches: Vec::new(),
            default_user: SimulatedUser { text: user.into(), tags: BTreeSet::new() },
            default_replies: replies.iter().map(|r| r.to_string()).collect(),
        }
    }

    fn branch(&self, state: &InteractionState) -> Option<&RolloutBranch> {
        let last = state.agent_turns().next_back()?.text.to_lowercase();
        self.branches.iter().find(|b| last.contains(&b.after.to_lowercase()))
    }
}

impl RolloutPolicy for ScriptedRollout {
    fn user_turn(&self, state: &InteractionState, rollout: u32, _depth: u32) -> Result<SimulatedUser, PolicyError> {
        Ok(match self.branch(state) {
            Some(b) if !b.users.is_empty() => b.users[rollout as usize % b.users.len()].clone(),
            _ => self.default_user.clone(),
        })
    }

    fn agent_candidates(
        &self,
        state: &InteractionState,
        _rollout: u32,
        _depth: u32,
    ) -> Result<Vec<CandidateAction>, PolicyError> {
        let replies = self.branch(state).map_or(&self.default_replies, |b| &b.replies);
        Ok(replies.iter().map(|r| CandidateAction::utterance(r.clone(), 0)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LookaheadReport {
    pub candidate_index: usize,
    pub pass: bool,
    pub unsafe_fraction: f64,
    pub unsafe_count: u32,
    pub rollouts: u32,
    /// The rollout policy was unavailable; the check passed by default.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub degraded: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness: Option<Vec<String>>,
}

pub struct Lookahead<'a> {
    pub config: LookaheadConfig,
    pub policy: &'a dyn RolloutPolicy,
}

enum Rollout {
    Safe,
    Unsafe(Vec<String>),
}

impl Lookahead<'_> {
    /// Never mutates `state`; the judge sees only simulated copies.
    pub fn check(
        &self,
        index: usize,
        candidate: &CandidateAction,
        state: &InteractionState,
        judge: &dyn Judge,
    ) -> LookaheadReport {
        let k = self.config.rollouts_per_candidate;
        let mut unsafe_count = 0;
        let mut witness = None;
        for r in 0..k {
            match self.rollout(r, candidate, state, judge) {
                Ok(Rollout::Safe) => {}
                Ok(Rollout::Unsafe(trace)) => {
                    unsafe_count += 1;
                    witness.get_or_insert(trace);
                }
                Err(e) => {
                    log::warn!("lookahead degraded: {e}");
                    return LookaheadReport {
                        candidate_index: index,
                        pass: true,
                        unsafe_fraction: 0.0,
                        unsafe_count: 0,
                        rollouts: r,
                        degraded: true,
                        witness: None,
                    };
                }
            }
        }
        let unsafe_fraction = f64::from(unsafe_count) / f64::from(k);
        let pass = unsafe_count == 0 || unsafe_fraction < self.config.unsafe_fraction_threshold;
        LookaheadReport {
            candidate_index: index,
            pass,
            unsafe_fraction,
            unsafe_count,
            rollouts: k,
            degraded: false,
            witness: if pass { None } else { witness },
        }
    }

    fn rollout(
        &self,
        r: u32,
        candidate: &CandidateAction,
        state: &InteractionState,
        judge: &dyn Judge,
    ) -> Result<Rollout, PolicyError> {
        let mut trace = vec![format!("agent: {}", candidate.content)];
        let mut s = apply_transition(state, candidate, &BTreeSet::new());
        for depth in 0..self.config.horizon {
            let user = self.policy.user_turn(&s, r, depth)?;
            trace.push(format!("user: {}", user.text));
            s = s.record_user_turn(&user.text, &user.tags);
            let candidates = self.policy.agent_candidates(&s, r, depth)?;
            let judgment = judge.judge(&candidates, &s);
            let Some(best) = judgment.set.best() else {
                trace.push(format!("no admissible reply among {} candidates", candidates.len()));
                return Ok(Rollout::Unsafe(trace));
            };
            let reply = &judgment.set.candidates[best].action;
            trace.push(format!("agent: {}", reply.content));
            s = apply_transition(&s, reply, &user.tags);
        }
        Ok(Rollout::Safe)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::UnavailableReason;
    use crate::features::FeatureRegistry;
    use crate::observer::{Observer, Thresholds};
    use crate::overlay::{Overlay, OverlayPack};

    fn observer() -> Observer {
        Observer::new(
            FeatureRegistry::builtin(),
            OverlayPack::new("p", vec![Overlay::at_least("empathy_ack", "frustration", 0.5, "empathy", 0.5, 0.05)]),
            Thresholds::default(),
        )
    }

    fn config(h: u32, k: u32, threshold: f64) -> LookaheadConfig {
        LookaheadConfig { horizon: h, rollouts_per_candidate: k, unsafe_fraction_threshold: threshold, rollout_policy: "scripted".into() }
    }

    fn start() -> InteractionState {
        InteractionState::new("s", "m").record_user_turn("Can you help me plan a trip?", &BTreeSet::new())
    }

    #[test]
    fn benign_rollout_passes() {
        let policy = ScriptedRollout::echo("Okay.", &["Sure."]);
        let la = Lookahead { config: config(1, 1, 0.5), policy: &policy };
        let r = la.check(0, &CandidateAction::utterance("Happy to.", 0), &start(), &observer());
        assert!(r.pass);
        assert_eq!(r.unsafe_fraction, 0.0);
    }

    #[test]
    fn zero_threshold_fails_on_any_unsafe() {
        let mut policy = ScriptedRollout::echo("Okay.", &["Sure."]);
        policy.branches.push(RolloutBranch {
            after: "happy".into(),
            users: vec![
                SimulatedUser { text: "Fine.".into(), tags: BTreeSet::new() },
                SimulatedUser { text: "This is so frustrating, nothing works and I'm fed up.".into(), tags: BTreeSet::new() },
            ],
            replies: vec!["Okay.".into()],
        });
        let la = Lookahead { config: config(1, 2, 0.0), policy: &policy };
        let r = la.check(0, &CandidateAction::utterance("Happy to.", 0), &start(), &observer());
        assert_eq!(r.unsafe_count, 1);
        assert_eq!(r.unsafe_fraction, 0.5);
        assert!(!r.pass);
        assert!(r.witness.is_some());
        let lax = Lookahead { config: config(1, 2, 0.6), policy: &policy };
        assert!(lax.check(0, &CandidateAction::utterance("Happy to.", 0), &start(), &observer()).pass);
    }

    struct Down;

    impl RolloutPolicy for Down {
        fn user_turn(&self, _: &InteractionState, _: u32, _: u32) -> Result<SimulatedUser, PolicyError> {
            Err(PolicyError::Unavailable(UnavailableReason::Timeout))
        }
        fn agent_candidates(&self, _: &InteractionState, _: u32, _: u32) -> Result<Vec<CandidateAction>, PolicyError> {
            Err(PolicyError::Unavailable(UnavailableReason::Timeout))
        }
    }

    #[test]
    fn unavailable_rollout_is_degraded_pass() {
        let la = Lookahead { config: config(2, 3, 0.0), policy: &Down };
        let r = la.check(0, &CandidateAction::utterance("Hi.", 0), &start(), &observer());
        assert!(r.pass && r.degraded);
    }
}
