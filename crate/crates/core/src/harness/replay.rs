//! Independent re-verification of a trajectory log.
//!
//! Checks the digest chain, rebuilds every state from the logged inputs,
//! re-derives gating, mode switches and every verdict from the logged
//! features, and checks enforcement soundness, layered soundness, bounded
//! work and the footer metrics.

use std::collections::BTreeMap;

use serde::Serialize;

use super::engine::EngineConfig;
use super::log::{chain_lines, Header, LogLine, TrajectoryLog, TurnRecord};
use super::metrics::{metrics, Metrics};
use super::HarnessError;
use crate::digest::Digest64;
use crate::ensemble::{apply_overlay_update, arbitrate};
use crate::features::{FeatureMap, FeatureRegistry};
use crate::observer::{judge_one, Disposition};
use crate::overlay::{OverlayPack, OverlayVerdict};
use crate::state::{apply_transition, ActionKind, CandidateAction, InteractionState};
use crate::supervisor::{gate_features, select_mode, state_features, Gate, ModeSelection};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayReport {
    pub scenario_id: String,
    pub turns: u64,
    pub final_digest: Digest64,
    pub metrics: Metrics,
}

pub fn replay(log: &TrajectoryLog) -> Result<ReplayReport, HarnessError> {
    replay_text(&log.to_jsonl())
}

pub fn replay_text(text: &str) -> Result<ReplayReport, HarnessError> {
    let lines = chain_lines(text)?;
    let (Some(LogLine::Header(header)), Some(LogLine::Footer(footer))) = (lines.first(), lines.last()) else {
        return Err(HarnessError::invariant(None, "log must start with a header and end with a footer"));
    };
    let records: Vec<&TurnRecord> = lines[1..lines.len() - 1]
        .iter()
        .map(|l| match l {
            LogLine::Turn(t) => Ok(t.as_ref()),
            other => Err(HarnessError::invariant(Some(other.label()), "unexpected record inside the log body")),
        })
        .collect::<Result<_, _>>()?;

    let registry = FeatureRegistry::builtin();
    header
        .config
        .validate(&registry)
        .map_err(|e| HarnessError::invariant(Some("header".into()), format!("logged config invalid: {e}")))?;

    let mut checker = Checker::new(header, &registry);
    for (i, r) in records.iter().enumerate() {
        if r.turn != i as u64 {
            return Err(HarnessError::invariant(Some(format!("turn {}", r.turn)), format!("expected turn {i}")));
        }
        checker
            .turn(r)
            .map_err(|m| HarnessError::invariant(Some(format!("turn {}", r.turn)), m))?;
    }

    let owned: Vec<TurnRecord> = records.iter().map(|r| (*r).clone()).collect();
    let recomputed = metrics(&owned);
    if footer.turns != owned.len() as u64 || recomputed != footer.metrics {
        return Err(HarnessError::invariant(Some("footer".into()), "metrics do not match the records"));
    }
    Ok(ReplayReport {
        scenario_id: header.scenario_id.clone(),
        turns: footer.turns,
        final_digest: checker.state.digest(),
        metrics: recomputed,
    })
}

struct Checker<'a> {
    config: &'a EngineConfig,
    registry: &'a FeatureRegistry,
    packs: BTreeMap<String, OverlayPack>,
    state: InteractionState,
}

impl<'a> Checker<'a> {
    fn new(header: &'a Header, registry: &'a FeatureRegistry) -> Self {
        Checker {
            config: &header.config,
            registry,
            packs: header.config.pack_map(),
            state: InteractionState::new(header.session_id.clone(), header.config.supervisor.initial_mode.clone()),
        }
    }

    fn turn(&mut self, r: &TurnRecord) -> Result<(), String> {
        let cfg = self.config;
        let limits = &cfg.limits;
        let thresholds = limits.thresholds();
        let mut state = self.state.record_user_turn(&r.user.text, &r.user.tags);
        for u in &r.overlay_updates {
            let pack = self.packs.get(&u.pack).ok_or_else(|| format!("update targets unknown pack `{}`", u.pack))?;
            let next = apply_overlay_update(pack, &u.update, self.registry).map_err(|e| e.to_string())?;
            self.packs.insert(u.pack.clone(), next);
        }
        if r.mode_before != state.active_mode {
            return Err(format!("mode_before `{}` but state is in `{}`", r.mode_before, state.active_mode));
        }

        let features = state_features(&state, self.registry);
        let gate = gate_features(&features, &state, &cfg.supervisor);
        if gate != r.gate {
            return Err(format!("gate recomputes to {gate:?}, logged {:?}", r.gate));
        }
        if r.policy_calls > limits.regen_bound + 1 || r.attempts.len() as u32 > limits.regen_bound + 1 {
            return Err(format!("{} policy calls exceed regen_bound + 1", r.policy_calls));
        }

        if matches!(gate, Gate::Skip(_)) {
            if r.policy_calls != 0 || !r.attempts.is_empty() {
                return Err("gated turn made base-policy calls".into());
            }
            if r.executed != CandidateAction::supervisor_silence(0) {
                return Err("gated turn executed something other than silence".into());
            }
        } else {
            let selection = select_mode(&state, &cfg.supervisor, &features);
            match (&selection, &r.mode_switch) {
                (ModeSelection::Switch(to), Some(sw)) if *to == sw.to => {
                    let action = CandidateAction::mode_switch(to.clone());
                    let (admitted, verdicts) = match &cfg.supervisor.switch_overlays {
                        None => (true, Vec::new()),
                        Some(pid) => {
                            let pack = self.packs.get(pid).ok_or("switch pack missing")?;
                            let j = judge_one(&action, &state, pack, self.registry, &thresholds);
                            (j.admissible && j.confidence >= thresholds.conf_threshold, j.verdicts)
                        }
                    };
                    if admitted != sw.admitted || verdicts != sw.verdicts {
                        return Err("mode switch judgment does not recompute".into());
                    }
                    if admitted {
                        state = apply_transition(&state, &action, &r.user.tags);
                    }
                }
                (ModeSelection::Switch(_), _) | (_, Some(_)) => {
                    return Err(format!("mode selection recomputes to {selection:?}"));
                }
                _ => {}
            }
            self.check_layers(r, &state)?;
            self.check_attempts(r, &state)?;
        }

        let next = apply_transition(&state, &r.executed, &r.user.tags).with_feature_cache(r.features.clone());
        if next.digest() != r.state_digest {
            return Err(format!("state digest {} does not match logged {}", next.digest(), r.state_digest));
        }
        self.state = next;
        Ok(())
    }

    /// The utterance was judged under exactly the active mode's pack.
    fn check_layers(&self, r: &TurnRecord, state: &InteractionState) -> Result<(), String> {
        let mode = self
            .config
            .supervisor
            .mode(&state.active_mode)
            .ok_or_else(|| format!("active mode `{}` unknown", state.active_mode))?;
        if r.mode != mode.id || r.pack != mode.overlay_pack {
            return Err(format!("judged as {}/{}, active mode is {}/{}", r.mode, r.pack, mode.id, mode.overlay_pack));
        }
        if r.judge_packs != self.config.judge_packs(&mode.overlay_pack) {
            return Err(format!("judged under packs {:?}", r.judge_packs));
        }
        for a in &r.attempts {
            for c in &a.candidates {
                let expected: Vec<&str> = r
                    .judge_packs
                    .iter()
                    .flat_map(|p| self.packs[p].overlays.iter().map(|o| o.id.as_str()))
                    .collect();
                let got: Vec<&str> = c.verdicts.iter().map(|v| v.overlay_id.as_str()).collect();
                if got != expected {
                    return Err(format!("verdict ids {got:?} are not the pack's {expected:?}"));
                }
            }
        }
        Ok(())
    }

    fn member_verdicts(&self, pack: &str, features: &FeatureMap, state: &InteractionState) -> Vec<OverlayVerdict> {
        self.packs[pack].evaluate(features, &state.trajectory_stats)
    }

    fn check_attempts(&self, r: &TurnRecord, state: &InteractionState) -> Result<(), String> {
        for a in &r.attempts {
            let st = state.with_regeneration_count(a.attempt);
            let mut member_sets: Vec<Vec<usize>> = vec![Vec::new(); r.judge_packs.len()];
            let mut plain = Vec::new();
            for (i, c) in a.candidates.iter().enumerate() {
                let mut all = Vec::new();
                for (m, p) in r.judge_packs.iter().enumerate() {
                    let v = self.member_verdicts(p, &c.features, &st);
                    if v.iter().all(|v| v.admissible) {
                        member_sets[m].push(i);
                    }
                    all.extend(v);
                }
                if all != c.verdicts {
                    return Err(format!("attempt {} candidate {i}: verdicts do not recompute", a.attempt));
                }
                if all.iter().all(|v| v.admissible) {
                    plain.push(i);
                }
            }
            let admissible = match &self.config.ensemble {
                Some(e) => arbitrate(&member_sets, &e.rule.kind).0,
                None => plain,
            };
            if admissible != a.admissible_indices {
                return Err(format!("attempt {}: admissible set recomputes to {admissible:?}", a.attempt));
            }
        }
        if let Disposition::Execute { attempt, index } = r.decision.disposition {
            let a = r
                .attempts
                .iter()
                .find(|a| a.attempt == attempt)
                .ok_or_else(|| format!("executed attempt {attempt} not logged"))?;
            if !a.admissible_indices.contains(&index) || a.rejection.is_some() {
                return Err(format!("executed candidate {index} of attempt {attempt} is not admissible"));
            }
            if a.candidates[index].action != r.executed {
                return Err("executed action differs from the chosen candidate".into());
            }
        } else if matches!(r.executed.kind, ActionKind::Utterance) {
            return Err("a base-policy utterance was executed without an Execute decision".into());
        }
        Ok(())
    }
}
