//! The per-session turn engine: gate, select mode, decide, transition, log.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::log::{Footer, Header, LogLine, ModeSwitchRecord, TrajectoryLog, TurnRecord, UserRecord, GENESIS, LOG_VERSION};
use super::metrics::metrics;
use super::scenario::UserTurnSpec;
use super::HarnessError;
use crate::adapters::BasePolicy;
use crate::digest::Digest64;
use crate::ensemble::{
    apply_overlay_update, persist_overlay_update, ArbitrationRule, DisagreementAction, Ensemble, PackUpdate,
    UpdateScope,
};
use crate::features::FeatureRegistry;
use crate::lookahead::{Lookahead, LookaheadConfig, ScriptedRollout};
use crate::observer::{
    decide, judge_one, Disposition, FallbackLibrary, FeedbackDirective, Judge, Limits, ObserverDecision, Observer,
    Thresholds,
};
use crate::overlay::OverlayPack;
use crate::state::{apply_transition, CandidateAction, InteractionState};
use crate::supervisor::{gate_features, select_mode, state_features, Gate, ModeSelection, SupervisorConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LookaheadSpec {
    pub config: LookaheadConfig,
    pub rollout: ScriptedRollout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MemberSpec {
    pub overlay_pack: String,
    #[serde(default)]
    pub conf_threshold: Option<f64>,
    #[serde(default)]
    pub conflict_threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSpec {
    pub observers: Vec<MemberSpec>,
    pub rule: ArbitrationRule,
}

impl EnsembleSpec {
    pub fn pack_ids(&self) -> Vec<String> {
        self.observers.iter().map(|o| o.overlay_pack.clone()).collect()
    }

    pub fn build(
        &self,
        packs: &BTreeMap<String, OverlayPack>,
        registry: &FeatureRegistry,
        limits: &Limits,
    ) -> Result<Ensemble, HarnessError> {
        let defaults = limits.thresholds();
        let members = self
            .observers
            .iter()
            .map(|m| {
                let pack = packs
                    .get(&m.overlay_pack)
                    .ok_or_else(|| HarnessError::Validation(format!("ensemble pack `{}` not loaded", m.overlay_pack)))?;
                let thresholds = Thresholds {
                    conf_threshold: m.conf_threshold.unwrap_or(defaults.conf_threshold),
                    conflict_threshold: m.conflict_threshold.unwrap_or(defaults.conflict_threshold),
                };
                Ok(Observer::new(registry.clone(), pack.clone(), thresholds))
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        Ensemble::new(members, self.rule.clone()).map_err(|e| HarnessError::Validation(e.to_string()))
    }
}

/// Everything a session needs besides the base policy. Serialized into the
/// log header so replay is self-contained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfig {
    pub packs: Vec<OverlayPack>,
    pub supervisor: SupervisorConfig,
    pub fallbacks: FallbackLibrary,
    pub limits: Limits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lookahead: Option<LookaheadSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ensemble: Option<EnsembleSpec>,
}

impl EngineConfig {
    pub fn pack_map(&self) -> BTreeMap<String, OverlayPack> {
        self.packs.iter().map(|p| (p.id.clone(), p.clone())).collect()
    }

    /// Cross-references between the parts, beyond each part's own checks.
    pub fn validate(&self, registry: &FeatureRegistry) -> Result<Vec<String>, HarnessError> {
        let bad = HarnessError::Validation;
        let mut ids = BTreeSet::new();
        for p in &self.packs {
            if !ids.insert(p.id.as_str()) {
                return Err(bad(format!("pack `{}` loaded twice", p.id)));
            }
        }
        let warnings = self
            .supervisor
            .validate(registry)
            .map_err(|(id, msg)| bad(format!("supervisor `{id}`: {msg}")))?;
        for id in self.supervisor.pack_ids() {
            if !ids.contains(id) {
                return Err(bad(format!("supervisor references unknown pack `{id}`")));
            }
        }
        self.fallbacks.check_features(registry).map_err(|e| bad(e.to_string()))?;
        self.limits.validate().map_err(|e| bad(format!("limits: {e}")))?;
        if let Some(la) = &self.lookahead {
            la.config.validate().map_err(|e| bad(format!("lookahead: {e}")))?;
        }
        if let Some(ens) = &self.ensemble {
            if self.supervisor.modes.len() > 1 {
                return Err(bad("an ensemble judges a single-mode session".into()));
            }
            ens.build(&self.pack_map(), registry, &self.limits)?;
            if let Some(DisagreementAction::FallbackRef(id) | DisagreementAction::AskClarify(id)) =
                &ens.rule.disagreement_action
            {
                if self.fallbacks.get(id).is_none() {
                    return Err(bad(format!("disagreement action names unknown fallback `{id}`")));
                }
            }
        }
        Ok(warnings)
    }

    pub fn digests(&self) -> BTreeMap<String, Digest64> {
        let mut out: BTreeMap<String, Digest64> =
            self.packs.iter().map(|p| (format!("pack:{}", p.id), Digest64::of_json(p))).collect();
        out.insert("supervisor".into(), Digest64::of_json(&self.supervisor));
        out.insert("fallbacks".into(), Digest64::of_json(&self.fallbacks));
        out.insert("limits".into(), Digest64::of_json(&self.limits));
        if let Some(la) = &self.lookahead {
            out.insert("lookahead".into(), Digest64::of_json(la));
        }
        if let Some(e) = &self.ensemble {
            out.insert("ensemble".into(), Digest64::of_json(e));
        }
        out
    }

    /// Packs judging utterances in `mode`, in verdict order.
    pub fn judge_packs(&self, mode_pack: &str) -> Vec<String> {
        match &self.ensemble {
            Some(e) => e.pack_ids(),
            None => vec![mode_pack.to_string()],
        }
    }
}

/// One scripted session through the full stack.
pub struct Session<'a> {
    pub config: &'a EngineConfig,
    pub registry: FeatureRegistry,
    pub policy: &'a dyn BasePolicy,
    /// Pack files that persistent updates rewrite.
    pub pack_files: BTreeMap<String, PathBuf>,
}

impl<'a> Session<'a> {
    pub fn new(config: &'a EngineConfig, policy: &'a dyn BasePolicy) -> Self {
        Session { config, registry: FeatureRegistry::builtin(), policy, pack_files: BTreeMap::new() }
    }

    pub fn run(
        &self,
        scenario_id: &str,
        session_id: &str,
        turns: &[UserTurnSpec],
    ) -> Result<TrajectoryLog, HarnessError> {
        let cfg = self.config;
        let header = Header {
            version: LOG_VERSION.to_string(),
            scenario_id: scenario_id.to_string(),
            session_id: session_id.to_string(),
            config: cfg.clone(),
            config_digests: cfg.digests(),
            prev_digest: GENESIS,
        };
        let mut lines = vec![LogLine::Header(header.clone()).to_line()];
        let mut records = Vec::with_capacity(turns.len());

        let mut packs = cfg.pack_map();
        let mut state = InteractionState::new(session_id, cfg.supervisor.initial_mode.clone());
        let mut pending: Option<FeedbackDirective> = None;
        let rollout = cfg.lookahead.as_ref().map(|l| l.rollout.clone());
        let thresholds = cfg.limits.thresholds();

        for (t, spec) in turns.iter().enumerate() {
            state = state.record_user_turn(&spec.text, &spec.tags);
            for u in &spec.overlay_updates {
                self.apply_update(&mut packs, u)?;
            }
            let mode_before = state.active_mode.clone();
            let features = state_features(&state, &self.registry);
            let gate = gate_features(&features, &state, &cfg.supervisor);

            let mut mode_switch = None;
            let (decision, executed, exec_features, attempts, policy_calls, judge_packs);
            if let Gate::Skip(reason) = &gate {
                log::info!("turn {t}: gated ({reason})");
                executed = CandidateAction::supervisor_silence(0);
                exec_features = self.registry.extract_lenient(&state, &executed).0;
                decision = ObserverDecision {
                    disposition: Disposition::Defer,
                    rejection_reason: None,
                    feedback: None,
                    attempts_used: 0,
                };
                attempts = Vec::new();
                policy_calls = 0;
                judge_packs = Vec::new();
            } else {
                if let ModeSelection::Switch(target) = select_mode(&state, &cfg.supervisor, &features) {
                    let action = CandidateAction::mode_switch(target.clone());
                    let (admitted, verdicts) = match &cfg.supervisor.switch_overlays {
                        None => (true, Vec::new()),
                        Some(pid) => {
                            let j = judge_one(&action, &state, &packs[pid], &self.registry, &thresholds);
                            (j.admissible && j.confidence >= thresholds.conf_threshold, j.verdicts)
                        }
                    };
                    mode_switch =
                        Some(ModeSwitchRecord { from: state.active_mode.clone(), to: target, admitted, verdicts });
                    if admitted {
                        state = apply_transition(&state, &action, &spec.tags);
                    }
                }
                let mode = cfg
                    .supervisor
                    .mode(&state.active_mode)
                    .ok_or_else(|| HarnessError::Validation(format!("unknown mode `{}`", state.active_mode)))?;
                judge_packs = cfg.judge_packs(&mode.overlay_pack);
                let judge: Box<dyn Judge> = match &cfg.ensemble {
                    Some(e) => Box::new(e.build(&packs, &self.registry, &cfg.limits)?),
                    None => Box::new(Observer::new(
                        self.registry.clone(),
                        packs[&mode.overlay_pack].clone(),
                        thresholds,
                    )),
                };
                let lookahead = match (&cfg.lookahead, &rollout) {
                    (Some(spec), Some(policy)) => Some(Lookahead { config: spec.config.clone(), policy }),
                    _ => None,
                };
                let out = decide(
                    &state,
                    judge.as_ref(),
                    self.policy,
                    &mode.policy_profile,
                    &cfg.fallbacks,
                    &cfg.limits,
                    lookahead.as_ref(),
                    pending.as_ref(),
                );
                pending = out.decision.feedback.clone();
                decision = out.decision;
                executed = out.executed;
                exec_features = out.features;
                attempts = out.attempts;
                policy_calls = out.policy_calls;
            }

            let mode = state.active_mode.clone();
            let pack = cfg.supervisor.mode(&mode).map(|m| m.overlay_pack.clone()).unwrap_or_default();
            state = apply_transition(&state, &executed, &spec.tags).with_feature_cache(exec_features.clone());
            let record = TurnRecord {
                turn: t as u64,
                prev_digest: Digest64::of_bytes(lines.last().expect("header written").as_bytes()),
                user: UserRecord { text: spec.text.clone(), tags: spec.tags.clone() },
                overlay_updates: spec.overlay_updates.clone(),
                mode_before,
                gate,
                mode_switch,
                mode,
                pack,
                judge_packs,
                attempts,
                decision,
                executed,
                features: exec_features,
                policy_calls,
                state_digest: state.digest(),
            };
            let line = LogLine::Turn(Box::new(record));
            lines.push(line.to_line());
            let LogLine::Turn(record) = line else { unreachable!() };
            records.push(*record);
        }

        let footer = Footer {
            prev_digest: Digest64::of_bytes(lines.last().expect("header written").as_bytes()),
            turns: records.len() as u64,
            metrics: metrics(&records),
        };
        lines.push(LogLine::Footer(footer.clone()).to_line());
        Ok(TrajectoryLog { header, records, footer, lines, final_state: state })
    }

    fn apply_update(&self, packs: &mut BTreeMap<String, OverlayPack>, u: &PackUpdate) -> Result<(), HarnessError> {
        let pack = packs
            .get(&u.pack)
            .ok_or_else(|| HarnessError::Validation(format!("overlay update targets unknown pack `{}`", u.pack)))?;
        let next = apply_overlay_update(pack, &u.update, &self.registry).map_err(|source| HarnessError::Config {
            path: format!("overlay update on `{}`", u.pack),
            source,
        })?;
        if u.scope == UpdateScope::Persistent {
            let path = self.pack_files.get(&u.pack).ok_or_else(|| {
                HarnessError::Validation(format!("persistent update: no pack file known for `{}`", u.pack))
            })?;
            persist_overlay_update(path, &u.pack, &u.update, &self.registry)
                .map_err(|e| HarnessError::Validation(format!("persistent update on `{}`: {e}", u.pack)))?;
        }
        packs.insert(u.pack.clone(), next);
        Ok(())
    }
}
