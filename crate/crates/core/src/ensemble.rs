//! Multi-observer arbitration and overlay hot-swap.

use std::collections::BTreeSet;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::ConfigError;
use crate::features::{FeatureMap, FeatureRegistry};
use crate::observer::{
    classify, judge, AdmissibleSet, Judge, JudgedCandidate, Judgment, MemberJudgment, Observer, Thresholds,
};
use crate::overlay::{check_overlay, packs_to_json, parse_pack_file, Bound, Overlay, OverlayPack};
use crate::state::{CandidateAction, InteractionState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArbitrationKind {
    ConservativeIntersection,
    MajorityVote,
    /// Admissible when the weight of observers admitting it reaches `pass_threshold`.
    WeightedScore { weights: Vec<f64>, pass_threshold: f64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisagreementAction {
    /// Stay silent this turn.
    Defer,
    FallbackRef(String),
    /// Executes the fallback entry with this id (a clarifying question).
    AskClarify(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbitrationRule {
    pub kind: ArbitrationKind,
    #[serde(default)]
    pub disagreement_action: Option<DisagreementAction>,
}

impl ArbitrationRule {
    pub fn new(kind: ArbitrationKind) -> Self {
        ArbitrationRule { kind, disagreement_action: None }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnsembleError {
    #[error("ensemble needs at least one observer")]
    NoMembers,
    #[error("{weights} weights for {members} observers")]
    WeightCount { weights: usize, members: usize },
    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("pass_threshold {0} outside [0, 1]")]
    PassThreshold(f64),
}

/// Joint admissible indices and whether the member sets differ.
pub fn arbitrate(member_sets: &[Vec<usize>], kind: &ArbitrationKind) -> (Vec<usize>, bool) {
    let sets: Vec<BTreeSet<usize>> = member_sets.iter().map(|s| s.iter().copied().collect()).collect();
    let disagreement = sets.windows(2).any(|w| w[0] != w[1]);
    let universe: BTreeSet<usize> = sets.iter().flatten().copied().collect();
    let m = sets.len();
    let joint = universe
        .into_iter()
        .filter(|i| {
            let admitted = sets.iter().map(|s| s.contains(i));
            match kind {
                ArbitrationKind::ConservativeIntersection => admitted.clone().all(|a| a),
                ArbitrationKind::MajorityVote => 2 * admitted.filter(|&a| a).count() > m,
                ArbitrationKind::WeightedScore { weights, pass_threshold } => {
                    let mass: f64 = admitted.zip(weights).filter(|(a, _)| *a).map(|(_, w)| w).sum();
                    mass >= pass_threshold - 1e-12
                }
            }
        })
        .collect();
    (joint, disagreement)
}

/// Independent observers judged together under one arbitration rule.
#[derive(Debug, Clone)]
pub struct Ensemble {
    members: Vec<Observer>,
    rule: ArbitrationRule,
}

impl Ensemble {
    pub fn new(members: Vec<Observer>, rule: ArbitrationRule) -> Result<Self, EnsembleError> {
        if members.is_empty() {
            return Err(EnsembleError::NoMembers);
        }
        if let ArbitrationKind::WeightedScore { weights, pass_threshold } = &rule.kind {
            if weights.len() != members.len() {
                return Err(EnsembleError::WeightCount { weights: weights.len(), members: members.len() });
            }
            let sum: f64 = weights.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
                return Err(EnsembleError::WeightSum(sum));
            }
            if !(0.0..=1.0).contains(pass_threshold) {
                return Err(EnsembleError::PassThreshold(*pass_threshold));
            }
        }
        Ok(Ensemble { members, rule })
    }

    pub fn members(&self) -> &[Observer] {
        &self.members
    }

    pub fn rule(&self) -> &ArbitrationRule {
        &self.rule
    }

    /// Applies `update` to every member whose pack is `pack_id`.
    pub fn apply_update(&mut self, pack_id: &str, update: &OverlayUpdate) -> Result<(), ConfigError> {
        let mut hit = false;
        for m in self.members.iter_mut().filter(|m| m.pack.id == pack_id) {
            m.pack = apply_overlay_update(&m.pack, update, &m.registry)?;
            hit = true;
        }
        if hit {
            Ok(())
        } else {
            Err(update_error(pack_id, format!("no ensemble member uses pack `{pack_id}`")))
        }
    }
}

impl Judge for Ensemble {
    fn registry(&self) -> &FeatureRegistry {
        &self.members[0].registry
    }

    fn judge(&self, candidates: &[CandidateAction], state: &InteractionState) -> Judgment {
        let per: Vec<_> = self
            .members
            .iter()
            .map(|o| judge(candidates, state, &o.pack, &o.registry, &o.thresholds))
            .collect();
        let sets: Vec<Vec<usize>> = per.iter().map(|(s, _)| s.admissible_indices.clone()).collect();
        let (joint, disagreement) = arbitrate(&sets, &self.rule.kind);

        let combined = (0..candidates.len())
            .map(|i| {
                let mut features = FeatureMap::new();
                let mut verdicts = Vec::new();
                let mut conflicts: Vec<(String, String)> = Vec::new();
                let mut confidence = 1.0_f64;
                for (set, _) in &per {
                    let c = &set.candidates[i];
                    features.extend(c.features.clone());
                    verdicts.extend(c.verdicts.iter().cloned());
                    confidence = confidence.min(c.confidence);
                    for pair in &c.conflicts {
                        if !conflicts.contains(pair) {
                            conflicts.push(pair.clone());
                        }
                    }
                }
                JudgedCandidate {
                    action: candidates[i].clone(),
                    features,
                    verdicts,
                    confidence,
                    admissible: joint.contains(&i),
                    conflicts,
                }
            })
            .collect();
        let set = AdmissibleSet::from_candidates(combined);
        let thresholds = Thresholds {
            conf_threshold: self.members.iter().map(|m| m.thresholds.conf_threshold).fold(0.0, f64::max),
            conflict_threshold: self.members.iter().map(|m| m.thresholds.conflict_threshold).fold(0.0, f64::max),
        };
        let rejection = classify(&set, &thresholds);
        let members = self
            .members
            .iter()
            .zip(&per)
            .map(|(o, (s, r))| MemberJudgment {
                observer_id: o.id.clone(),
                admissible_indices: s.admissible_indices.clone(),
                rejection: *r,
            })
            .collect();
        Judgment {
            set,
            rejection,
            members,
            disagreement,
            escalation: if disagreement { self.rule.disagreement_action.clone() } else { None },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum OverlayUpdate {
    Add { overlay: Overlay },
    Remove { id: String },
    SetEpsilon { id: String, epsilon: f64 },
    /// Moves τ, keeping the bound's direction.
    SetThreshold { id: String, threshold: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpdateScope {
    /// Affects only the running session; recorded in its log.
    #[default]
    Session,
    /// Rewrites the pack file on disk.
    Persistent,
}

/// An update addressed to one pack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackUpdate {
    pub pack: String,
    #[serde(default)]
    pub scope: UpdateScope,
    #[serde(flatten)]
    pub update: OverlayUpdate,
}

fn update_error(id: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Validation { id: id.to_string(), line: 0, message: message.into() }
}

/// Returns the pack with `update` applied; the input is untouched.
pub fn apply_overlay_update(
    pack: &OverlayPack,
    update: &OverlayUpdate,
    registry: &FeatureRegistry,
) -> Result<OverlayPack, ConfigError> {
    let mut next = pack.clone();
    let position = |id: &str| {
        next.overlays
            .iter()
            .position(|o| o.id == id)
            .ok_or_else(|| update_error(id, format!("no overlay `{id}` in pack `{}`", pack.id)))
    };
    match update {
        OverlayUpdate::Add { overlay } => {
            if pack.overlays.iter().any(|o| o.id == overlay.id) {
                return Err(update_error(&overlay.id, format!("duplicate overlay id `{}`", overlay.id)));
            }
            check_overlay(overlay, registry)?;
            next.overlays.push(overlay.clone());
        }
        OverlayUpdate::Remove { id } => {
            let i = position(id)?;
            next.overlays.remove(i);
        }
        OverlayUpdate::SetEpsilon { id, epsilon } => {
            let i = position(id)?;
            next.overlays[i].rigidity.base_epsilon = *epsilon;
            check_overlay(&next.overlays[i], registry)?;
        }
        OverlayUpdate::SetThreshold { id, threshold } => {
            let i = position(id)?;
            let o = &mut next.overlays[i];
            o.constraint.bound = match o.constraint.bound {
                Some(Bound::AtLeast(_)) => Some(Bound::AtLeast(*threshold)),
                Some(Bound::AtMost(_)) => Some(Bound::AtMost(*threshold)),
                None => return Err(update_error(id, format!("overlay `{id}` has no threshold"))),
            };
            check_overlay(&next.overlays[i], registry)?;
        }
    }
    Ok(next)
}

#[derive(Debug, Error)]
pub enum PersistError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("pack file io: {0}")]
    Io(#[from] std::io::Error),
}

/// Writes the pack file atomically: a sibling temp file renamed over `path`.
pub fn write_packs_atomic(path: &Path, packs: &[OverlayPack]) -> std::io::Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(packs_to_json(packs).as_bytes())?;
    tmp.write_all(b"\n")?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// Applies a persistent update to the pack file at `path`.
pub fn persist_overlay_update(
    path: &Path,
    pack_id: &str,
    update: &OverlayUpdate,
    registry: &FeatureRegistry,
) -> Result<Vec<OverlayPack>, PersistError> {
    let text = std::fs::read_to_string(path)?;
    let mut packs = parse_pack_file(&text, registry)?;
    let pack = packs
        .iter_mut()
        .find(|p| p.id == pack_id)
        .ok_or_else(|| update_error(pack_id, format!("no pack `{pack_id}` in {}", path.display())))?;
    *pack = apply_overlay_update(pack, update, registry)?;
    write_packs_atomic(path, &packs)?;
    Ok(packs)
}
