//! Overlays: behavioral constraints with rigidity, and their verdicts.
//!
//! An overlay activates when all of its activation predicates hold and then
//! measures the candidate's deviation δ from a threshold τ on one feature:
//! `δ = τ − v` for minimum constraints and `δ = v − τ` for maximum
//! constraints. The candidate is admissible under the overlay when
//! `δ ≤ ε_eff`, where `ε_eff` comes from the overlay's [`RigidityPolicy`]
//! (optionally tightened as a safety margin shrinks) plus any bonus granted
//! by permissive overlays in the same pack.

mod config;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::condition::{Interval, Predicate};
use crate::features::FeatureMap;
use crate::state::Counters;

pub use config::{check_overlay, overlays_to_json, packs_to_json, parse_overlay_set, parse_pack_file};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlayKind {
    /// Excludes actions beyond tolerance.
    Prohibitory,
    /// Redirects from one action class to a preferred one.
    Transfer,
    /// Widens the tolerance of tagged overlays when its condition holds.
    Permissive,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Bound {
    AtLeast(f64),
    AtMost(f64),
}

impl Bound {
    pub fn threshold(self) -> f64 {
        match self {
            Bound::AtLeast(t) | Bound::AtMost(t) => t,
        }
    }

    pub fn deviation(self, value: f64) -> f64 {
        match self {
            Bound::AtLeast(tau) => tau - value,
            Bound::AtMost(tau) => value - tau,
        }
    }

    /// Values meeting the bound exactly (no tolerance).
    pub fn nominal_range(self) -> Interval {
        match self {
            Bound::AtLeast(t) => Interval::new(t, false, f64::INFINITY, true),
            Bound::AtMost(t) => Interval::new(f64::NEG_INFINITY, true, t, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Constraint {
    pub feature: String,
    /// Absent for transfer overlays, which compare a class label instead.
    pub bound: Option<Bound>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Tighten {
    /// `ε · m / cap`
    Linear,
    /// `ε · (m / cap)^p`, `p > 0`
    Power(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveRigidity {
    /// Feature holding the running score `n_t`.
    pub margin_feature: String,
    /// `n_max`
    pub margin_cap: f64,
    pub tighten: Tighten,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RigidityPolicy {
    pub base_epsilon: f64,
    pub adaptive: Option<AdaptiveRigidity>,
}

impl RigidityPolicy {
    pub fn fixed(epsilon: f64) -> Self {
        RigidityPolicy { base_epsilon: epsilon, adaptive: None }
    }

    /// Safety margin `m_t = n_max − n_t`, clamped to `[0, n_max]`.
    pub fn margin(&self, running: f64) -> Option<f64> {
        self.adaptive
            .as_ref()
            .map(|a| (a.margin_cap - running).clamp(0.0, a.margin_cap))
    }

    /// Tolerance at margin `m`: the base epsilon at full margin, zero at none.
    pub fn epsilon_at_margin(&self, margin: f64) -> f64 {
        match &self.adaptive {
            None => self.base_epsilon,
            Some(a) => {
                let ratio = (margin / a.margin_cap).clamp(0.0, 1.0);
                let scale = match a.tighten {
                    Tighten::Linear => ratio,
                    Tighten::Power(p) => ratio.powf(p),
                };
                self.base_epsilon * scale
            }
        }
    }

    /// Effective epsilon and the confidence of the margin input.
    fn effective(&self, margin_features: &FeatureMap) -> Result<(f64, f64), String> {
        match &self.adaptive {
            None => Ok((self.base_epsilon, 1.0)),
            Some(a) => {
                let fv = margin_features
                    .get(&a.margin_feature)
                    .ok_or_else(|| a.margin_feature.clone())?;
                let running = fv.as_number().ok_or_else(|| a.margin_feature.clone())?;
                let m = self.margin(running).unwrap_or(0.0);
                Ok((self.epsilon_at_margin(m), fv.confidence))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Overlay {
    pub id: String,
    pub kind: OverlayKind,
    /// Conjunction; empty means always active.
    pub activation: Vec<Predicate>,
    pub constraint: Constraint,
    pub rigidity: RigidityPolicy,
    pub transfer_target: Option<String>,
    pub permit_bonus: Option<f64>,
    pub severity_weight: f64,
    /// Grouping for permissive composition.
    pub tags: Vec<String>,
}

impl Overlay {
    /// A minimum constraint `feature ≥ τ` guarded by `guard ≥ φ`.
    pub fn at_least(id: &str, guard: &str, phi: f64, feature: &str, tau: f64, epsilon: f64) -> Self {
        Overlay {
            id: id.into(),
            kind: OverlayKind::Prohibitory,
            activation: vec![Predicate::feature(guard, crate::condition::CmpOp::Ge, phi)],
            constraint: Constraint { feature: feature.into(), bound: Some(Bound::AtLeast(tau)) },
            rigidity: RigidityPolicy::fixed(epsilon),
            transfer_target: None,
            permit_bonus: None,
            severity_weight: 1.0,
            tags: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Composition {
    /// Permissive bonuses widen every overlay sharing a tag.
    #[default]
    Additive,
    /// Permissive bonuses never widen prohibitory overlays.
    ProhibitoryWins,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverlayPack {
    pub id: String,
    pub composition: Composition,
    pub overlays: Vec<Overlay>,
}

impl OverlayPack {
    pub fn new(id: impl Into<String>, overlays: Vec<Overlay>) -> Self {
        OverlayPack { id: id.into(), composition: Composition::Additive, overlays }
    }

    pub fn overlay_ids(&self) -> Vec<String> {
        self.overlays.iter().map(|o| o.id.clone()).collect()
    }

    /// Evaluates every overlay on one candidate's features, in pack order,
    /// applying permissive composition.
    pub fn evaluate(&self, features: &FeatureMap, counters: &Counters) -> Vec<OverlayVerdict> {
        let mut verdicts: BTreeMap<usize, OverlayVerdict> = BTreeMap::new();
        let mut fired: Vec<(usize, f64)> = Vec::new();
        for (i, o) in self.overlays.iter().enumerate() {
            if o.kind == OverlayKind::Permissive {
                let v = evaluate_with(o, &EvalInputs::new(features, features, counters));
                if v.activated && v.evaluable {
                    fired.push((i, o.permit_bonus.unwrap_or(0.0)));
                }
                verdicts.insert(i, v);
            }
        }
        for (i, o) in self.overlays.iter().enumerate() {
            if o.kind == OverlayKind::Permissive {
                continue;
            }
            let bonus = if o.kind == OverlayKind::Prohibitory
                && self.composition == Composition::ProhibitoryWins
            {
                0.0
            } else {
                fired
                    .iter()
                    .filter(|(j, _)| self.overlays[*j].tags.iter().any(|t| o.tags.contains(t)))
                    .map(|(_, b)| b)
                    .sum()
            };
            let mut inputs = EvalInputs::new(features, features, counters);
            inputs.epsilon_bonus = bonus;
            verdicts.insert(i, evaluate_with(o, &inputs));
        }
        verdicts.into_values().collect()
    }
}

/// One overlay's judgment of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayVerdict {
    pub overlay_id: String,
    pub activated: bool,
    /// δ; negative when satisfied with slack, 0 when inactive.
    pub deviation: f64,
    pub admissible: bool,
    pub descriptor: String,
    pub effective_epsilon: f64,
    /// Minimum confidence over the features the overlay read.
    pub confidence: f64,
    /// False when a referenced feature was missing or ill-typed.
    pub evaluable: bool,
}

impl OverlayVerdict {
    /// Slack to the tolerance boundary, `ε_eff − δ`.
    pub fn slack(&self) -> f64 {
        self.effective_epsilon - self.deviation
    }
}

/// Everything an overlay evaluation reads.
#[derive(Debug, Clone, Copy)]
pub struct EvalInputs<'a> {
    pub features: &'a FeatureMap,
    pub margin_features: &'a FeatureMap,
    pub counters: &'a Counters,
    pub epsilon_bonus: f64,
}

impl<'a> EvalInputs<'a> {
    pub fn new(features: &'a FeatureMap, margin_features: &'a FeatureMap, counters: &'a Counters) -> Self {
        EvalInputs { features, margin_features, counters, epsilon_bonus: 0.0 }
    }
}

/// Evaluates one overlay against features, with no counters and no bonus.
pub fn evaluate(overlay: &Overlay, features: &FeatureMap, margin_features: &FeatureMap) -> OverlayVerdict {
    let counters = Counters::new();
    evaluate_with(overlay, &EvalInputs::new(features, margin_features, &counters))
}

fn unevaluable(overlay: &Overlay, epsilon: f64, what: &str) -> OverlayVerdict {
    log::debug!("overlay `{}` unevaluable: {what}", overlay.id);
    OverlayVerdict {
        overlay_id: overlay.id.clone(),
        activated: true,
        deviation: 0.0,
        admissible: false,
        descriptor: "unevaluable".to_string(),
        effective_epsilon: epsilon,
        confidence: 0.0,
        evaluable: false,
    }
}

/// Never fails: missing or ill-typed inputs yield an unevaluable,
/// inadmissible, confidence-0 verdict.
pub fn evaluate_with(overlay: &Overlay, inputs: &EvalInputs<'_>) -> OverlayVerdict {
    let (base_eps, margin_conf) = match overlay.rigidity.effective(inputs.margin_features) {
        Ok(v) => v,
        Err(name) => return unevaluable(overlay, overlay.rigidity.base_epsilon, &name),
    };
    let epsilon = base_eps + inputs.epsilon_bonus;
    let mut confidence = margin_conf;

    let mut activated = true;
    for p in &overlay.activation {
        match p.eval(inputs.features, inputs.counters) {
            Ok(t) => {
                activated &= t.holds;
                confidence = confidence.min(t.confidence);
            }
            Err(e) => return unevaluable(overlay, epsilon, &e.to_string()),
        }
    }

    let feature = &overlay.constraint.feature;
    let Some(fv) = inputs.features.get(feature) else {
        return unevaluable(overlay, epsilon, feature);
    };
    confidence = confidence.min(fv.confidence);

    let verdict = |activated: bool, deviation: f64, admissible: bool, descriptor: String| OverlayVerdict {
        overlay_id: overlay.id.clone(),
        activated,
        deviation,
        admissible,
        descriptor,
        effective_epsilon: epsilon,
        confidence,
        evaluable: true,
    };
    let inactive = || verdict(false, 0.0, true, "inactive".to_string());

    if !activated {
        // still type-check the constraint input
        let typed = match overlay.kind {
            OverlayKind::Transfer => fv.as_label().is_some(),
            _ => fv.as_number().is_some() || overlay.constraint.bound.is_none(),
        };
        return if typed { inactive() } else { unevaluable(overlay, epsilon, feature) };
    }

    match overlay.kind {
        OverlayKind::Transfer => {
            let (Some(label), Some(target)) = (fv.as_label(), overlay.transfer_target.as_deref()) else {
                return unevaluable(overlay, epsilon, feature);
            };
            let deviation = if label == target { 0.0 } else { 1.0 };
            let admissible = deviation <= epsilon;
            let descriptor = if label == target {
                format!("{feature} is {target}; δ=0.000")
            } else {
                format!("prefer {target} over {label}; δ={deviation:.3}")
            };
            verdict(true, deviation, admissible, descriptor)
        }
        OverlayKind::Prohibitory | OverlayKind::Permissive => {
            let Some(bound) = overlay.constraint.bound else {
                // permissive overlay without a constraint fires on activation alone
                let bonus = overlay.permit_bonus.unwrap_or(0.0);
                return verdict(true, 0.0, true, format!("permits +{bonus:.3}"));
            };
            let Some(value) = fv.as_number() else {
                return unevaluable(overlay, epsilon, feature);
            };
            let deviation = bound.deviation(value);
            let within = deviation <= epsilon;
            if overlay.kind == OverlayKind::Permissive {
                if !within {
                    return inactive();
                }
                let bonus = overlay.permit_bonus.unwrap_or(0.0);
                return verdict(true, deviation, true, format!("permits +{bonus:.3}; δ={deviation:.3}"));
            }
            let descriptor = match (deviation > 0.0, bound) {
                (false, _) => format!("{feature} within bound; δ={deviation:.3}"),
                (true, Bound::AtLeast(_)) => format!("{feature} insufficient; δ={deviation:.3}"),
                (true, Bound::AtMost(_)) => format!("{feature} excessive; δ={deviation:.3}"),
            };
            verdict(true, deviation, within, descriptor)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::condition::CmpOp;
    use crate::features::{FeatureScope, FeatureValue};

    fn features(pairs: &[(&str, f64)]) -> FeatureMap {
        pairs
            .iter()
            .map(|(n, v)| (n.to_string(), FeatureValue::scalar(*n, *v, FeatureScope::TurnLocal)))
            .collect()
    }

    fn empathy(eps: f64) -> Overlay {
        Overlay::at_least("empathy_ack", "frustration", 0.5, "empathy", 0.50, eps)
    }

    #[test]
    fn worked_example_rejects_low_empathy() {
        let f = features(&[("frustration", 0.82), ("empathy", 0.21)]);
        let v = evaluate(&empathy(0.05), &f, &f);
        assert!(v.activated);
        assert!((v.deviation - 0.29).abs() < 1e-12);
        assert!(!v.admissible);
        assert_eq!(v.descriptor, "empathy insufficient; δ=0.290");
    }

    #[test]
    fn near_compliant_depends_on_rigidity() {
        let f = features(&[("frustration", 0.82), ("empathy", 0.47)]);
        let loose = evaluate(&empathy(0.05), &f, &f);
        assert!((loose.deviation - 0.03).abs() < 1e-12);
        assert!(loose.admissible);
        assert!(!evaluate(&empathy(0.01), &f, &f).admissible);
    }

    #[test]
    fn inactive_below_guard() {
        let f = features(&[("frustration", 0.30), ("empathy", 0.0)]);
        let v = evaluate(&empathy(0.05), &f, &f);
        assert!(!v.activated && v.admissible);
        assert_eq!(v.deviation, 0.0);
    }

    #[test]
    fn missing_feature_is_unevaluable() {
        let f = features(&[("frustration", 0.9)]);
        let v = evaluate(&empathy(0.05), &f, &f);
        assert!(!v.evaluable && !v.admissible);
        assert_eq!(v.confidence, 0.0);
        assert_eq!(v.descriptor, "unevaluable");
    }

    fn adaptive(base: f64, tighten: Tighten) -> RigidityPolicy {
        RigidityPolicy {
            base_epsilon: base,
            adaptive: Some(AdaptiveRigidity {
                margin_feature: "negativity_running".into(),
                margin_cap: 1.0,
                tighten,
            }),
        }
    }

    #[test]
    fn margin_arithmetic() {
        let r = adaptive(0.2, Tighten::Linear);
        assert!((r.margin(0.3).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(r.margin(1.4), Some(0.0));
        assert_eq!(r.margin(-0.5), Some(1.0));
        assert_eq!(r.epsilon_at_margin(1.0), 0.2);
        assert_eq!(r.epsilon_at_margin(0.0), 0.0);
        let p = adaptive(0.2, Tighten::Power(2.0));
        assert!((p.epsilon_at_margin(0.5) - 0.05).abs() < 1e-12);
        assert_eq!(RigidityPolicy::fixed(0.1).margin(0.3), None);
    }

    #[test]
    fn adaptive_epsilon_tightens_with_running_negativity() {
        let mut o = empathy(0.0);
        o.activation.clear();
        o.constraint = Constraint { feature: "negativity".into(), bound: Some(Bound::AtMost(0.0)) };
        o.rigidity = adaptive(0.75, Tighten::Linear);
        let f = features(&[("negativity", 0.75), ("negativity_running", 0.0)]);
        assert!(evaluate(&o, &f, &f).admissible);
        let f = features(&[("negativity", 0.75), ("negativity_running", 0.75)]);
        let v = evaluate(&o, &f, &f);
        assert!(!v.admissible);
        assert!((v.effective_epsilon - 0.1875).abs() < 1e-12);
        assert_eq!(v.descriptor, "negativity excessive; δ=0.750");
    }

    fn transfer() -> Overlay {
        Overlay {
            id: "relational_not_assistive".into(),
            kind: OverlayKind::Transfer,
            activation: vec![],
            constraint: Constraint { feature: "motive_class".into(), bound: None },
            rigidity: RigidityPolicy::fixed(0.0),
            transfer_target: Some("relational".into()),
            permit_bonus: None,
            severity_weight: 0.5,
            tags: vec![],
        }
    }

    #[test]
    fn transfer_redirects_class() {
        let mut f = FeatureMap::new();
        f.insert("motive_class".into(), FeatureValue::label("motive_class", "assistive", FeatureScope::TurnLocal));
        let v = evaluate(&transfer(), &f, &f);
        assert!(!v.admissible);
        assert_eq!(v.descriptor, "prefer relational over assistive; δ=1.000");
        f.insert("motive_class".into(), FeatureValue::label("motive_class", "relational", FeatureScope::TurnLocal));
        assert!(evaluate(&transfer(), &f, &f).admissible);
    }

    fn brevity(eps: f64) -> Overlay {
        Overlay {
            id: "brevity".into(),
            kind: OverlayKind::Prohibitory,
            activation: vec![],
            constraint: Constraint { feature: "verbosity".into(), bound: Some(Bound::AtMost(0.4)) },
            rigidity: RigidityPolicy::fixed(eps),
            transfer_target: None,
            permit_bonus: None,
            severity_weight: 0.5,
            tags: vec!["style".into()],
        }
    }

    fn storytelling() -> Overlay {
        Overlay {
            id: "storytelling_ok".into(),
            kind: OverlayKind::Permissive,
            activation: vec![Predicate::feature("frustration", CmpOp::Le, 0.2)],
            constraint: Constraint { feature: "empathy".into(), bound: Some(Bound::AtLeast(0.25)) },
            rigidity: RigidityPolicy::fixed(0.0),
            transfer_target: None,
            permit_bonus: Some(0.3),
            severity_weight: 0.2,
            tags: vec!["style".into()],
        }
    }

    #[test]
    fn permissive_bonus_composes() {
        let pack = OverlayPack::new("p", vec![brevity(0.05), storytelling()]);
        let calm_warm = features(&[("verbosity", 0.7), ("frustration", 0.0), ("empathy", 0.5)]);
        let v = pack.evaluate(&calm_warm, &Counters::new());
        assert_eq!(v[0].overlay_id, "brevity");
        assert!((v[0].effective_epsilon - 0.35).abs() < 1e-12);
        assert!(v[0].admissible);
        assert!(v[1].activated && v[1].admissible);

        // permissive condition fails -> no bonus
        let cold = features(&[("verbosity", 0.7), ("frustration", 0.0), ("empathy", 0.0)]);
        let v = pack.evaluate(&cold, &Counters::new());
        assert!(!v[1].activated);
        assert!(!v[0].admissible);

        let mut strict = pack.clone();
        strict.composition = Composition::ProhibitoryWins;
        let v = strict.evaluate(&calm_warm, &Counters::new());
        assert_eq!(v[0].effective_epsilon, 0.05);
        assert!(!v[0].admissible);
    }
}
