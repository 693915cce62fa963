//! JSON overlay format.
//!
//! ```json
//! {"packs": [{
//!   "id": "therapy",
//!   "composition": "additive",
//!   "overlays": [{
//!     "id": "empathy_ack",
//!     "kind": "prohibitory",
//!     "activation": {"feature": "frustration", "op": ">=", "threshold": 0.5},
//!     "constraint": {"feature": "empathy", "op": ">=", "threshold": 0.5},
//!     "rigidity": {"epsilon": 0.05},
//!     "weight": 1.0
//!   }]
//! }]}
//! ```
//!
//! A file may also hold a single pack object, or a bare array of overlays.
//! Adaptive rigidity:
//! `"rigidity": {"epsilon": 0.75, "adaptive": {"margin_feature": "negativity_running",
//! "margin_cap": 1.0, "tighten": "linear"}}` (or `{"power": {"exponent": 2.0}}`).

use std::collections::BTreeSet;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{
    AdaptiveRigidity, Bound, Composition, Constraint, Overlay, OverlayKind, OverlayPack,
    RigidityPolicy, Tighten,
};
use crate::condition::{CmpOp, Condition, Operand, Subject};
use crate::config::{parse_json, ConfigError};
use crate::features::FeatureRegistry;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOverlay {
    id: String,
    kind: OverlayKind,
    #[serde(default = "always")]
    activation: Condition,
    constraint: RawConstraint,
    rigidity: RawRigidity,
    #[serde(default = "one")]
    weight: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transfer_target: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    permit_bonus: Option<f64>,
}

fn always() -> Condition {
    Condition::Always
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConstraint {
    feature: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    op: Option<CmpOp>,
    #[serde(default, alias = "value", skip_serializing_if = "Option::is_none")]
    threshold: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRigidity {
    epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    adaptive: Option<RawAdaptive>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAdaptive {
    margin_feature: String,
    margin_cap: f64,
    #[serde(default)]
    tighten: RawTighten,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum RawTighten {
    #[default]
    Linear,
    Power { exponent: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPack {
    id: String,
    #[serde(default)]
    composition: Composition,
    overlays: Vec<RawOverlay>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPackFile {
    #[serde(default)]
    packs: Option<Vec<RawPack>>,
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    composition: Option<Composition>,
    #[serde(default)]
    overlays: Option<Vec<RawOverlay>>,
}

#[derive(Serialize)]
struct PackFileOut {
    packs: Vec<RawPack>,
}

/// Where a validation error points: positioned in a source document, or
/// unpositioned (line 1) when checking an in-memory value.
struct Ctx<'a> {
    source: &'a str,
    registry: Option<&'a FeatureRegistry>,
}

impl Ctx<'_> {
    fn err(&self, id: &str, msg: impl Into<String>) -> ConfigError {
        ConfigError::validation(self.source, id, msg)
    }

    fn known(&self, id: &str, feature: &str) -> Result<(), ConfigError> {
        match self.registry {
            Some(r) if !r.declares(feature) => {
                Err(self.err(id, format!("unknown feature `{feature}`")))
            }
            _ => Ok(()),
        }
    }
}

fn unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

fn validate_overlay(raw: RawOverlay, ctx: &Ctx<'_>) -> Result<Overlay, ConfigError> {
    let id = raw.id.as_str();
    if id.trim().is_empty() {
        return Err(ctx.err(id, "overlay id must be non-empty"));
    }

    let activation = match raw.activation {
        Condition::Always => Vec::new(),
        Condition::Never => return Err(ctx.err(id, "activation `never` makes the overlay dead")),
        Condition::All(p) => p,
    };
    for p in &activation {
        if let Subject::Feature(f) = &p.subject {
            ctx.known(id, f)?;
            if let Operand::Number(phi) = p.value {
                if !unit(phi) {
                    return Err(ctx.err(id, format!("activation threshold {phi} on `{f}` outside [0, 1]")));
                }
            }
        }
    }

    let c = raw.constraint;
    ctx.known(id, &c.feature)?;
    let bound = match (c.op, c.threshold) {
        (None, None) => None,
        (Some(op), Some(tau)) => {
            if !unit(tau) {
                return Err(ctx.err(id, format!("constraint threshold {tau} outside [0, 1]")));
            }
            Some(match op {
                CmpOp::Ge => Bound::AtLeast(tau),
                CmpOp::Le => Bound::AtMost(tau),
                other => {
                    return Err(ctx.err(
                        id,
                        format!("constraint op `{}` unsupported (use `>=` or `<=`)", other.symbol()),
                    ))
                }
            })
        }
        _ => return Err(ctx.err(id, "constraint needs both `op` and `threshold`")),
    };

    match raw.kind {
        OverlayKind::Prohibitory => {
            if bound.is_none() {
                return Err(ctx.err(id, "prohibitory constraint needs `op` and `threshold`"));
            }
            if raw.transfer_target.is_some() || raw.permit_bonus.is_some() {
                return Err(ctx.err(id, "prohibitory overlays take neither `transfer_target` nor `permit_bonus`"));
            }
        }
        OverlayKind::Transfer => {
            if raw.transfer_target.as_deref().is_none_or(|t| t.is_empty()) {
                return Err(ctx.err(id, "transfer overlay needs `transfer_target`"));
            }
            if bound.is_some() || raw.permit_bonus.is_some() {
                return Err(ctx.err(id, "transfer constraint compares a label; drop `op`/`threshold`/`permit_bonus`"));
            }
            if raw.rigidity.epsilon >= 1.0 {
                return Err(ctx.err(id, "transfer epsilon must be < 1 or the overlay never rejects"));
            }
        }
        OverlayKind::Permissive => {
            match raw.permit_bonus {
                Some(b) if unit(b) => {}
                Some(b) => return Err(ctx.err(id, format!("permit_bonus {b} outside [0, 1]"))),
                None => return Err(ctx.err(id, "permissive overlay needs `permit_bonus`")),
            }
            if raw.transfer_target.is_some() {
                return Err(ctx.err(id, "permissive overlays take no `transfer_target`"));
            }
        }
    }

    if !(raw.weight > 0.0 && raw.weight <= 1.0) {
        return Err(ctx.err(id, format!("weight {} outside (0, 1]", raw.weight)));
    }
    let eps = raw.rigidity.epsilon;
    if !(eps.is_finite() && eps >= 0.0) {
        return Err(ctx.err(id, format!("epsilon {eps} must be finite and >= 0")));
    }
    let adaptive = match raw.rigidity.adaptive {
        None => None,
        Some(a) => {
            ctx.known(id, &a.margin_feature)?;
            if !(a.margin_cap.is_finite() && a.margin_cap > 0.0) {
                return Err(ctx.err(id, format!("margin_cap {} must be > 0", a.margin_cap)));
            }
            let tighten = match a.tighten {
                RawTighten::Linear => Tighten::Linear,
                RawTighten::Power { exponent } if exponent.is_finite() && exponent > 0.0 => {
                    Tighten::Power(exponent)
                }
                RawTighten::Power { exponent } => {
                    return Err(ctx.err(id, format!("tighten exponent {exponent} must be > 0")))
                }
            };
            Some(AdaptiveRigidity { margin_feature: a.margin_feature, margin_cap: a.margin_cap, tighten })
        }
    };

    Ok(Overlay {
        id: raw.id,
        kind: raw.kind,
        activation,
        constraint: Constraint { feature: c.feature, bound },
        rigidity: RigidityPolicy { base_epsilon: eps, adaptive },
        transfer_target: raw.transfer_target,
        permit_bonus: raw.permit_bonus,
        severity_weight: raw.weight,
        tags: raw.tags,
    })
}

fn validate_set(raws: Vec<RawOverlay>, ctx: &Ctx<'_>) -> Result<Vec<Overlay>, ConfigError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        if !seen.insert(raw.id.clone()) {
            return Err(ConfigError::duplicate(ctx.source, &raw.id, format!("duplicate overlay id `{}`", raw.id)));
        }
        out.push(validate_overlay(raw, ctx)?);
    }
    Ok(out)
}

fn validate_packs(raws: Vec<RawPack>, ctx: &Ctx<'_>) -> Result<Vec<OverlayPack>, ConfigError> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(raws.len());
    for raw in raws {
        if raw.id.trim().is_empty() {
            return Err(ctx.err(&raw.id, "pack id must be non-empty"));
        }
        if !seen.insert(raw.id.clone()) {
            return Err(ConfigError::duplicate(ctx.source, &raw.id, format!("duplicate pack id `{}`", raw.id)));
        }
        let overlays = validate_set(raw.overlays, ctx)?;
        out.push(OverlayPack { id: raw.id, composition: raw.composition, overlays });
    }
    Ok(out)
}

fn raw_packs(text: &str) -> Result<Vec<RawPack>, ConfigError> {
    let file: RawPackFile = parse_json(text)?;
    match file {
        RawPackFile { packs: Some(p), id: None, composition: None, overlays: None } => Ok(p),
        RawPackFile { packs: None, id: Some(id), composition, overlays: Some(o) } => {
            Ok(vec![RawPack { id, composition: composition.unwrap_or_default(), overlays: o }])
        }
        _ => Err(ConfigError::Validation {
            id: String::new(),
            line: 1,
            message: "expected {\"packs\": [...]} or a single pack {\"id\", \"overlays\"}".into(),
        }),
    }
}

/// Parses a list of overlays: an empty document, a JSON array of overlays,
/// or a pack file (overlays of all packs, in order).
pub fn parse_overlay_set(text: &str, registry: &FeatureRegistry) -> Result<Vec<Overlay>, ConfigError> {
    let ctx = Ctx { source: text, registry: Some(registry) };
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        let raws: Vec<RawOverlay> = parse_json(text)?;
        return validate_set(raws, &ctx);
    }
    let packs = validate_packs(raw_packs(text)?, &ctx)?;
    Ok(packs.into_iter().flat_map(|p| p.overlays).collect())
}

/// Parses a pack file into validated packs.
pub fn parse_pack_file(text: &str, registry: &FeatureRegistry) -> Result<Vec<OverlayPack>, ConfigError> {
    let ctx = Ctx { source: text, registry: Some(registry) };
    validate_packs(raw_packs(text)?, &ctx)
}

/// Validates an in-memory overlay against the registry.
pub fn check_overlay(overlay: &Overlay, registry: &FeatureRegistry) -> Result<(), ConfigError> {
    validate_overlay(to_raw(overlay), &Ctx { source: "", registry: Some(registry) }).map(|_| ())
}

fn to_raw(o: &Overlay) -> RawOverlay {
    let (op, threshold) = match o.constraint.bound {
        Some(Bound::AtLeast(t)) => (Some(CmpOp::Ge), Some(t)),
        Some(Bound::AtMost(t)) => (Some(CmpOp::Le), Some(t)),
        None => (None, None),
    };
    RawOverlay {
        id: o.id.clone(),
        kind: o.kind,
        activation: if o.activation.is_empty() {
            Condition::Always
        } else {
            Condition::All(o.activation.clone())
        },
        constraint: RawConstraint { feature: o.constraint.feature.clone(), op, threshold },
        rigidity: RawRigidity {
            epsilon: o.rigidity.base_epsilon,
            adaptive: o.rigidity.adaptive.as_ref().map(|a| RawAdaptive {
                margin_feature: a.margin_feature.clone(),
                margin_cap: a.margin_cap,
                tighten: match a.tighten {
                    Tighten::Linear => RawTighten::Linear,
                    Tighten::Power(exponent) => RawTighten::Power { exponent },
                },
            }),
        },
        weight: o.severity_weight,
        tags: o.tags.clone(),
        transfer_target: o.transfer_target.clone(),
        permit_bonus: o.permit_bonus,
    }
}

fn pack_to_raw(p: &OverlayPack) -> RawPack {
    RawPack { id: p.id.clone(), composition: p.composition, overlays: p.overlays.iter().map(to_raw).collect() }
}

pub fn overlays_to_json(overlays: &[Overlay]) -> String {
    let raws: Vec<RawOverlay> = overlays.iter().map(to_raw).collect();
    serde_json::to_string_pretty(&raws).expect("overlay serialization is infallible")
}

pub fn packs_to_json(packs: &[OverlayPack]) -> String {
    let out = PackFileOut { packs: packs.iter().map(pack_to_raw).collect() };
    serde_json::to_string_pretty(&out).expect("pack serialization is infallible")
}

impl Serialize for Overlay {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        to_raw(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Overlay {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawOverlay::deserialize(d)?;
        validate_overlay(raw, &Ctx { source: "", registry: None }).map_err(serde::de::Error::custom)
    }
}

impl Serialize for OverlayPack {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        pack_to_raw(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for OverlayPack {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = RawPack::deserialize(d)?;
        let ctx = Ctx { source: "", registry: None };
        validate_packs(vec![raw], &ctx)
            .map(|mut v| v.remove(0))
            .map_err(serde::de::Error::custom)
    }
}
