//! Predicates over features and counters, and conjunctive conditions.
//!
//! JSON forms:
//!
//! ```json
//! {"feature": "frustration", "op": ">=", "threshold": 0.5}
//! {"counter": "consecutive_rejections", "op": ">=", "value": 3}
//! {"feature": "social_presence", "op": "==", "value": "conversation"}
//! ```
//!
//! A condition is `"always"`, `"never"`, a single predicate, or an array of
//! predicates (all must hold).

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::features::FeatureMap;
use crate::state::Counters;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Subject {
    Feature(String),
    Counter(String),
}

impl Subject {
    pub fn name(&self) -> &str {
        match self {
            Subject::Feature(n) | Subject::Counter(n) => n,
        }
    }
}

impl fmt::Display for Subject {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Subject::Feature(n) => write!(f, "feature `{n}`"),
            Subject::Counter(n) => write!(f, "counter `{n}`"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CmpOp {
    #[serde(rename = ">=", alias = "ge")]
    Ge,
    #[serde(rename = ">", alias = "gt")]
    Gt,
    #[serde(rename = "<=", alias = "le")]
    Le,
    #[serde(rename = "<", alias = "lt")]
    Lt,
    #[serde(rename = "==", alias = "eq")]
    Eq,
    #[serde(rename = "!=", alias = "ne")]
    Ne,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Ge => ">=",
            CmpOp::Gt => ">",
            CmpOp::Le => "<=",
            CmpOp::Lt => "<",
            CmpOp::Eq => "==",
            CmpOp::Ne => "!=",
        }
    }

    fn holds(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CmpOp::Ge => lhs >= rhs,
            CmpOp::Gt => lhs > rhs,
            CmpOp::Le => lhs <= rhs,
            CmpOp::Lt => lhs < rhs,
            CmpOp::Eq => lhs == rhs,
            CmpOp::Ne => lhs != rhs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Operand {
    Number(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predicate {
    pub subject: Subject,
    pub op: CmpOp,
    pub value: Operand,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PredicateError {
    MissingFeature(String),
    TypeMismatch(String),
}

impl fmt::Display for PredicateError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredicateError::MissingFeature(n) => write!(f, "missing feature `{n}`"),
            PredicateError::TypeMismatch(n) => write!(f, "type mismatch on `{n}`"),
        }
    }
}

/// Outcome of a predicate: whether it holds and the confidence of its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truth {
    pub holds: bool,
    pub confidence: f64,
}

impl Predicate {
    pub fn feature(name: &str, op: CmpOp, value: f64) -> Self {
        Predicate { subject: Subject::Feature(name.into()), op, value: Operand::Number(value) }
    }

    pub fn counter(name: &str, op: CmpOp, value: f64) -> Self {
        Predicate { subject: Subject::Counter(name.into()), op, value: Operand::Number(value) }
    }

    pub fn label(name: &str, op: CmpOp, value: &str) -> Self {
        Predicate {
            subject: Subject::Feature(name.into()),
            op,
            value: Operand::Label(value.into()),
        }
    }

    /// Absent counters read as zero; absent features are an error.
    pub fn eval(&self, features: &FeatureMap, counters: &Counters) -> Result<Truth, PredicateError> {
        match &self.subject {
            Subject::Counter(name) => {
                let lhs = counters.get(name).copied().unwrap_or(0.0);
                match &self.value {
                    Operand::Number(rhs) => Ok(Truth { holds: self.op.holds(lhs, *rhs), confidence: 1.0 }),
                    Operand::Label(_) => Err(PredicateError::TypeMismatch(name.clone())),
                }
            }
            Subject::Feature(name) => {
                let fv = features
                    .get(name)
                    .ok_or_else(|| PredicateError::MissingFeature(name.clone()))?;
                let holds = match (&self.value, fv.as_number(), fv.as_label()) {
                    (Operand::Number(rhs), Some(lhs), _) => self.op.holds(lhs, *rhs),
                    (Operand::Label(rhs), _, Some(lhs)) => match self.op {
                        CmpOp::Eq => lhs == rhs,
                        CmpOp::Ne => lhs != rhs,
                        _ => return Err(PredicateError::TypeMismatch(name.clone())),
                    },
                    _ => return Err(PredicateError::TypeMismatch(name.clone())),
                };
                Ok(Truth { holds, confidence: fv.confidence })
            }
        }
    }

    /// Set of subject values satisfying this predicate, for disjointness checks.
    pub fn satisfying_set(&self) -> ValueSet {
        match &self.value {
            Operand::Number(v) => ValueSet::Numeric(match self.op {
                CmpOp::Ge => vec![Interval::new(*v, false, f64::INFINITY, true)],
                CmpOp::Gt => vec![Interval::new(*v, true, f64::INFINITY, true)],
                CmpOp::Le => vec![Interval::new(f64::NEG_INFINITY, true, *v, false)],
                CmpOp::Lt => vec![Interval::new(f64::NEG_INFINITY, true, *v, true)],
                CmpOp::Eq => vec![Interval::new(*v, false, *v, false)],
                CmpOp::Ne => vec![
                    Interval::new(f64::NEG_INFINITY, true, *v, true),
                    Interval::new(*v, true, f64::INFINITY, true),
                ],
            }),
            Operand::Label(l) => match self.op {
                CmpOp::Eq => ValueSet::LabelIs(l.clone()),
                CmpOp::Ne => ValueSet::LabelNot(vec![l.clone()]),
                _ => ValueSet::Empty,
            },
        }
    }
}

/// Interval with open/closed ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub lo_open: bool,
    pub hi: f64,
    pub hi_open: bool,
}

impl Interval {
    pub fn new(lo: f64, lo_open: bool, hi: f64, hi_open: bool) -> Self {
        Interval { lo, lo_open, hi, hi_open }
    }

    pub fn is_empty(&self) -> bool {
        self.lo > self.hi || (self.lo == self.hi && (self.lo_open || self.hi_open))
    }

    pub fn intersect(&self, other: &Interval) -> Interval {
        let (lo, lo_open) = if self.lo > other.lo {
            (self.lo, self.lo_open)
        } else if other.lo > self.lo {
            (other.lo, other.lo_open)
        } else {
            (self.lo, self.lo_open || other.lo_open)
        };
        let (hi, hi_open) = if self.hi < other.hi {
            (self.hi, self.hi_open)
        } else if other.hi < self.hi {
            (other.hi, other.hi_open)
        } else {
            (self.hi, self.hi_open || other.hi_open)
        };
        Interval { lo, lo_open, hi, hi_open }
    }
}

/// Satisfying set of one or more predicates on a single subject.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueSet {
    Numeric(Vec<Interval>),
    LabelIs(String),
    LabelNot(Vec<String>),
    Empty,
}

impl ValueSet {
    pub fn intersect(&self, other: &ValueSet) -> ValueSet {
        use ValueSet::*;
        match (self, other) {
            (Empty, _) | (_, Empty) => Empty,
            (Numeric(a), Numeric(b)) => {
                let parts: Vec<Interval> = a
                    .iter()
                    .flat_map(|x| b.iter().map(move |y| x.intersect(y)))
                    .filter(|i| !i.is_empty())
                    .collect();
                if parts.is_empty() {
                    Empty
                } else {
                    Numeric(parts)
                }
            }
            (LabelIs(a), LabelIs(b)) => {
                if a == b {
                    LabelIs(a.clone())
                } else {
                    Empty
                }
            }
            (LabelIs(a), LabelNot(ex)) | (LabelNot(ex), LabelIs(a)) => {
                if ex.contains(a) {
                    Empty
                } else {
                    LabelIs(a.clone())
                }
            }
            (LabelNot(x), LabelNot(y)) => LabelNot(x.iter().chain(y).cloned().collect()),
            // a number and a label cannot both describe one subject
            _ => Empty,
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, ValueSet::Empty)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Always,
    Never,
    All(Vec<Predicate>),
}

impl Condition {
    pub fn predicates(&self) -> &[Predicate] {
        match self {
            Condition::All(p) => p,
            _ => &[],
        }
    }

    /// Missing features make the condition false rather than an error.
    pub fn holds(&self, features: &FeatureMap, counters: &Counters) -> bool {
        match self {
            Condition::Always => true,
            Condition::Never => false,
            Condition::All(preds) => preds
                .iter()
                .all(|p| p.eval(features, counters).map(|t| t.holds).unwrap_or(false)),
        }
    }

    /// Per-subject satisfying sets (conjunction of this condition's predicates).
    fn subject_sets(&self) -> BTreeMap<Subject, ValueSet> {
        let mut out: BTreeMap<Subject, ValueSet> = BTreeMap::new();
        for p in self.predicates() {
            let set = p.satisfying_set();
            let merged = match out.get(&p.subject) {
                Some(prev) => prev.intersect(&set),
                None => set,
            };
            out.insert(p.subject.clone(), merged);
        }
        out
    }

    /// True when interval analysis on shared subjects proves the two
    /// conditions can never hold on the same valuation.
    pub fn provably_disjoint(&self, other: &Condition) -> bool {
        match (self, other) {
            (Condition::Never, _) | (_, Condition::Never) => true,
            _ => {
                let a = self.subject_sets();
                let b = other.subject_sets();
                a.values().any(ValueSet::is_empty)
                    || b.values().any(ValueSet::is_empty)
                    || a.iter()
                        .any(|(s, set)| b.get(s).is_some_and(|o| set.intersect(o).is_empty()))
            }
        }
    }

    pub fn subjects(&self) -> impl Iterator<Item = &Subject> {
        self.predicates().iter().map(|p| &p.subject)
    }
}

// ---- serde ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct RawPredicate {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counter: Option<String>,
    pub op: CmpOp,
    #[serde(alias = "threshold")]
    pub value: Operand,
}

impl TryFrom<RawPredicate> for Predicate {
    type Error = String;

    fn try_from(raw: RawPredicate) -> Result<Self, String> {
        let subject = match (raw.feature, raw.counter) {
            (Some(f), None) => Subject::Feature(f),
            (None, Some(c)) => Subject::Counter(c),
            _ => return Err("predicate needs exactly one of `feature` or `counter`".into()),
        };
        if let (Operand::Label(_), CmpOp::Ge | CmpOp::Gt | CmpOp::Le | CmpOp::Lt) = (&raw.value, raw.op) {
            return Err("labels only support `==` and `!=`".into());
        }
        if let Operand::Number(v) = raw.value {
            if !v.is_finite() {
                return Err("threshold must be finite".into());
            }
        }
        Ok(Predicate { subject, op: raw.op, value: raw.value })
    }
}

impl From<&Predicate> for RawPredicate {
    fn from(p: &Predicate) -> Self {
        let (feature, counter) = match &p.subject {
            Subject::Feature(f) => (Some(f.clone()), None),
            Subject::Counter(c) => (None, Some(c.clone())),
        };
        RawPredicate { feature, counter, op: p.op, value: p.value.clone() }
    }
}

impl Serialize for Predicate {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        RawPredicate::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Predicate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Predicate::try_from(RawPredicate::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum RawCondition {
    Keyword(String),
    One(Predicate),
    Many(Vec<Predicate>),
}

impl Serialize for Condition {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Condition::Always => s.serialize_str("always"),
            Condition::Never => s.serialize_str("never"),
            Condition::All(p) if p.len() == 1 => p[0].serialize(s),
            Condition::All(p) => p.serialize(s),
        }
    }
}

impl<'de> Deserialize<'de> for Condition {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match RawCondition::deserialize(d)? {
            RawCondition::Keyword(k) if k == "always" => Ok(Condition::Always),
            RawCondition::Keyword(k) if k == "never" => Ok(Condition::Never),
            RawCondition::Keyword(k) => Err(serde::de::Error::custom(format!(
                "unknown condition keyword `{k}` (expected \"always\" or \"never\")"
            ))),
            RawCondition::One(p) => Ok(Condition::All(vec![p])),
            RawCondition::Many(p) if p.is_empty() => Ok(Condition::Always),
            RawCondition::Many(p) => Ok(Condition::All(p)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureScope, FeatureValue};

    fn features(pairs: &[(&str, f64)]) -> FeatureMap {
        pairs
            .iter()
            .map(|(n, v)| (n.to_string(), FeatureValue::scalar(*n, *v, FeatureScope::TurnLocal)))
            .collect()
    }

    #[test]
    fn numeric_and_label_predicates() {
        let mut f = features(&[("frustration", 0.82)]);
        f.insert(
            "social_presence".into(),
            FeatureValue::label("social_presence", "media", FeatureScope::TurnLocal),
        );
        let c = Counters::new();
        assert!(Predicate::feature("frustration", CmpOp::Ge, 0.5).eval(&f, &c).unwrap().holds);
        assert!(!Predicate::label("social_presence", CmpOp::Eq, "conversation").eval(&f, &c).unwrap().holds);
        assert_eq!(
            Predicate::feature("warmth", CmpOp::Ge, 0.5).eval(&f, &c),
            Err(PredicateError::MissingFeature("warmth".into()))
        );
        assert_eq!(
            Predicate::feature("social_presence", CmpOp::Ge, 0.5).eval(&f, &c),
            Err(PredicateError::TypeMismatch("social_presence".into()))
        );
        assert!(Predicate::counter("absent", CmpOp::Le, 0.0).eval(&f, &c).unwrap().holds);
    }

    #[test]
    fn condition_json_forms() {
        let c: Condition = serde_json::from_str(r#""always""#).unwrap();
        assert_eq!(c, Condition::Always);
        let c: Condition =
            serde_json::from_str(r#"{"counter":"consecutive_rejections","op":">=","value":3}"#).unwrap();
        assert_eq!(c, Condition::All(vec![Predicate::counter("consecutive_rejections", CmpOp::Ge, 3.0)]));
        let c: Condition = serde_json::from_str(
            r#"[{"feature":"person_count","op":">","value":1},{"feature":"social_presence","op":"==","value":"conversation"}]"#,
        )
        .unwrap();
        assert_eq!(c.predicates().len(), 2);
        let back: Condition = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(serde_json::from_str::<Condition>(r#""sometimes""#).is_err());
        assert!(serde_json::from_str::<Condition>(r#"{"feature":"x","op":">=","value":"a"}"#).is_err());
    }

    #[test]
    fn disjointness_by_intervals() {
        let entry = Condition::All(vec![Predicate::counter("streak:fixation", CmpOp::Ge, 3.0)]);
        let exit = Condition::All(vec![Predicate::counter("streak:fixation", CmpOp::Lt, 3.0)]);
        assert!(entry.provably_disjoint(&exit));
        let touching = Condition::All(vec![Predicate::counter("streak:fixation", CmpOp::Le, 3.0)]);
        assert!(!entry.provably_disjoint(&touching));
        let unrelated = Condition::All(vec![Predicate::counter("streak:calm", CmpOp::Ge, 2.0)]);
        assert!(!entry.provably_disjoint(&unrelated));
        assert!(entry.provably_disjoint(&Condition::Never));
        assert!(!Condition::Always.provably_disjoint(&Condition::Always));
        let a = Condition::All(vec![Predicate::label("social_presence", CmpOp::Eq, "media")]);
        let b = Condition::All(vec![Predicate::label("social_presence", CmpOp::Eq, "quiet")]);
        assert!(a.provably_disjoint(&b));
        let ne = Condition::All(vec![Predicate::feature("x", CmpOp::Ne, 0.5)]);
        let eq = Condition::All(vec![Predicate::feature("x", CmpOp::Eq, 0.5)]);
        assert!(ne.provably_disjoint(&eq));
    }
}
