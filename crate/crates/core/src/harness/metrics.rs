use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::log::TurnRecord;
use crate::observer::Disposition;
use crate::supervisor::Gate;

/// Aggregates over one log. Rates divide by `turns` (all user turns,
/// gated ones included).
///
/// - `violation_attempts`: attempts that ended in a rejection
/// - `regenerations`: sum of `attempts_used`
/// - `fallbacks`, `defers`: turns with that disposition (gated turns excluded)
/// - `skipped_turns`: turns gated off
/// - `mode_switches`: admitted switches
/// - `overlay_activations`: activated verdicts per overlay over every judged candidate
/// - `rejections`: attempts per rejection reason
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub turns: u64,
    pub violation_attempts: u64,
    pub regenerations: u64,
    pub regen_rate: f64,
    pub fallbacks: u64,
    pub fallback_rate: f64,
    pub defers: u64,
    pub skipped_turns: u64,
    pub mode_switches: u64,
    pub policy_calls: u64,
    pub overlay_activations: BTreeMap<String, u64>,
    pub rejections: BTreeMap<String, u64>,
}

pub fn metrics(records: &[TurnRecord]) -> Metrics {
    let mut m = Metrics { turns: records.len() as u64, ..Metrics::default() };
    for r in records {
        m.policy_calls += u64::from(r.policy_calls);
        if r.mode_switch.as_ref().is_some_and(|s| s.admitted) {
            m.mode_switches += 1;
        }
        if matches!(r.gate, Gate::Skip(_)) {
            m.skipped_turns += 1;
            continue;
        }
        m.regenerations += u64::from(r.decision.attempts_used);
        match r.decision.disposition {
            Disposition::Fallback { .. } => m.fallbacks += 1,
            Disposition::Defer => m.defers += 1,
            _ => {}
        }
        for a in &r.attempts {
            if let Some(reason) = a.rejection {
                m.violation_attempts += 1;
                *m.rejections.entry(reason.as_str().to_string()).or_default() += 1;
            }
            for c in &a.candidates {
                for v in c.verdicts.iter().filter(|v| v.activated) {
                    *m.overlay_activations.entry(v.overlay_id.clone()).or_default() += 1;
                }
            }
        }
    }
    if m.turns > 0 {
        let turns = m.turns as f64;
        m.regen_rate = m.regenerations as f64 / turns;
        m.fallback_rate = m.fallbacks as f64 / turns;
    }
    m
}
