//! JSONL trajectory logs with a digest chain.
//!
//! Line 1 is the header, then one line per user turn, then a footer. Every
//! line carries `prev_digest`, the digest of the previous line's bytes (the
//! header carries [`GENESIS`]).

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::engine::EngineConfig;
use super::metrics::Metrics;
use super::HarnessError;
use crate::digest::Digest64;
use crate::ensemble::PackUpdate;
use crate::features::FeatureMap;
use crate::observer::{AttemptRecord, ObserverDecision};
use crate::overlay::OverlayVerdict;
use crate::state::{CandidateAction, InteractionState};
use crate::supervisor::Gate;

pub const LOG_VERSION: &str = concat!("guard/", env!("CARGO_PKG_VERSION"));
pub const GENESIS: Digest64 = Digest64(0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub version: String,
    pub scenario_id: String,
    pub session_id: String,
    pub config: EngineConfig,
    pub config_digests: BTreeMap<String, Digest64>,
    pub prev_digest: Digest64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRecord {
    pub text: String,
    pub tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSwitchRecord {
    pub from: String,
    pub to: String,
    pub admitted: bool,
    /// Verdicts of the switch pack, empty when switches are unjudged.
    pub verdicts: Vec<OverlayVerdict>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: u64,
    pub prev_digest: Digest64,
    pub user: UserRecord,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlay_updates: Vec<PackUpdate>,
    pub mode_before: String,
    pub gate: Gate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode_switch: Option<ModeSwitchRecord>,
    /// Mode active when the utterance was judged.
    pub mode: String,
    /// That mode's overlay pack.
    pub pack: String,
    /// Packs whose verdicts appear in the attempts, in order.
    pub judge_packs: Vec<String>,
    pub attempts: Vec<AttemptRecord>,
    pub decision: ObserverDecision,
    pub executed: CandidateAction,
    pub features: FeatureMap,
    pub policy_calls: u32,
    pub state_digest: Digest64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footer {
    pub prev_digest: Digest64,
    pub turns: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Header(Header),
    Turn(Box<TurnRecord>),
    Footer(Footer),
}

impl LogLine {
    pub fn prev_digest(&self) -> Digest64 {
        match self {
            LogLine::Header(h) => h.prev_digest,
            LogLine::Turn(t) => t.prev_digest,
            LogLine::Footer(f) => f.prev_digest,
        }
    }

    /// Human label used in error messages.
    pub fn label(&self) -> String {
        match self {
            LogLine::Header(_) => "header".into(),
            LogLine::Turn(t) => format!("turn {}", t.turn),
            LogLine::Footer(_) => "footer".into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log serialization is infallible")
    }
}

/// A finished run: the parsed lines, their text, and the final state.
#[derive(Debug, Clone)]
pub struct TrajectoryLog {
    pub header: Header,
    pub records: Vec<TurnRecord>,
    pub footer: Footer,
    pub lines: Vec<String>,
    pub final_state: InteractionState,
}

impl TrajectoryLog {
    pub fn to_jsonl(&self) -> String {
        let mut out = self.lines.join("\n");
        out.push('\n');
        out
    }

    /// Digest over the whole log text; the golden value for a scenario.
    pub fn digest(&self) -> Digest64 {
        Digest64::of_bytes(self.to_jsonl().as_bytes())
    }
}

/// Parses JSONL and verifies the digest chain. A chain break at line `i+1`
/// names line `i`, the record whose bytes no longer match.
pub fn chain_lines(text: &str) -> Result<Vec<LogLine>, HarnessError> {
    let raw: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    let mut parsed = Vec::with_capacity(raw.len());
    for (i, line) in raw.iter().enumerate() {
        let entry: LogLine = serde_json::from_str(line).map_err(|e| {
            HarnessError::invariant(Some(format!("line {}", i + 1)), format!("malformed record: {e}"))
        })?;
        parsed.push(entry);
    }
    let mut prev = GENESIS;
    for (i, entry) in parsed.iter().enumerate() {
        if entry.prev_digest() != prev {
            let culprit = if i == 0 { entry.label() } else { parsed[i - 1].label() };
            return Err(HarnessError::invariant(
                Some(culprit),
                format!("digest chain broken at line {} (record altered)", i + 1),
            ));
        }
        prev = Digest64::of_bytes(raw[i].as_bytes());
    }
    Ok(parsed)
}
