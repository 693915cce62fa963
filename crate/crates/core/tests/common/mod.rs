#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use guard_core::adapters::ScriptedPolicy;
use guard_core::condition::{CmpOp, Predicate};
use guard_core::config::ConfigError;
use guard_core::features::{FeatureDecl, FeatureExtractor, FeatureScope, Input};
use guard_core::harness::{run_scenario, LoadedScenario, Overrides, TrajectoryLog};
use guard_core::observer::{
    decide, DecideOutcome, Disposition, FallbackEntry, FallbackLibrary, Limits, Observer, Thresholds,
};
use guard_core::overlay::{
    parse_pack_file, Bound, Constraint, Overlay, OverlayKind, OverlayPack, RigidityPolicy,
};
use guard_core::state::InteractionState;
use guard_core::supervisor::SupervisorConfig;
use guard_core::{CandidateAction, FeatureRegistry, FeatureValue};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

pub const ANGRY: &str = "This is so frustrating, nothing works and I'm fed up.";
pub const COLD: &str = "Okay, I see. Try restarting the router.";
pub const WARM: &str = "I see, that sounds frustrating. Let's try restarting the router.";

pub fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn scenario_path(name: &str) -> PathBuf {
    configs_dir().join("scenarios").join(format!("{name}.json"))
}

pub fn shipped_scenarios() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(configs_dir().join("scenarios"))
        .expect("scenario dir")
        .map(|e| e.expect("entry").path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    out.sort();
    out
}

pub fn run_shipped(name: &str) -> TrajectoryLog {
    let loaded = LoadedScenario::load(&scenario_path(name), &Overrides::default()).expect("scenario loads");
    run_scenario(&loaded).expect("scenario runs")
}

const NUMERIC: [&str; 4] = ["x0", "x1", "x2", "guard"];

/// Reads four whitespace-separated numbers from the candidate text.
pub struct Numeric;

impl FeatureExtractor for Numeric {
    fn name(&self) -> &str {
        "numeric"
    }
    fn declared(&self) -> &[FeatureDecl] {
        const D: [FeatureDecl; 4] = [
            FeatureDecl { name: "x0", scope: FeatureScope::TurnLocal },
            FeatureDecl { name: "x1", scope: FeatureScope::TurnLocal },
            FeatureDecl { name: "x2", scope: FeatureScope::TurnLocal },
            FeatureDecl { name: "guard", scope: FeatureScope::TurnLocal },
        ];
        &D
    }
    fn inputs(&self) -> &[Input] {
        &[Input::CandidateContent]
    }
    fn extract(&self, _: &InteractionState, action: &CandidateAction) -> Result<Vec<FeatureValue>, String> {
        let nums = parse_numbers(&action.content).ok_or("not four numbers")?;
        Ok(NUMERIC
            .iter()
            .zip(nums)
            .map(|(n, v)| FeatureValue::scalar(*n, v, FeatureScope::TurnLocal))
            .collect())
    }
}

pub fn parse_numbers(text: &str) -> Option<[f64; 4]> {
    let v: Vec<f64> = text.split_whitespace().map(|t| t.parse().ok()).collect::<Option<_>>()?;
    v.try_into().ok()
}

pub fn numeric_registry() -> FeatureRegistry {
    FeatureRegistry::new(vec![Arc::new(Numeric)]).expect("one extractor")
}

/// A fuzzed overlay, kept as plain numbers for the oracle.
#[derive(Debug, Clone)]
pub struct OverlaySpec {
    pub feature: usize,
    pub at_least: bool,
    pub tau: f64,
    pub epsilon: f64,
    /// Active only when `guard >= phi`.
    pub guard: Option<f64>,
    pub weight: f64,
}

impl OverlaySpec {
    pub fn to_overlay(&self, i: usize) -> Overlay {
        let f = NUMERIC[self.feature];
        Overlay {
            id: format!("o{i}"),
            kind: OverlayKind::Prohibitory,
            activation: self.guard.map(|phi| Predicate::feature("guard", CmpOp::Ge, phi)).into_iter().collect(),
            constraint: Constraint {
                feature: f.into(),
                bound: Some(if self.at_least { Bound::AtLeast(self.tau) } else { Bound::AtMost(self.tau) }),
            },
            rigidity: RigidityPolicy::fixed(self.epsilon),
            transfer_target: None,
            permit_bonus: None,
            severity_weight: self.weight,
            tags: Vec::new(),
        }
    }

    /// Brute-force admissibility of one value vector.
    pub fn admits(&self, x: &[f64; 4]) -> bool {
        if self.guard.is_some_and(|phi| x[3] < phi) {
            return true;
        }
        let v = x[self.feature];
        let delta = if self.at_least { self.tau - v } else { v - self.tau };
        delta <= self.epsilon
    }
}

/// One fuzzed decision problem: overlays plus per-attempt candidate texts.
#[derive(Debug, Clone)]
pub struct Instance {
    pub overlays: Vec<OverlaySpec>,
    pub attempts: Vec<Vec<String>>,
    pub regen_bound: u32,
    pub per_call: usize,
    pub conf_threshold: f64,
}

fn q(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> Instance {
    let regen_bound = rng.gen_range(0..=3u32);
    let per_call = rng.gen_range(1..=3usize);
    let overlays = (0..rng.gen_range(1..=4))
        .map(|_| OverlaySpec {
            feature: rng.gen_range(0..3),
            at_least: rng.gen_bool(0.5),
            tau: q(rng.gen_range(0.0..=1.0)),
            epsilon: q(rng.gen_range(0.0..=0.3)),
            guard: rng.gen_bool(0.5).then(|| q(rng.gen_range(0.0..=1.0))),
            weight: q(rng.gen_range(0.05..=1.0)),
        })
        .collect();
    let attempts = (0..=regen_bound)
        .map(|_| {
            (0..per_call)
                .map(|_| (0..4).map(|_| format!("{:.3}", rng.gen_range(0.0..=1.0))).collect::<Vec<_>>().join(" "))
                .collect()
        })
        .collect();
    Instance { overlays, attempts, regen_bound, per_call, conf_threshold: 0.5 }
}

pub fn fallbacks() -> FallbackLibrary {
    FallbackLibrary::new(vec![FallbackEntry {
        id: "neutral".into(),
        condition: guard_core::condition::Condition::Always,
        action: "0 0 0 0".into(),
        resets_trajectory: false,
    }])
    .expect("valid library")
}

pub struct Run {
    pub outcome: DecideOutcome,
    pub calls: u32,
}

pub fn run_instance(inst: &Instance) -> Run {
    let pack = OverlayPack::new("fuzz", inst.overlays.iter().enumerate().map(|(i, o)| o.to_overlay(i)).collect());
    let observer = Observer::new(
        numeric_registry(),
        pack,
        Thresholds { conf_threshold: inst.conf_threshold, conflict_threshold: 1.0 },
    );
    let policy = inst
        .attempts
        .iter()
        .enumerate()
        .fold(ScriptedPolicy::new("0 0 0 0"), |p, (k, texts)| p.with(0, k as u32, texts.clone()));
    let limits = Limits {
        regen_bound: inst.regen_bound,
        candidates_per_call: inst.per_call,
        conflict_threshold: 1.0,
        ..Limits::default()
    };
    let state = InteractionState::new("fuzz", "m").record_user_turn("go", &BTreeSet::new());
    let outcome = decide(&state, &observer, &policy, "p", &fallbacks(), &limits, None, None);
    Run { outcome, calls: policy.calls() }
}

/// Every violation of enforcement soundness in one run, as messages.
pub fn soundness_violations(inst: &Instance, run: &Run) -> Vec<String> {
    let mut out = Vec::new();
    for a in &run.outcome.attempts {
        let brute: Vec<usize> = a
            .candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| {
                let x = parse_numbers(&c.action.content).expect("numeric candidate");
                inst.overlays.iter().all(|o| o.admits(&x))
            })
            .map(|(i, _)| i)
            .collect();
        if brute != a.admissible_indices {
            out.push(format!("attempt {}: observer {:?} vs brute force {brute:?}", a.attempt, a.admissible_indices));
        }
    }
    if let Disposition::Execute { attempt, index } = run.outcome.decision.disposition {
        let text = &inst.attempts[attempt as usize][index];
        let x = parse_numbers(text).expect("numeric");
        if !inst.overlays.iter().all(|o| o.admits(&x)) {
            out.push(format!("executed inadmissible candidate `{text}`"));
        }
        if run.outcome.executed.content != *text {
            out.push("executed action is not the chosen candidate".into());
        }
    }
    out
}

pub fn work_violation(inst: &Instance, run: &Run) -> Option<String> {
    let bound = inst.regen_bound + 1;
    (run.calls > bound || run.outcome.policy_calls != run.calls)
        .then(|| format!("{} calls (reported {}) with bound {bound}", run.calls, run.outcome.policy_calls))
}

#[derive(Deserialize)]
struct Expected {
    kind: String,
    line: usize,
    contains: String,
}

fn malformed_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/malformed")
}

fn parse_as(kind: &str, text: &str) -> Result<(), ConfigError> {
    let reg = FeatureRegistry::builtin();
    match kind {
        "packs" => parse_pack_file(text, &reg).map(drop),
        "fallbacks" => FallbackLibrary::parse(text, &reg).map(drop),
        "supervisor" => SupervisorConfig::parse(text, &reg).map(drop),
        other => panic!("unknown fixture kind {other}"),
    }
}

pub fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v
}

/// Checks every malformed fixture against the expected-position manifest.
pub fn check_malformed() -> Vec<String> {
    let manifest: BTreeMap<String, Expected> =
        serde_json::from_str(&std::fs::read_to_string(malformed_dir().join("expected.json")).unwrap()).unwrap();
    let mut failures = Vec::new();
    let files: Vec<PathBuf> =
        json_files(&malformed_dir()).into_iter().filter(|p| !p.ends_with("expected.json")).collect();
    if files.len() != 20 || manifest.len() != 20 {
        failures.push(format!("{} fixtures, {} manifest entries", files.len(), manifest.len()));
    }
    for f in files {
        let name = f.file_name().unwrap().to_string_lossy().to_string();
        let Some(exp) = manifest.get(&name) else {
            failures.push(format!("{name}: not in manifest"));
            continue;
        };
        match parse_as(&exp.kind, &std::fs::read_to_string(&f).unwrap()) {
            Ok(()) => failures.push(format!("{name}: accepted")),
            Err(e) => {
                if e.line() != exp.line || !e.to_string().contains(&exp.contains) {
                    failures.push(format!("{name}: got `{e}`, wanted line {} with `{}`", exp.line, exp.contains));
                }
            }
        }
    }
    failures
}
