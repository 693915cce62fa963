use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn scenario(name: &str) -> PathBuf {
    configs().join("scenarios").join(format!("{name}.json"))
}

fn guard(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guard")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run_to(name: &str, out: &Path) -> Output {
    guard(&["run", "--scenario", scenario(name).to_str().unwrap(), "--out", out.to_str().unwrap()])
}

/// Copies a shipped scenario into `dir` with absolute config paths.
fn relocated(name: &str, dir: &Path, edit: impl FnOnce(&mut serde_json::Value)) -> PathBuf {
    let base = configs().join("scenarios");
    let mut v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(scenario(name)).unwrap()).unwrap();
    let abs = |rel: &str| base.join(rel).canonicalize().unwrap().to_string_lossy().into_owned();
    if let Some(packs) = v["packs"].as_array_mut() {
        for p in packs {
            *p = abs(p.as_str().unwrap()).into();
        }
    }
    v["fallbacks"] = abs(v["fallbacks"].as_str().unwrap()).into();
    v.as_object_mut().unwrap().remove("expected_digest");
    edit(&mut v);
    let path = dir.join(format!("{name}.json"));
    std::fs::write(&path, v.to_string()).unwrap();
    path
}

#[test]
fn shipped_configs_check_clean() {
    let o = guard(&["check-config", configs().to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.lines().count() >= 20, "{stdout}");
    assert!(stdout.lines().all(|l| l.starts_with("ok ")), "{stdout}");
}

#[test]
fn malformed_config_exits_one_with_position() {
    let f = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/malformed/13_trailing_comma.json");
    let o = guard(&["check-config", f.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));
}

#[test]
fn seeded_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    for out in [&a, &b] {
        let o = guard(&["run", "--scenario", scenario("empathy_regen").to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn tampered_log_replay_exits_two_naming_the_turn() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("reset.jsonl");
    assert!(run_to("reset_modes", &log).status.success());
    let ok = guard(&["replay", "--log", log.to_str().unwrap()]);
    assert!(ok.status.success(), "{}", stderr(&ok));
    let text = std::fs::read_to_string(&log).unwrap();
    std::fs::write(&log, text.replacen("Breathe out gently now.", "Breathe out quickly now.", 1)).unwrap();
    let o = guard(&["replay", "--log", log.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("turn 3"), "{}", stderr(&o));
}

#[test]
fn metrics_prints_json() {
    let dir = tempfile::tempdir().unwrap();
    let log = dir.path().join("e.jsonl");
    assert!(run_to("empathy_regen", &log).status.success());
    let o = guard(&["metrics", "--log", log.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["policy_calls"], 2);
    assert_eq!(v["turns"], 1);
}

#[test]
fn unknown_rollout_policy_is_an_adapter_error() {
    let dir = tempfile::tempdir().unwrap();
    let path = relocated("lookahead_tree", dir.path(), |v| {
        v["lookahead"]["config"]["rollout_policy"] = "oracle".into();
    });
    let o = guard(&["run", "--scenario", path.to_str().unwrap(), "--out", dir.path().join("x.jsonl").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("rollout"), "{}", stderr(&o));
}

#[test]
fn parallel_batch_writes_one_log_per_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let names = ["empathy_regen", "gating", "reset_modes", "ensemble"];
    let mut args = vec!["run".to_string()];
    for n in names {
        args.extend(["--scenario".into(), scenario(n).to_string_lossy().into_owned()]);
    }
    args.extend(["--out".into(), dir.path().to_string_lossy().into_owned(), "--parallel".into(), "3".into()]);
    let o = guard(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(o.status.success(), "{}", stderr(&o));
    for n in names {
        let log = dir.path().join(format!("{n}.jsonl"));
        assert!(log.exists(), "{n}");
        let r = guard(&["replay", "--log", log.to_str().unwrap()]);
        assert!(r.status.success(), "{n}: {}", stderr(&r));
        assert!(stderr(&o).contains(&format!("{n}:")), "{}", stderr(&o));
    }
}
