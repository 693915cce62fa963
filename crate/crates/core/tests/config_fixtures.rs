mod common;

use common::*;
use guard_core::harness::{LoadedScenario, Overrides};
use guard_core::observer::FallbackLibrary;
use guard_core::overlay::{packs_to_json, parse_pack_file};
use guard_core::supervisor::SupervisorConfig;
use guard_core::FeatureRegistry;

#[test]
fn malformed_fixtures_fail_at_their_position() {
    let failures = check_malformed();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn shipped_packs_round_trip() {
    let reg = FeatureRegistry::builtin();
    for f in json_files(&configs_dir().join("packs")) {
        let packs = parse_pack_file(&std::fs::read_to_string(&f).unwrap(), &reg).unwrap();
        let text = packs_to_json(&packs);
        let back = parse_pack_file(&text, &reg).unwrap();
        assert_eq!(back, packs, "{}", f.display());
        assert_eq!(packs_to_json(&back), text);
    }
}

#[test]
fn shipped_fallbacks_and_supervisors_round_trip() {
    let reg = FeatureRegistry::builtin();
    for f in json_files(&configs_dir().join("fallbacks")) {
        let lib = FallbackLibrary::parse(&std::fs::read_to_string(&f).unwrap(), &reg).unwrap();
        let text = serde_json::to_string(&lib).unwrap();
        assert_eq!(FallbackLibrary::parse(&text, &reg).unwrap(), lib);
    }
    for f in json_files(&configs_dir().join("supervisors")) {
        let (cfg, warnings) = SupervisorConfig::parse(&std::fs::read_to_string(&f).unwrap(), &reg).unwrap();
        assert!(warnings.is_empty(), "{warnings:?}");
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(SupervisorConfig::parse(&text, &reg).unwrap().0, cfg);
    }
}

#[test]
fn shipped_scenarios_load_without_warnings() {
    for p in shipped_scenarios() {
        let loaded = LoadedScenario::load(&p, &Overrides::default()).unwrap();
        assert!(loaded.warnings.is_empty(), "{}: {:?}", p.display(), loaded.warnings);
    }
}

#[test]
fn overlapping_entry_and_exit_warns() {
    let text = r#"{
      "modes": [
        {"id": "a", "overlay_pack": "p", "policy_profile": "x",
         "entry_condition": {"counter": "streak:calm", "op": ">=", "value": 1},
         "exit_condition": {"counter": "streak:calm", "op": ">=", "value": 2}}
      ],
      "initial_mode": "a"
    }"#;
    let (_, warnings) = SupervisorConfig::parse(text, &FeatureRegistry::builtin()).unwrap();
    assert_eq!(warnings.len(), 1);
}
