//! Scenario files: scripted user turns plus references to the engine's
//! config files (paths relative to the scenario file).

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::engine::{EngineConfig, EnsembleSpec, LookaheadSpec, Session};
use super::log::TrajectoryLog;
use super::replay::replay;
use super::HarnessError;
use crate::adapters::{
    BasePolicy, FixtureTransport, HttpTransport, RemoteChatPolicy, RemoteConfig, ScriptSpec, ScriptedPolicy,
    API_KEY_ENV,
};
use crate::config::parse_json;
use crate::digest::Digest64;
use crate::ensemble::PackUpdate;
use crate::features::FeatureRegistry;
use crate::observer::{FallbackLibrary, Limits};
use crate::overlay::parse_pack_file;
use crate::supervisor::SupervisorConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserTurnSpec {
    pub text: String,
    #[serde(default)]
    pub tags: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub overlay_updates: Vec<PackUpdate>,
}

impl UserTurnSpec {
    pub fn new(text: &str, tags: &[&str]) -> Self {
        UserTurnSpec {
            text: text.into(),
            tags: tags.iter().map(|t| t.to_string()).collect(),
            overlay_updates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PolicySpec {
    Scripted(ScriptSpec),
    /// Chat-completion client; with `fixture`, recorded responses replace HTTP.
    Remote {
        config: RemoteConfig,
        #[serde(default)]
        fixture: Option<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub id: String,
    #[serde(default)]
    pub session_id: Option<String>,
    /// Pack files.
    pub packs: Vec<String>,
    #[serde(default)]
    pub supervisor: Option<String>,
    /// Pack of the single implicit mode when there is no supervisor.
    #[serde(default)]
    pub mode_pack: Option<String>,
    #[serde(default = "default_profile")]
    pub profile: String,
    pub fallbacks: String,
    #[serde(default)]
    pub limits: Limits,
    pub policy: PolicySpec,
    #[serde(default)]
    pub lookahead: Option<LookaheadSpec>,
    #[serde(default)]
    pub ensemble: Option<EnsembleSpec>,
    pub user_turns: Vec<UserTurnSpec>,
    /// Digest of the full log text from the first verified run.
    #[serde(default)]
    pub expected_digest: Option<Digest64>,
}

fn default_profile() -> String {
    "default".into()
}

/// Command-line replacements for the files a scenario names.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub overlays: Option<PathBuf>,
    pub supervisor: Option<PathBuf>,
    pub fallbacks: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub path: PathBuf,
    pub file: ScenarioFile,
    pub config: EngineConfig,
    pub pack_files: BTreeMap<String, PathBuf>,
    pub warnings: Vec<String>,
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

fn config_err(path: &Path) -> impl Fn(crate::config::ConfigError) -> HarnessError + '_ {
    move |source| HarnessError::Config { path: path.display().to_string(), source }
}

impl LoadedScenario {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, HarnessError> {
        let registry = FeatureRegistry::builtin();
        let text = read(path)?;
        let file: ScenarioFile = parse_json(&text).map_err(config_err(path))?;
        if file.user_turns.is_empty() {
            return Err(HarnessError::Validation(format!("{}: user_turns must be non-empty", path.display())));
        }
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &str| base.join(p);

        let pack_paths: Vec<PathBuf> = match &overrides.overlays {
            Some(p) => vec![p.clone()],
            None => file.packs.iter().map(|p| resolve(p)).collect(),
        };
        let mut packs = Vec::new();
        let mut pack_files = BTreeMap::new();
        for p in &pack_paths {
            for pack in parse_pack_file(&read(p)?, &registry).map_err(config_err(p))? {
                pack_files.insert(pack.id.clone(), p.clone());
                packs.push(pack);
            }
        }

        let supervisor_path = overrides.supervisor.clone().or_else(|| file.supervisor.as_deref().map(resolve));
        let (supervisor, mut warnings) = match supervisor_path {
            Some(p) => SupervisorConfig::parse(&read(&p)?, &registry).map_err(config_err(&p))?,
            None => {
                let pack = file
                    .mode_pack
                    .clone()
                    .or_else(|| file.ensemble.as_ref().and_then(|e| e.pack_ids().first().cloned()))
                    .or_else(|| packs.first().map(|p| p.id.clone()))
                    .ok_or_else(|| HarnessError::Validation("scenario loads no packs".into()))?;
                (SupervisorConfig::single("default", &pack, &file.profile), Vec::new())
            }
        };

        let fallback_path = overrides.fallbacks.clone().unwrap_or_else(|| resolve(&file.fallbacks));
        let fallbacks = FallbackLibrary::parse(&read(&fallback_path)?, &registry).map_err(config_err(&fallback_path))?;

        let config = EngineConfig {
            packs,
            supervisor,
            fallbacks,
            limits: file.limits,
            lookahead: file.lookahead.clone(),
            ensemble: file.ensemble.clone(),
        };
        warnings.extend(config.validate(&registry)?);
        for w in &warnings {
            log::warn!("{}: {w}", path.display());
        }
        Ok(LoadedScenario { path: path.to_path_buf(), file, config, pack_files, warnings })
    }

    pub fn build_policy(&self) -> Result<Box<dyn BasePolicy>, HarnessError> {
        match &self.file.policy {
            PolicySpec::Scripted(spec) => Ok(Box::new(ScriptedPolicy::from_spec(spec))),
            PolicySpec::Remote { config, fixture: Some(f) } => {
                let p = self.path.parent().unwrap_or(Path::new(".")).join(f);
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| HarnessError::Adapter(format!("fixture {}: {e}", p.display())))?;
                let transport = FixtureTransport::from_json(&text)
                    .map_err(|e| HarnessError::Adapter(format!("fixture {}: {e}", p.display())))?;
                let key = std::env::var(API_KEY_ENV).unwrap_or_else(|_| "fixture".into());
                Ok(Box::new(RemoteChatPolicy::with_api_key(config.clone(), Box::new(transport), key)))
            }
            PolicySpec::Remote { config, fixture: None } => {
                Ok(Box::new(RemoteChatPolicy::from_env(config.clone(), Box::new(HttpTransport))))
            }
        }
    }

    pub fn session_id(&self) -> String {
        self.file.session_id.clone().unwrap_or_else(|| format!("{}-session", self.file.id))
    }
}

/// Runs the scenario, re-verifies the log, and checks the golden digest.
pub fn run_scenario(scenario: &LoadedScenario) -> Result<TrajectoryLog, HarnessError> {
    if let Some(la) = &scenario.config.lookahead {
        if la.config.rollout_policy != "scripted" {
            return Err(HarnessError::Adapter(format!("unknown rollout policy `{}`", la.config.rollout_policy)));
        }
    }
    let policy = scenario.build_policy()?;
    let mut session = Session::new(&scenario.config, policy.as_ref());
    session.pack_files = scenario.pack_files.clone();
    let log = session.run(&scenario.file.id, &scenario.session_id(), &scenario.file.user_turns)?;
    replay(&log)?;
    if let Some(expected) = scenario.file.expected_digest {
        let got = log.digest();
        if got != expected {
            return Err(HarnessError::invariant(
                None,
                format!("log digest {got} differs from the golden {expected}"),
            ));
        }
    }
    Ok(log)
}
