use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guard_core::adapters::FixtureTransport;
use guard_core::harness::{
    chain_lines, metrics, replay_text, run_scenario, HarnessError, LoadedScenario, LogLine, Overrides,
    TrajectoryLog,
};
use guard_core::observer::FallbackLibrary;
use guard_core::overlay::parse_pack_file;
use guard_core::supervisor::SupervisorConfig;
use guard_core::FeatureRegistry;

#[derive(Parser)]
#[command(name = "guard", version, about = "Run, audit and validate guarded interaction scenarios")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run scenarios and write their trajectory logs.
    Run(RunArgs),
    /// Validate JSON config files (directories are searched recursively).
    CheckConfig {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
    /// Re-verify a log: digest chain, recomputed verdicts and invariants.
    Replay {
        #[arg(long)]
        log: PathBuf,
    },
    /// Print the metrics report of a log as JSON.
    Metrics {
        #[arg(long)]
        log: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long = "scenario", required = true)]
    scenarios: Vec<PathBuf>,
    /// Replaces the scenario's pack files.
    #[arg(long)]
    overlays: Option<PathBuf>,
    #[arg(long)]
    supervisor: Option<PathBuf>,
    #[arg(long)]
    fallbacks: Option<PathBuf>,
    /// Log file for one scenario, directory for several. Stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Accepted for adapters that declare randomness; the shipped ones do not.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => run(&args),
        Command::CheckConfig { paths } => check_config(&paths),
        Command::Replay { log } => report(read(&log).and_then(|t| replay_text(&t))),
        Command::Metrics { log } => report(read(&log).and_then(|t| log_metrics(&t))),
    };
    ExitCode::from(code as u8)
}

fn read(path: &Path) -> Result<String, HarnessError> {
    std::fs::read_to_string(path).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

fn write(path: &Path, text: &str) -> Result<(), HarnessError> {
    std::fs::write(path, text).map_err(|source| HarnessError::Io { path: path.display().to_string(), source })
}

fn fail(e: &HarnessError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn report<T: serde::Serialize>(result: Result<T, HarnessError>) -> i32 {
    match result {
        Ok(v) => {
            println!("{}", serde_json::to_string_pretty(&v).expect("report serializes"));
            0
        }
        Err(e) => fail(&e),
    }
}

fn log_metrics(text: &str) -> Result<guard_core::harness::Metrics, HarnessError> {
    let lines = chain_lines(text)?;
    let records: Vec<_> = lines
        .iter()
        .filter_map(|l| match l {
            LogLine::Turn(t) => Some(t.as_ref().clone()),
            _ => None,
        })
        .collect();
    let m = metrics(&records);
    match lines.last() {
        Some(LogLine::Footer(f)) if f.metrics == m => Ok(m),
        Some(LogLine::Footer(_)) => Err(HarnessError::Invariant {
            turn: Some("footer".into()),
            message: "embedded metrics differ from the recomputation".into(),
        }),
        _ => Err(HarnessError::Invariant { turn: None, message: "log has no footer".into() }),
    }
}

fn run_one(path: &Path, overrides: &Overrides) -> Result<TrajectoryLog, HarnessError> {
    let scenario = LoadedScenario::load(path, overrides)?;
    run_scenario(&scenario)
}

fn run(args: &RunArgs) -> i32 {
    log::debug!("seed {}", args.seed);
    let overrides = Overrides {
        overlays: args.overlays.clone(),
        supervisor: args.supervisor.clone(),
        fallbacks: args.fallbacks.clone(),
    };
    let many = args.scenarios.len() > 1;
    if many {
        let Some(dir) = &args.out else {
            eprintln!("error: --out DIR is required with several scenarios");
            return 1;
        };
        if let Err(source) = std::fs::create_dir_all(dir) {
            return fail(&HarnessError::Io { path: dir.display().to_string(), source });
        }
    }

    let workers = args.parallel.max(1);
    let mut results: Vec<Option<Result<TrajectoryLog, HarnessError>>> =
        args.scenarios.iter().map(|_| None).collect();
    for (paths, slots) in args.scenarios.chunks(workers).zip(results.chunks_mut(workers)) {
        std::thread::scope(|s| {
            for (path, slot) in paths.iter().zip(slots.iter_mut()) {
                let overrides = &overrides;
                s.spawn(move || *slot = Some(run_one(path, overrides)));
            }
        });
    }

    let mut code = 0;
    for (path, result) in args.scenarios.iter().zip(results) {
        let result = result.expect("every scenario ran").and_then(|log| {
            let text = log.to_jsonl();
            match (&args.out, many) {
                (Some(dir), true) => write(&dir.join(format!("{}.jsonl", log.header.scenario_id)), &text)?,
                (Some(file), false) => write(file, &text)?,
                (None, _) => print!("{text}"),
            }
            Ok(log)
        });
        match result {
            Ok(log) => eprintln!(
                "{}: {} turns, digest {}",
                log.header.scenario_id,
                log.footer.turns,
                log.digest()
            ),
            Err(e) => {
                eprintln!("{}: failed", path.display());
                let c = fail(&e);
                if code == 0 {
                    code = c;
                }
            }
        }
    }
    code
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ConfigKind {
    Packs,
    Fallbacks,
    Supervisor,
    Scenario,
    Fixture,
}

fn kind_of(text: &str) -> Option<ConfigKind> {
    let value: serde_json::Value = serde_json::from_str(text).ok()?;
    let obj = value.as_object()?;
    let has = |k: &str| obj.contains_key(k);
    Some(if has("user_turns") {
        ConfigKind::Scenario
    } else if has("modes") {
        ConfigKind::Supervisor
    } else if has("entries") {
        ConfigKind::Fallbacks
    } else if has("responses") {
        ConfigKind::Fixture
    } else {
        ConfigKind::Packs
    })
}

fn check_file(path: &Path, registry: &FeatureRegistry) -> Result<ConfigKind, HarnessError> {
    let text = read(path)?;
    let err = |source| HarnessError::Config { path: path.display().to_string(), source };
    let kind = kind_of(&text).unwrap_or(ConfigKind::Packs);
    match kind {
        ConfigKind::Packs => parse_pack_file(&text, registry).map(drop).map_err(err)?,
        ConfigKind::Fallbacks => FallbackLibrary::parse(&text, registry).map(drop).map_err(err)?,
        ConfigKind::Supervisor => SupervisorConfig::parse(&text, registry).map(drop).map_err(err)?,
        ConfigKind::Fixture => FixtureTransport::from_json(&text).map(drop).map_err(err)?,
        ConfigKind::Scenario => LoadedScenario::load(path, &Overrides::default()).map(drop)?,
    }
    Ok(kind)
}

fn json_files(path: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?.map(|e| e.map(|e| e.path())).collect::<Result<_, _>>()?;
        entries.sort();
        for e in entries {
            if e.is_dir() || e.extension().is_some_and(|x| x == "json") {
                json_files(&e, out)?;
            }
        }
    } else {
        out.push(path.to_path_buf());
    }
    Ok(())
}

fn check_config(paths: &[PathBuf]) -> i32 {
    let registry = FeatureRegistry::builtin();
    let mut files = Vec::new();
    for p in paths {
        if let Err(source) = json_files(p, &mut files) {
            return fail(&HarnessError::Io { path: p.display().to_string(), source });
        }
    }
    let mut code = 0;
    for f in &files {
        match check_file(f, &registry) {
            Ok(kind) => println!("ok {} ({kind:?})", f.display()),
            Err(e) => {
                code = code.max(fail(&e));
            }
        }
    }
    code
}
