use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use serde::Deserialize;

use evoloop::agent::TaskSpec;
use evoloop::environment::{SandboxConfig, TestStatus};
use evoloop::evolution::{
    evolve, load_run, snapshot_tree_digests, EvolutionConfig, EvolutionRun, Termination, SCRIPT_FILE,
};
use evoloop::metrics::{compute_accuracy, load_bindings, render_report, ReportFormat};
use evoloop::provider::{ChatProvider, LiveConfig, LiveProvider, Script, ScriptedProvider};

#[derive(Parser)]
#[command(name = "evoloop", version, about = "Self-evolving multi-agent code generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the evolution loop described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run directory; must be absent or empty.
        #[arg(long)]
        out: PathBuf,
        /// Requirement bindings (TOML) for the accuracy report.
        #[arg(long)]
        bindings: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<u32>,
        /// Print the report as JSON instead of text.
        #[arg(long)]
        json: bool,
    },
    /// Show one iteration of a finished or interrupted run.
    Inspect { run_dir: PathBuf, k: u32 },
    /// Re-execute a run from its recorded script and compare the results.
    Replay {
        run_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    task: TaskSpec,
    live: Option<LiveSection>,
    scripted: Option<ScriptedSection>,
    #[serde(default)]
    evolution: EvolutionConfig,
    /// Replaces `evolution.sandbox` when present.
    sandbox: Option<SandboxConfig>,
    bindings: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LiveSection {
    /// Overrides EVOLOOP_API_BASE.
    api_base: Option<String>,
    request_timeout: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptedSection {
    script: PathBuf,
}

enum ProviderChoice {
    Live(LiveSection),
    Scripted(PathBuf),
}

struct Loaded {
    task: TaskSpec,
    provider: ProviderChoice,
    evolution: EvolutionConfig,
    bindings: Option<PathBuf>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn load_config(path: &Path) -> Result<Loaded> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let file: RunConfigFile = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let base = if base.as_os_str().is_empty() {
        Path::new(".")
    } else {
        base
    };
    let base = base
        .canonicalize()
        .with_context(|| format!("cannot resolve {}", base.display()))?;

    let provider = match (file.live, file.scripted) {
        (Some(live), None) => ProviderChoice::Live(live),
        (None, Some(s)) => ProviderChoice::Scripted(resolve(&base, &s.script)),
        (Some(_), Some(_)) => bail!("config selects both [live] and [scripted]; pick one"),
        (None, None) => bail!("config selects no provider; add [live] or [scripted]"),
    };
    let mut evolution = file.evolution;
    if let Some(sandbox) = file.sandbox {
        evolution.sandbox = sandbox;
    }
    // A runner given as a relative path is relative to the config file, not
    // to the sandbox it will run in.
    if let Some(first) = evolution.sandbox.runner.first_mut() {
        if first.contains('/') && Path::new(first.as_str()).is_relative() {
            let joined = base.join(&*first);
            *first = joined.canonicalize().unwrap_or(joined).to_string_lossy().into_owned();
        }
    }
    if let Some(dir) = &evolution.sandbox.working_dir {
        evolution.sandbox.working_dir = Some(resolve(&base, dir));
    }
    Ok(Loaded {
        task: file.task,
        provider,
        evolution,
        bindings: file.bindings.map(|b| resolve(&base, &b)),
    })
}

fn make_provider(choice: ProviderChoice) -> Result<Box<dyn ChatProvider>> {
    Ok(match choice {
        ProviderChoice::Scripted(path) => Box::new(ScriptedProvider::new(&read_script(&path)?)),
        ProviderChoice::Live(live) => {
            let mut cfg = match live.api_base {
                Some(base) => {
                    let key = std::env::var(evoloop::provider::API_KEY_ENV)
                        .map_err(|_| anyhow!("{} is not set", evoloop::provider::API_KEY_ENV))?;
                    LiveConfig {
                        api_base: base,
                        api_key: key,
                        request_timeout: Duration::from_secs(300),
                        retry: Default::default(),
                    }
                }
                None => LiveConfig::from_env()?,
            };
            if let Some(t) = live.request_timeout {
                cfg.request_timeout = Duration::try_from_secs_f64(t).context("invalid request_timeout")?;
            }
            Box::new(LiveProvider::new(cfg)?)
        }
    })
}

fn read_script(path: &Path) -> Result<Script> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read script {}", path.display()))?;
    Script::parse(&text).with_context(|| format!("invalid script {}", path.display()))
}

fn exit_for(t: Termination) -> ExitCode {
    match t {
        Termination::Converged => ExitCode::SUCCESS,
        Termination::BudgetExhausted => ExitCode::from(2),
        Termination::Failed => ExitCode::FAILURE,
    }
}

fn print_report(run: &EvolutionRun, bindings: Option<&Path>, json: bool) -> Result<()> {
    let Some(last) = run.last() else {
        println!("no iteration finished");
        return Ok(());
    };
    match bindings {
        Some(path) => {
            let bindings = load_bindings(path)?;
            let acc = compute_accuracy(&bindings, &last.feedback.reports)?;
            let format = if json {
                ReportFormat::Structured
            } else {
                ReportFormat::Text
            };
            print!("{}", render_report(run, &acc, format));
        }
        None => {
            for s in &run.snapshots {
                println!(
                    "iteration {}: {}/{} tests passed",
                    s.k,
                    s.feedback.count(TestStatus::Pass),
                    s.feedback.total_cases()
                );
            }
            let (passed, total) = run.final_pass_counts();
            println!("termination: {}", run.termination);
            println!("test pass rate: {passed}/{total}");
        }
    }
    Ok(())
}

fn cmd_run(
    config: &Path,
    out: &Path,
    bindings: Option<PathBuf>,
    max_iterations: Option<u32>,
    json: bool,
) -> Result<ExitCode> {
    let loaded = load_config(config)?;
    if out.exists() && fs::read_dir(out)?.next().is_some() {
        bail!("refusing to write into non-empty directory {}", out.display());
    }
    let mut cfg = loaded.evolution;
    if let Some(k) = max_iterations {
        cfg.max_iterations = k;
    }
    cfg.root = out.to_path_buf();
    let bindings = bindings.or(loaded.bindings);
    let provider = make_provider(loaded.provider)?;
    let run = evolve(provider.as_ref(), &loaded.task, &cfg)?;
    print_report(&run, bindings.as_deref(), json)?;
    Ok(exit_for(run.termination))
}

fn cmd_inspect(run_dir: &Path, k: u32) -> Result<ExitCode> {
    let run = load_run(run_dir)?;
    let snap = run.snapshots.get(k as usize).ok_or_else(|| {
        anyhow!(
            "MissingIteration: iteration {k} does not exist; the run has {} iteration(s)",
            run.snapshots.len()
        )
    })?;
    println!("iteration {k} of {} ({})", run.snapshots.len(), run.termination);
    println!("## network");
    print!("{}", snap.network.to_canonical_text());
    println!("## tests");
    println!(
        "{}/{} passed",
        snap.feedback.count(TestStatus::Pass),
        snap.feedback.total_cases()
    );
    for suite in snap.feedback.failing_suites() {
        println!("failing suite: {suite}");
    }
    if let Some(rem) = &snap.remediation {
        println!("remediation: {:?} on {}", rem.policy, rem.suites.join(", "));
    }
    println!("## gradient");
    match &snap.gradient {
        None => println!("(none)"),
        Some(g) => {
            println!("kind: {}", g.kind.as_str());
            for d in &g.diagnoses {
                println!("{}: {}", d.filename, d.functions.join(", "));
            }
        }
    }
    if let Some(u) = &snap.update {
        println!("## update");
        println!("removed: {}", u.removed.join(", "));
        println!("added: {}", u.added.join(", "));
        println!("rewritten: {}", u.rewritten.join(", "));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(run_dir: &Path, out: &Path) -> Result<ExitCode> {
    let script_path = run_dir.join(SCRIPT_FILE);
    if !script_path.is_file() {
        bail!("{} has no recorded script", run_dir.display());
    }
    let original = load_run(run_dir)?;
    let script = read_script(&script_path)?;
    let mut cfg = original.config.clone();
    cfg.root = out.to_path_buf();
    let provider = ScriptedProvider::new(&script);
    let outcome = evolve(&provider, &original.task, &cfg);

    let before = snapshot_tree_digests(run_dir)?;
    let after = snapshot_tree_digests(out)?;
    if before == after {
        println!("replay identical: {} files", before.len());
        return Ok(ExitCode::SUCCESS);
    }
    if let Err(e) = &outcome {
        eprintln!("replay stopped: {e}");
    }
    let differing: BTreeSet<&String> = before
        .keys()
        .chain(after.keys())
        .filter(|k| before.get(*k) != after.get(*k))
        .collect();
    eprintln!("DigestMismatch: {} file(s) differ", differing.len());
    for path in differing {
        eprintln!("  {path}");
    }
    Ok(ExitCode::FAILURE)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env()
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            bindings,
            max_iterations,
            json,
        } => cmd_run(&config, &out, bindings, max_iterations, json),
        Command::Inspect { run_dir, k } => cmd_inspect(&run_dir, k),
        Command::Replay { run_dir, out } => cmd_replay(&run_dir, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
