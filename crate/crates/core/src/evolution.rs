//! The self-evolving loop: generate the test proxy once, then repeatedly run
//! the coding team, execute code against tests, and backpropagate the
//! feedback into a new coding team.
//!
//! Every finished iteration is written to the run directory before the next
//! one starts:
//!
//! ```text
//! <root>/manifest            JSON: task, config, artifact digests, termination
//! <root>/script              every model exchange so far (replay script)
//! <root>/iter_<k>/network.txt
//! <root>/iter_<k>/code/...
//! <root>/iter_<k>/tests/...
//! <root>/iter_<k>/feedback.txt
//! <root>/iter_<k>/gradient.txt   when a gradient was computed
//! <root>/iter_<k>/update.txt     when the team was updated
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    is_test_filename, parse_gradient_with_prefix, parse_update_report_with_limit, GradientKind, TaskSpec,
    TextualGradient,
};
use crate::backprop::{apply_update, compute_gradient, compute_update, AppliedUpdate, BackpropError, GradientContext};
use crate::environment::{
    assemble_loss_with_logs, materialize, EnvError, ExecutionFeedback, FeedbackRecord, SandboxConfig,
    DEFAULT_LOSS_BUDGET,
};
use crate::forward::{
    forward, forward_tests, self_organize, test_file_name, ForwardError, ForwardTrace, RejectedPatch, TeamKind,
};
use crate::graph::{topological_order, AgentRole, GraphError, MacNetwork};
use crate::provider::{ChatProvider, RecordingProvider, Script, ScriptError};
use crate::runtime::{sha256_hex, AgentRuntime, RuntimeSettings};
use crate::workspace::Workspace;

pub const MANIFEST_FORMAT: &str = "evoloop-run v1";
pub const MANIFEST_FILE: &str = "manifest";
pub const SCRIPT_FILE: &str = "script";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvergenceRule {
    /// Stop as soon as every test passes, without asking the gradient agent.
    #[default]
    TestsPass,
    /// Also require the gradient agent to answer "No error in codes.".
    TestsPassAndNoError,
}

/// What to do with suites the gradient agent calls wrong.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrongTestPolicy {
    DropSuite,
    #[default]
    RegenerateSuite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvolutionConfig {
    /// Iteration budget K.
    pub max_iterations: u32,
    pub convergence: ConvergenceRule,
    pub wrong_test_policy: WrongTestPolicy,
    /// Program started before the tests in every iteration.
    pub entry_command: Vec<String>,
    pub loss_budget: usize,
    pub runtime: RuntimeSettings,
    pub sandbox: SandboxConfig,
    /// Run directory. Not recorded in the manifest.
    #[serde(skip)]
    pub root: PathBuf,
    /// Stop with [`RunError::Interrupted`] once iteration `k` is persisted.
    /// Simulates a crash for resume tests.
    #[serde(skip)]
    pub interrupt_after: Option<u32>,
}

impl Default for EvolutionConfig {
    fn default() -> Self {
        EvolutionConfig {
            max_iterations: 4,
            convergence: ConvergenceRule::default(),
            wrong_test_policy: WrongTestPolicy::default(),
            entry_command: vec!["python3".into(), "main.py".into()],
            loss_budget: DEFAULT_LOSS_BUDGET,
            runtime: RuntimeSettings::default(),
            sandbox: SandboxConfig::default(),
            root: PathBuf::new(),
            interrupt_after: None,
        }
    }
}

impl EvolutionConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.max_iterations == 0 {
            return Err(RunError::InvalidConfig("max_iterations must be at least 1".into()));
        }
        if self.entry_command.is_empty() {
            return Err(RunError::InvalidConfig("entry_command is empty".into()));
        }
        if self.root.as_os_str().is_empty() {
            return Err(RunError::InvalidConfig("run directory is not set".into()));
        }
        self.sandbox
            .validate()
            .map_err(|e| RunError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Converged,
    BudgetExhausted,
    Failed,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Converged => "converged",
            Termination::BudgetExhausted => "budget_exhausted",
            Termination::Failed => "failed",
        }
    }
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Test-suite repair done at the start of an iteration because the previous
/// gradient blamed the tests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Remediation {
    pub policy: WrongTestPolicy,
    pub suites: Vec<String>,
    /// Testing nodes re-run (regenerate policy only).
    pub nodes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationSnapshot {
    pub k: u32,
    pub network: MacNetwork,
    pub code: Workspace,
    pub tests: Workspace,
    pub feedback: FeedbackRecord,
    pub gradient: Option<TextualGradient>,
    pub update: Option<AppliedUpdate>,
    pub remediation: Option<Remediation>,
}

impl IterationSnapshot {
    /// Coding team for the next iteration.
    pub fn next_network(&self) -> &MacNetwork {
        self.update.as_ref().map_or(&self.network, |u| &u.new)
    }

    /// Whether the gradient blamed the tests rather than the code.
    pub fn blames_tests(&self) -> bool {
        match &self.gradient {
            Some(g) => match g.kind {
                GradientKind::WrongTestCode => true,
                // The agent saw failures but no bug in the code.
                GradientKind::NoError => !self.feedback.all_passed(),
                GradientKind::Diagnoses => false,
            },
            None => false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProxyInfo {
    /// Number of times the whole testing team ran.
    pub generations: u32,
    pub rejected: Vec<(String, RejectedPatch)>,
    pub testing_network: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvolutionRun {
    pub task: TaskSpec,
    pub config: EvolutionConfig,
    pub snapshots: Vec<IterationSnapshot>,
    pub final_workspace: Workspace,
    pub termination: Termination,
    pub proxy: ProxyInfo,
    /// Every model exchange of the run, replayable with a scripted provider.
    pub transcript: Script,
}

impl EvolutionRun {
    pub fn last(&self) -> Option<&IterationSnapshot> {
        self.snapshots.last()
    }

    /// Passed over total cases in the last iteration.
    pub fn final_pass_counts(&self) -> (usize, usize) {
        self.last().map_or((0, 0), |s| {
            (
                s.feedback.count(crate::environment::TestStatus::Pass),
                s.feedback.total_cases(),
            )
        })
    }
}

/// The replay script for a finished run.
pub fn record_script(run: &EvolutionRun) -> Script {
    run.transcript.clone()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Proxy,
    Organize,
    Forward,
    Remediation,
    Environment,
    Gradient,
    Update,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Proxy => "target proxy",
            Stage::Organize => "organize",
            Stage::Forward => "forward",
            Stage::Remediation => "test remediation",
            Stage::Environment => "environment",
            Stage::Gradient => "gradient",
            Stage::Update => "update",
            Stage::Persist => "persist",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum StageError {
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    Environment(#[from] EnvError),
    #[error(transparent)]
    Backprop(#[from] BackpropError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{stage} stage failed{}: {source}", iteration.map(|k| format!(" in iteration {k}")).unwrap_or_default())]
    RunFailed {
        stage: Stage,
        iteration: Option<u32>,
        #[source]
        source: Box<StageError>,
    },
    #[error("corrupt run directory: {0}")]
    CorruptSnapshot(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("interrupted after iteration {0}")]
    Interrupted(u32),
    #[error("run directory I/O: {0}")]
    Io(#[from] io::Error),
}

fn fail(stage: Stage, iteration: Option<u32>) -> impl FnOnce(StageError) -> RunError {
    move |source| RunError::RunFailed {
        stage,
        iteration,
        source: Box::new(source),
    }
}

/// The tests produced by the testing team.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOutcome {
    pub tests: Workspace,
    pub network: MacNetwork,
    pub trace: ForwardTrace,
}

impl ProxyOutcome {
    pub fn rejected(&self) -> Vec<(String, RejectedPatch)> {
        self.trace.rejected().map(|(n, p)| (n.to_string(), p.clone())).collect()
    }
}

/// Organizes the testing team and runs it against `code` (empty before the
/// first iteration). Only test-suite files end up in the result.
pub fn generate_target_proxy(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    code: &Workspace,
) -> Result<ProxyOutcome, ForwardError> {
    let org = self_organize(rt, task, TeamKind::Testing)?;
    let (tests, trace) = forward_tests(rt, task, &org.network, code, &Workspace::new(), None)?;
    Ok(ProxyOutcome {
        tests,
        network: org.network,
        trace,
    })
}

// ---------------------------------------------------------------------------
// Manifest

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    format: String,
    task: TaskSpec,
    config: EvolutionConfig,
    proxy: ProxyInfo,
    iterations: Vec<IterationEntry>,
    termination: Option<Termination>,
    failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IterationEntry {
    k: u32,
    /// Path relative to the run root -> SHA-256 of its bytes.
    artifacts: BTreeMap<String, String>,
    code_origins: BTreeMap<String, String>,
    test_origins: BTreeMap<String, String>,
    passed: usize,
    total: usize,
    gradient: Option<GradientKind>,
    remediation: Option<Remediation>,
}

fn iter_dir(root: &Path, k: u32) -> PathBuf {
    root.join(format!("iter_{k}"))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)
}

fn read_workspace(dir: &Path, origins: &BTreeMap<String, String>) -> Result<Workspace, RunError> {
    let mut ws = Workspace::new();
    if !dir.exists() {
        return Ok(ws);
    }
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| RunError::CorruptSnapshot(e.to_string()))?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry.path().strip_prefix(dir).expect("walk stays under dir");
        let name = rel.to_string_lossy().into_owned();
        let content = fs::read_to_string(entry.path())?;
        let origin = origins.get(&name).map_or(crate::workspace::SEED_ORIGIN, String::as_str);
        ws.insert(name, content, origin)
            .map_err(|e| RunError::CorruptSnapshot(e.to_string()))?;
    }
    Ok(ws)
}

fn gradient_text(g: &TextualGradient) -> String {
    format!("kind: {}\n---\n{}", g.kind.as_str(), g.raw)
}

fn update_text(u: &AppliedUpdate) -> String {
    let report = crate::agent::UpdateReport {
        progress: u.progress.clone(),
        draft: u.new.to_draft(),
    };
    format!(
        "removed: {}\nadded: {}\nretained: {}\nrewritten: {}\n---\n{}",
        u.removed.join(", "),
        u.added.join(", "),
        u.retained.join(", "),
        u.rewritten.join(", "),
        report.to_canonical_text()
    )
}

impl IterationSnapshot {
    /// The files this iteration persists, relative to the run root.
    pub fn artifact_files(&self) -> Vec<(String, String)> {
        let prefix = format!("iter_{}", self.k);
        let mut out = vec![(format!("{prefix}/network.txt"), self.network.to_canonical_text())];
        for (name, content) in self.code.files() {
            out.push((format!("{prefix}/code/{name}"), content.clone()));
        }
        for (name, content) in self.tests.files() {
            out.push((format!("{prefix}/tests/{name}"), content.clone()));
        }
        out.push((format!("{prefix}/feedback.txt"), self.feedback.to_text()));
        if let Some(g) = &self.gradient {
            out.push((format!("{prefix}/gradient.txt"), gradient_text(g)));
        }
        if let Some(u) = &self.update {
            out.push((format!("{prefix}/update.txt"), update_text(u)));
        }
        out
    }

    /// SHA-256 of every persisted file, as recorded in the manifest.
    pub fn artifact_digests(&self) -> BTreeMap<String, String> {
        self.artifact_files()
            .into_iter()
            .map(|(rel, content)| (rel, sha256_hex(content.as_bytes())))
            .collect()
    }
}

/// Writes `iter_<k>/` and returns the digests of what was written.
fn write_snapshot(root: &Path, snap: &IterationSnapshot) -> io::Result<BTreeMap<String, String>> {
    let dir = iter_dir(root, snap.k);
    if dir.exists() {
        // Leftover from an iteration that crashed before its manifest entry.
        fs::remove_dir_all(&dir)?;
    }
    fs::create_dir_all(dir.join("code"))?;
    fs::create_dir_all(dir.join("tests"))?;
    let mut artifacts = BTreeMap::new();
    for (rel, content) in snap.artifact_files() {
        let path = root.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &content)?;
        artifacts.insert(rel, sha256_hex(content.as_bytes()));
    }
    Ok(artifacts)
}

fn read_manifest(root: &Path) -> Result<Manifest, RunError> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| RunError::CorruptSnapshot(format!("cannot read {}: {e}", path.display())))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| RunError::CorruptSnapshot(format!("manifest: {e}")))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(RunError::CorruptSnapshot(format!(
            "unknown format {:?}",
            manifest.format
        )));
    }
    Ok(manifest)
}

fn write_manifest(root: &Path, manifest: &Manifest) -> io::Result<()> {
    let mut text = serde_json::to_string_pretty(manifest).map_err(io::Error::other)?;
    text.push('\n');
    write_atomic(&root.join(MANIFEST_FILE), text.as_bytes())
}

fn verify_entry(root: &Path, entry: &IterationEntry) -> Result<(), RunError> {
    let dir = iter_dir(root, entry.k);
    let prefix = format!("iter_{}/", entry.k);
    // Files on disk must be exactly the recorded ones.
    let mut on_disk = BTreeSet::new();
    if dir.exists() {
        for e in walkdir::WalkDir::new(&dir) {
            let e = e.map_err(|e| RunError::CorruptSnapshot(e.to_string()))?;
            if e.file_type().is_file() {
                let rel = e.path().strip_prefix(root).expect("under root");
                on_disk.insert(rel.to_string_lossy().into_owned());
            }
        }
    }
    let recorded: BTreeSet<String> = entry.artifacts.keys().cloned().collect();
    if let Some(extra) = on_disk.difference(&recorded).next() {
        return Err(RunError::CorruptSnapshot(format!("unrecorded file {extra}")));
    }
    for (rel, digest) in &entry.artifacts {
        if !rel.starts_with(&prefix) {
            return Err(RunError::CorruptSnapshot(format!("artifact {rel} outside {prefix}")));
        }
        let bytes = fs::read(root.join(rel)).map_err(|e| RunError::CorruptSnapshot(format!("{rel}: {e}")))?;
        if &sha256_hex(&bytes) != digest {
            return Err(RunError::CorruptSnapshot(format!("digest mismatch for {rel}")));
        }
    }
    Ok(())
}

fn load_snapshot(root: &Path, entry: &IterationEntry, cfg: &EvolutionConfig) -> Result<IterationSnapshot, RunError> {
    verify_entry(root, entry)?;
    let dir = iter_dir(root, entry.k);
    let corrupt = |what: &str, e: &dyn fmt::Display| RunError::CorruptSnapshot(format!("iter_{} {what}: {e}", entry.k));
    let network_text = fs::read_to_string(dir.join("network.txt"))?;
    let network = MacNetwork::from_canonical_text(&network_text, AgentRole::Coder, cfg.runtime.max_nodes)
        .map_err(|e| corrupt("network", &e))?;
    let code = read_workspace(&dir.join("code"), &entry.code_origins)?;
    let tests = read_workspace(&dir.join("tests"), &entry.test_origins)?;
    let feedback =
        FeedbackRecord::parse(&fs::read_to_string(dir.join("feedback.txt"))?).map_err(|e| corrupt("feedback", &e))?;
    let gradient = match fs::read_to_string(dir.join("gradient.txt")) {
        Ok(text) => {
            let (_, raw) = text
                .split_once("\n---\n")
                .ok_or_else(|| corrupt("gradient", &"no separator"))?;
            Some(parse_gradient_with_prefix(raw, &cfg.runtime.test_prefix).map_err(|e| corrupt("gradient", &e))?)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    let update = match fs::read_to_string(dir.join("update.txt")) {
        Ok(text) => {
            let (_, body) = text
                .split_once("\n---\n")
                .ok_or_else(|| corrupt("update", &"no separator"))?;
            let report =
                parse_update_report_with_limit(body, cfg.runtime.max_nodes).map_err(|e| corrupt("update", &e))?;
            Some(apply_update(&network, &report).map_err(|e| corrupt("update", &e))?)
        }
        Err(e) if e.kind() == io::ErrorKind::NotFound => None,
        Err(e) => return Err(e.into()),
    };
    Ok(IterationSnapshot {
        k: entry.k,
        network,
        code,
        tests,
        feedback,
        gradient,
        update,
        remediation: entry.remediation.clone(),
    })
}

/// Reads a run directory without executing anything. Every artifact is
/// checked against its manifest digest.
pub fn load_run(root: &Path) -> Result<EvolutionRun, RunError> {
    let manifest = read_manifest(root)?;
    let mut config = manifest.config.clone();
    config.root = root.to_path_buf();
    let mut snapshots = Vec::new();
    for (i, entry) in manifest.iterations.iter().enumerate() {
        if entry.k as usize != i {
            return Err(RunError::CorruptSnapshot(format!(
                "iteration {i} recorded as {}",
                entry.k
            )));
        }
        snapshots.push(load_snapshot(root, entry, &config)?);
    }
    let transcript = match fs::read_to_string(root.join(SCRIPT_FILE)) {
        Ok(text) => Script::parse(&text).map_err(|e| RunError::CorruptSnapshot(format!("script: {e}")))?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Script::new(),
        Err(e) => return Err(e.into()),
    };
    Ok(EvolutionRun {
        final_workspace: snapshots.last().map(|s| s.code.clone()).unwrap_or_default(),
        termination: manifest.termination.unwrap_or(Termination::Failed),
        task: manifest.task,
        config,
        snapshots,
        proxy: manifest.proxy,
        transcript,
    })
}

/// Digest of every file under a run directory, keyed by relative path. The
/// replay script is left out: it records how the run was produced, not
/// what it produced.
pub fn snapshot_tree_digests(root: &Path) -> io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for e in walkdir::WalkDir::new(root).sort_by_file_name() {
        let e = e.map_err(io::Error::other)?;
        if !e.file_type().is_file() {
            continue;
        }
        let rel = e
            .path()
            .strip_prefix(root)
            .expect("under root")
            .to_string_lossy()
            .into_owned();
        if rel == SCRIPT_FILE {
            continue;
        }
        out.insert(rel, sha256_hex(&fs::read(e.path())?));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// The loop

struct Loop<'a, 'p> {
    rt: AgentRuntime<'p>,
    recorder: &'p RecordingProvider<&'a dyn ChatProvider>,
    task: &'a TaskSpec,
    cfg: &'a EvolutionConfig,
    manifest: Manifest,
    snapshots: Vec<IterationSnapshot>,
    testing_network: MacNetwork,
    tests: Workspace,
}

/// Runs the whole loop into `cfg.root`, which must be absent or empty.
pub fn evolve(provider: &dyn ChatProvider, task: &TaskSpec, cfg: &EvolutionConfig) -> Result<EvolutionRun, RunError> {
    cfg.validate()?;
    task.validate().map_err(RunError::InvalidConfig)?;
    let root = &cfg.root;
    if root.exists() && fs::read_dir(root)?.next().is_some() {
        return Err(RunError::InvalidConfig(format!("{} is not empty", root.display())));
    }
    fs::create_dir_all(root)?;
    let recorder = RecordingProvider::new(provider);
    run_from(&recorder, task, cfg, Vec::new(), None)
}

/// Continues the run in `root` from its last persisted iteration, using the
/// configuration recorded in its manifest. Finished runs come back as they
/// are.
pub fn resume(provider: &dyn ChatProvider, root: &Path) -> Result<EvolutionRun, RunError> {
    let run = load_run(root)?;
    let manifest = read_manifest(root)?;
    if matches!(
        manifest.termination,
        Some(Termination::Converged | Termination::BudgetExhausted)
    ) {
        return Ok(run);
    }
    run.config.validate()?;
    let recorder = RecordingProvider::with_history(provider, &run.transcript);
    if run.snapshots.is_empty() {
        // Nothing durable yet beyond the manifest: start over.
        tracing::info!("no finished iteration to resume from, restarting");
        return run_from(&recorder, &run.task, &run.config, Vec::new(), None);
    }
    let testing_network = MacNetwork::from_canonical_text(
        &manifest.proxy.testing_network,
        AgentRole::Tester,
        run.config.runtime.max_nodes,
    )
    .map_err(|e| RunError::CorruptSnapshot(format!("testing network: {e}")))?;
    tracing::info!(from = run.snapshots.len(), "resuming run");
    run_from(
        &recorder,
        &run.task,
        &run.config,
        run.snapshots,
        Some((testing_network, manifest)),
    )
}

fn run_from(
    recorder: &RecordingProvider<&dyn ChatProvider>,
    task: &TaskSpec,
    cfg: &EvolutionConfig,
    snapshots: Vec<IterationSnapshot>,
    restored: Option<(MacNetwork, Manifest)>,
) -> Result<EvolutionRun, RunError> {
    let rt = AgentRuntime::new(recorder, cfg.runtime.clone());
    let (testing_network, mut manifest, tests) = match restored {
        Some((net, mut manifest)) => {
            manifest.termination = None;
            manifest.failure = None;
            let tests = snapshots.last().map(|s| s.tests.clone()).unwrap_or_default();
            (net, manifest, tests)
        }
        None => {
            let proxy =
                generate_target_proxy(&rt, task, &Workspace::new()).map_err(|e| fail(Stage::Proxy, None)(e.into()))?;
            let manifest = Manifest {
                format: MANIFEST_FORMAT.to_string(),
                task: task.clone(),
                config: cfg.clone(),
                proxy: ProxyInfo {
                    generations: 1,
                    rejected: proxy.rejected(),
                    testing_network: proxy.network.to_canonical_text(),
                },
                iterations: Vec::new(),
                termination: None,
                failure: None,
            };
            write_manifest(&cfg.root, &manifest).map_err(|e| fail(Stage::Persist, None)(e.into()))?;
            (proxy.network, manifest, proxy.tests)
        }
    };
    manifest.config = cfg.clone();
    let mut lp = Loop {
        rt,
        recorder,
        task,
        cfg,
        manifest,
        snapshots,
        testing_network,
        tests,
    };
    match lp.run() {
        Ok(termination) => lp.finish(termination),
        Err(RunError::Interrupted(k)) => {
            lp.save_script()?;
            Err(RunError::Interrupted(k))
        }
        Err(err) => {
            lp.manifest.termination = Some(Termination::Failed);
            lp.manifest.failure = Some(err.to_string());
            // Best effort: the original error matters more than a write failure.
            let _ = write_manifest(&cfg.root, &lp.manifest);
            let _ = lp.save_script();
            Err(err)
        }
    }
}

impl Loop<'_, '_> {
    fn save_script(&self) -> Result<(), RunError> {
        write_atomic(
            &self.cfg.root.join(SCRIPT_FILE),
            self.recorder.script().to_text().as_bytes(),
        )?;
        Ok(())
    }

    fn finish(mut self, termination: Termination) -> Result<EvolutionRun, RunError> {
        self.manifest.termination = Some(termination);
        write_manifest(&self.cfg.root, &self.manifest).map_err(|e| fail(Stage::Persist, None)(e.into()))?;
        self.save_script()?;
        tracing::info!(%termination, iterations = self.snapshots.len(), "run finished");
        Ok(EvolutionRun {
            task: self.task.clone(),
            config: self.cfg.clone(),
            final_workspace: self.snapshots.last().map(|s| s.code.clone()).unwrap_or_default(),
            snapshots: self.snapshots,
            termination,
            proxy: self.manifest.proxy,
            transcript: self.recorder.script(),
        })
    }

    fn run(&mut self) -> Result<Termination, RunError> {
        let k_max = self.cfg.max_iterations;
        let start = self.snapshots.len() as u32;
        let mut network = match self.snapshots.last() {
            Some(prev) => prev.next_network().clone(),
            None => {
                let org = self_organize(&self.rt, self.task, TeamKind::Coding)
                    .map_err(|e| fail(Stage::Organize, Some(0))(e.into()))?;
                org.network
            }
        };
        for k in start..k_max {
            let it = Some(k);
            let seed = self.snapshots.last().map(|s| s.code.clone()).unwrap_or_default();

            let remediation = match self.snapshots.last() {
                Some(prev) if prev.blames_tests() => Some(
                    self.remediate(prev.clone(), &seed)
                        .map_err(fail(Stage::Remediation, it))?,
                ),
                _ => None,
            };

            tracing::info!(k, nodes = network.len(), "forward pass");
            let (code, _trace) =
                forward(&self.rt, self.task, &network, &seed).map_err(|e| fail(Stage::Forward, it)(e.into()))?;

            let feedback = self.execute(&code).map_err(fail(Stage::Environment, it))?;
            tracing::info!(
                k,
                passed = feedback.count(crate::environment::TestStatus::Pass),
                total = feedback.total_cases(),
                "tests executed"
            );

            let mut snap = IterationSnapshot {
                k,
                network: network.clone(),
                code: code.clone(),
                tests: self.tests.clone(),
                feedback: feedback.to_record(),
                gradient: None,
                update: None,
                remediation,
            };

            let tests_pass = feedback.all_passed();
            if tests_pass && self.cfg.convergence == ConvergenceRule::TestsPass {
                self.persist(snap)?;
                return Ok(Termination::Converged);
            }

            let ctx = GradientContext::new(self.task.clone(), code.clone(), self.tests.clone(), feedback.clone());
            let gradient = compute_gradient(&self.rt, &ctx)
                .map_err(|e| fail(Stage::Gradient, it)(e.into()))?
                .gradient;
            snap.gradient = Some(gradient.clone());
            if tests_pass && gradient.kind == GradientKind::NoError {
                self.persist(snap)?;
                return Ok(Termination::Converged);
            }
            if k + 1 == k_max {
                // The update could only affect an iteration that will not run.
                self.persist(snap)?;
                return Ok(Termination::BudgetExhausted);
            }
            if gradient.kind == GradientKind::Diagnoses {
                let outcome = compute_update(&self.rt, self.task, &network, &code, &feedback, &gradient)
                    .map_err(|e| fail(Stage::Update, it)(e.into()))?;
                let applied = apply_update(&network, &outcome.report).map_err(|e| fail(Stage::Update, it)(e.into()))?;
                tracing::info!(
                    k,
                    removed = applied.removed.len(),
                    added = applied.added.len(),
                    rewritten = applied.rewritten.len(),
                    "team updated"
                );
                snap.update = Some(applied);
            }
            network = snap.next_network().clone();
            self.persist(snap)?;
            if self.cfg.interrupt_after == Some(k) {
                return Err(RunError::Interrupted(k));
            }
        }
        Ok(Termination::BudgetExhausted)
    }

    fn execute(&self, code: &Workspace) -> Result<ExecutionFeedback, StageError> {
        let mut sandbox = materialize(code, &self.tests, &self.cfg.sandbox)?;
        let program = sandbox.run_program(&self.cfg.entry_command)?;
        let suites: Vec<String> = self
            .tests
            .filenames()
            .filter(|f| is_test_filename(f, &self.cfg.runtime.test_prefix))
            .map(str::to_string)
            .collect();
        let reports = sandbox.run_tests(&suites)?;
        let logs = sandbox.captured_logs()?;
        Ok(assemble_loss_with_logs(program, reports, logs, self.cfg.loss_budget))
    }

    /// Suites the previous gradient blamed: those it names, else those that
    /// failed.
    fn flagged_suites(&self, prev: &IterationSnapshot) -> Vec<String> {
        let raw = prev.gradient.as_ref().map_or("", |g| g.raw.as_str());
        let named: Vec<String> = self
            .tests
            .filenames()
            .filter(|f| raw.contains(*f))
            .map(str::to_string)
            .collect();
        if !named.is_empty() {
            return named;
        }
        prev.feedback.failing_suites().into_iter().map(str::to_string).collect()
    }

    fn remediate(&mut self, prev: IterationSnapshot, code: &Workspace) -> Result<Remediation, StageError> {
        let suites = self.flagged_suites(&prev);
        let policy = self.cfg.wrong_test_policy;
        let mut nodes = Vec::new();
        match policy {
            WrongTestPolicy::DropSuite => {
                for s in &suites {
                    self.tests.remove(s);
                }
            }
            WrongTestPolicy::RegenerateSuite => {
                let order = topological_order(&self.testing_network);
                let settings = self.rt.settings();
                let owner: BTreeMap<String, &String> = order
                    .iter()
                    .enumerate()
                    .map(|(i, id)| (test_file_name(&settings.test_prefix, i, &self.task.language), id))
                    .collect();
                let mapped: Option<BTreeSet<String>> = if suites.is_empty() {
                    None
                } else {
                    suites.iter().map(|s| owner.get(s).map(|n| (*n).clone())).collect()
                };
                let (tests, _) = match &mapped {
                    Some(only) => {
                        nodes = only.iter().cloned().collect();
                        let mut seed = self.tests.clone();
                        for s in &suites {
                            seed.remove(s);
                        }
                        forward_tests(&self.rt, self.task, &self.testing_network, code, &seed, Some(only))?
                    }
                    None => {
                        nodes = order.clone();
                        self.manifest.proxy.generations += 1;
                        forward_tests(
                            &self.rt,
                            self.task,
                            &self.testing_network,
                            code,
                            &Workspace::new(),
                            None,
                        )?
                    }
                };
                self.tests = tests;
            }
        }
        tracing::info!(?policy, ?suites, ?nodes, "test suites remediated");
        Ok(Remediation { policy, suites, nodes })
    }

    fn persist(&mut self, snap: IterationSnapshot) -> Result<(), RunError> {
        let k = snap.k;
        let persist_err = |e: io::Error| fail(Stage::Persist, Some(k))(e.into());
        let artifacts = write_snapshot(&self.cfg.root, &snap).map_err(persist_err)?;
        self.manifest.iterations.push(IterationEntry {
            k,
            artifacts,
            code_origins: snap.code.origins().clone(),
            test_origins: snap.tests.origins().clone(),
            passed: snap.feedback.count(crate::environment::TestStatus::Pass),
            total: snap.feedback.total_cases(),
            gradient: snap.gradient.as_ref().map(|g| g.kind),
            remediation: snap.remediation.clone(),
        });
        self.save_script()?;
        write_manifest(&self.cfg.root, &self.manifest).map_err(persist_err)?;
        self.snapshots.push(snap);
        Ok(())
    }
}

impl From<ScriptError> for RunError {
    fn from(e: ScriptError) -> Self {
        RunError::CorruptSnapshot(format!("script: {e}"))
    }
}
