//! Sandboxed execution of generated code and tests.
//!
//! [`materialize`] writes a code workspace and a test workspace into a fresh
//! temporary directory. The resulting [`Sandbox`] runs the entry command and
//! each test suite as separate processes with a wall-clock timeout, capped
//! output, a cleared environment and only allowlisted command shapes. Test
//! suites go through an external runner speaking the protocol in
//! [`protocol`]; [`assemble_loss`] turns the results into the textual
//! feedback the gradient agent reads.

mod exec;
mod loss;
pub mod protocol;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use exec::{CapturedStream, CommandResult, ExitKind};
pub use loss::{
    assemble_loss, assemble_loss_with_logs, CapturedLog, ExecutionFeedback, FeedbackRecord, Provenance, RecordError,
    ALL_PASSED_MARKER, DEFAULT_LOSS_BUDGET, NO_CASES_MARKER,
};
pub use protocol::{
    decode_report, encode_report, escape_field, unescape_field, ProtocolError, TestCase, TestReport, TestStatus,
    REPORT_HEADER,
};

use crate::agent::validate_filename;
use crate::workspace::{tail, Workspace};

/// Token in a command template that matches one workspace-relative filename.
pub const FILE_WILDCARD: &str = "{file}";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("sandbox I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("`{0}` exists in both the code and the test workspace")]
    FilenameCollision(String),
    #[error("command {0:?} matches no allowed command template")]
    CommandRejected(Vec<String>),
    #[error("could not start {command:?}: {source}")]
    SpawnError {
        command: Vec<String>,
        #[source]
        source: std::io::Error,
    },
    #[error("suite `{0}` is not in the sandbox")]
    MissingSuite(String),
    #[error("runner report for `{suite}`: {source}")]
    RunnerProtocolError {
        suite: String,
        #[source]
        source: ProtocolError,
    },
    #[error("invalid sandbox config: {0}")]
    InvalidConfig(String),
}

/// Whitespace-separated argv pattern. Tokens match literally, except
/// [`FILE_WILDCARD`] which matches any safe relative filename.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CommandTemplate {
    tokens: Vec<String>,
}

impl CommandTemplate {
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn matches(&self, argv: &[String]) -> bool {
        self.tokens.len() == argv.len()
            && self.tokens.iter().zip(argv).all(|(t, a)| {
                if t == FILE_WILDCARD {
                    validate_filename(a).is_ok()
                } else {
                    t == a
                }
            })
    }
}

impl FromStr for CommandTemplate {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let tokens: Vec<String> = s.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err("empty command template".into());
        }
        if tokens[0] == FILE_WILDCARD {
            return Err("command template cannot start with a wildcard".into());
        }
        Ok(CommandTemplate { tokens })
    }
}

impl TryFrom<String> for CommandTemplate {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<CommandTemplate> for String {
    fn from(t: CommandTemplate) -> String {
        t.to_string()
    }
}

impl fmt::Display for CommandTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SandboxConfig {
    /// Parent directory for sandbox roots; the system temp dir when unset.
    pub working_dir: Option<PathBuf>,
    #[serde(with = "secs")]
    pub wall_clock_timeout: Duration,
    /// Cap per captured stream.
    pub max_output_bytes: usize,
    pub allowed_commands: Vec<CommandTemplate>,
    /// Variables copied from the engine's environment when set.
    pub env_allowlist: Vec<String>,
    /// Variables always set to fixed values (e.g. a headless `DISPLAY`).
    pub env: BTreeMap<String, String>,
    /// Runner argv prefix; the engine appends `<suite> --report <path>`.
    /// Operator-supplied, so it is not checked against `allowed_commands`.
    pub runner: Vec<String>,
    /// Sandbox-relative glob patterns whose files are tailed into the loss.
    pub log_capture_globs: Vec<String>,
    pub log_capture_bytes: usize,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        SandboxConfig {
            working_dir: None,
            wall_clock_timeout: Duration::from_secs(30),
            max_output_bytes: 64 * 1024,
            allowed_commands: vec!["python3 {file}".parse().expect("valid template")],
            env_allowlist: vec!["PATH".into(), "LANG".into(), "LC_ALL".into()],
            env: BTreeMap::from([("PYTHONDONTWRITEBYTECODE".to_string(), "1".to_string())]),
            runner: vec!["evoloop-fake-runner".into()],
            log_capture_globs: vec!["game.log".into()],
            log_capture_bytes: 4 * 1024,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.wall_clock_timeout.is_zero() {
            return Err(EnvError::InvalidConfig("wall_clock_timeout must be positive".into()));
        }
        if self.runner.is_empty() {
            return Err(EnvError::InvalidConfig("runner command is empty".into()));
        }
        for g in &self.log_capture_globs {
            if g.starts_with('/') || g.split('/').any(|c| c == "..") {
                return Err(EnvError::InvalidConfig(format!("log glob `{g}` escapes the sandbox")));
            }
            glob::Pattern::new(g).map_err(|e| EnvError::InvalidConfig(format!("log glob `{g}`: {e}")))?;
        }
        Ok(())
    }

    fn process_env(&self) -> Vec<(String, String)> {
        let mut vars: BTreeMap<String, String> = self
            .env_allowlist
            .iter()
            .filter_map(|k| std::env::var(k).ok().map(|v| (k.clone(), v)))
            .collect();
        vars.extend(self.env.iter().map(|(k, v)| (k.clone(), v.clone())));
        vars.into_iter().collect()
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// A materialized workspace. The directory is removed on drop.
///
/// Commands take `&mut self`, so one handle never runs two at once.
#[derive(Debug)]
pub struct Sandbox {
    dir: tempfile::TempDir,
    cfg: SandboxConfig,
    env: Vec<(String, String)>,
}

/// Writes `code` and `tests` under a fresh root.
pub fn materialize(code: &Workspace, tests: &Workspace, cfg: &SandboxConfig) -> Result<Sandbox, EnvError> {
    cfg.validate()?;
    if let Some(name) = code.filenames().find(|n| tests.get(n).is_some()) {
        return Err(EnvError::FilenameCollision(name.to_string()));
    }
    let dir = match &cfg.working_dir {
        Some(parent) => {
            fs::create_dir_all(parent)?;
            tempfile::Builder::new().prefix("evoloop-").tempdir_in(parent)?
        }
        None => tempfile::Builder::new().prefix("evoloop-").tempdir()?,
    };
    fs::create_dir(dir.path().join("work"))?;
    fs::create_dir(dir.path().join("reports"))?;
    let sandbox = Sandbox {
        dir,
        env: cfg.process_env(),
        cfg: cfg.clone(),
    };
    for (name, content) in code.files().iter().chain(tests.files()) {
        // Workspace filenames are already validated: relative, no `..`.
        let path = sandbox.root().join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, content)?;
    }
    tracing::debug!(root = %sandbox.root().display(), files = code.len() + tests.len(), "materialized sandbox");
    Ok(sandbox)
}

impl Sandbox {
    /// Directory holding the materialized files; commands run here.
    pub fn root(&self) -> PathBuf {
        self.dir.path().join("work")
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.cfg
    }

    /// Runs the program's entry command, which must match an allowed template.
    pub fn run_program(&mut self, entry_command: &[String]) -> Result<CommandResult, EnvError> {
        if !self.cfg.allowed_commands.iter().any(|t| t.matches(entry_command)) {
            return Err(EnvError::CommandRejected(entry_command.to_vec()));
        }
        let result = exec::run_command(
            entry_command,
            &self.root(),
            &self.env,
            self.cfg.wall_clock_timeout,
            self.cfg.max_output_bytes,
        )
        .map_err(|source| EnvError::SpawnError {
            command: entry_command.to_vec(),
            source,
        })?;
        tracing::debug!(exit = ?result.exit, timed_out = result.timed_out, "program finished");
        Ok(self.scrub_result(result))
    }

    /// Runs each suite through the configured runner, in the given order.
    pub fn run_tests(&mut self, suites: &[String]) -> Result<Vec<TestReport>, EnvError> {
        let mut reports = Vec::with_capacity(suites.len());
        for (i, suite) in suites.iter().enumerate() {
            validate_filename(suite).map_err(|_| EnvError::MissingSuite(suite.clone()))?;
            if !self.root().join(suite).is_file() {
                return Err(EnvError::MissingSuite(suite.clone()));
            }
            reports.push(self.run_suite(suite, i)?);
        }
        Ok(reports)
    }

    fn run_suite(&mut self, suite: &str, index: usize) -> Result<TestReport, EnvError> {
        let report_path = self.dir.path().join("reports").join(format!("{index}.report"));
        let mut argv = self.cfg.runner.clone();
        argv.push(suite.to_string());
        argv.push("--report".into());
        argv.push(report_path.to_string_lossy().into_owned());

        let result = match exec::run_command(
            &argv,
            &self.root(),
            &self.env,
            self.cfg.wall_clock_timeout,
            self.cfg.max_output_bytes,
        ) {
            Ok(r) => self.scrub_result(r),
            Err(e) => return Ok(synthetic_error(suite, &format!("runner could not start: {e}"))),
        };
        if result.timed_out {
            return Ok(synthetic_error(
                suite,
                &format!("suite timed out after {:?}", self.cfg.wall_clock_timeout),
            ));
        }
        let text = match fs::read(&report_path) {
            Ok(bytes) => String::from_utf8(bytes).map_err(|_| EnvError::RunnerProtocolError {
                suite: suite.to_string(),
                source: ProtocolError::BadRecord {
                    line: 0,
                    message: "report is not UTF-8".into(),
                },
            })?,
            Err(_) => {
                let exit = describe_exit(result.exit);
                let stderr = tail(result.stderr.text.trim_end(), 2048);
                let msg = if stderr.is_empty() {
                    format!("runner {exit} without writing a report")
                } else {
                    format!("runner {exit} without writing a report:\n{stderr}")
                };
                return Ok(synthetic_error(suite, &msg));
            }
        };
        let mut cases = protocol::decode_report(&text).map_err(|source| EnvError::RunnerProtocolError {
            suite: suite.to_string(),
            source,
        })?;
        for c in &mut cases {
            c.message = self.scrub(&c.message);
        }
        Ok(TestReport {
            suite: suite.to_string(),
            cases,
        })
    }

    /// Tails of files matching the configured log globs, in path order.
    pub fn captured_logs(&self) -> Result<Vec<CapturedLog>, EnvError> {
        let root = self.root();
        let mut found = BTreeMap::new();
        for pattern in &self.cfg.log_capture_globs {
            let full = format!("{}/{}", glob::Pattern::escape(&root.to_string_lossy()), pattern);
            let paths = glob::glob(&full).map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
            for path in paths.flatten() {
                if !path.is_file() {
                    continue;
                }
                let Ok(rel) = path.strip_prefix(&root) else { continue };
                let name = rel.to_string_lossy().into_owned();
                found.entry(name).or_insert(path);
            }
        }
        let mut logs = Vec::new();
        for (name, path) in found {
            let bytes = fs::read(&path)?;
            let text = String::from_utf8_lossy(&bytes);
            let text = self.scrub(&text);
            let kept = tail(&text, self.cfg.log_capture_bytes);
            logs.push(CapturedLog {
                truncated: kept.len() < text.len(),
                text: kept.to_string(),
                name,
            });
        }
        Ok(logs)
    }

    /// Reads a file back from the sandbox.
    pub fn read_file(&self, name: &str) -> Result<String, EnvError> {
        validate_filename(name).map_err(|e| EnvError::Io(std::io::Error::other(e.to_string())))?;
        Ok(fs::read_to_string(self.root().join(name))?)
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    /// Replaces the sandbox's own (random) location in `text` so outputs are
    /// reproducible: paths inside the work directory become relative, any
    /// other mention becomes `<sandbox>`.
    pub fn scrub(&self, text: &str) -> String {
        let dir = self.dir.path().to_string_lossy();
        if !text.contains(dir.as_ref()) {
            return text.to_string();
        }
        let work = format!("{dir}/work");
        text.replace(&format!("{work}/"), "")
            .replace(&work, ".")
            .replace(dir.as_ref(), "<sandbox>")
    }

    fn scrub_result(&self, mut r: CommandResult) -> CommandResult {
        r.stdout.text = self.scrub(&r.stdout.text);
        r.stderr.text = self.scrub(&r.stderr.text);
        r
    }
}

fn describe_exit(exit: ExitKind) -> String {
    match exit {
        ExitKind::Code(c) => format!("exited with code {c}"),
        ExitKind::Signal(s) => format!("was killed by signal {s}"),
        ExitKind::Killed => "was killed after the timeout".into(),
    }
}

/// A suite that never produced per-case results collapses to one error case
/// named after the suite.
fn synthetic_error(suite: &str, message: &str) -> TestReport {
    TestReport {
        suite: suite.to_string(),
        cases: vec![TestCase {
            id: suite.to_string(),
            status: TestStatus::Error,
            message: message.to_string(),
        }],
    }
}
