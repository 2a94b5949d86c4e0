use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::exec::{CapturedStream, CommandResult, ExitKind};
use super::protocol::{escape_field, unescape_field, TestCase, TestReport, TestStatus};
use crate::workspace::{ceil_char_boundary, tail};

pub const DEFAULT_LOSS_BUDGET: usize = 16 * 1024;

/// Tail of each program stream kept in the loss text.
const PROGRAM_STREAM_TAIL: usize = 4 * 1024;

pub const ALL_PASSED_MARKER: &str = "ALL TESTS PASSED";
pub const NO_CASES_MARKER: &str = "NO TEST CASES EXECUTED";

/// Where a piece of feedback came from. Only the environment produces it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Environment,
}

impl Provenance {
    pub fn as_str(self) -> &'static str {
        "environment"
    }
}

/// A log file captured from the sandbox after the program ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedLog {
    pub name: String,
    pub text: String,
    pub truncated: bool,
}

/// The textual loss: what running the code against the tests produced.
///
/// There is no public constructor other than [`assemble_loss`] (and
/// [`assemble_loss_with_logs`]), and the type does not implement
/// `Deserialize`, so a value of this type always comes from real execution
/// results. Free text cannot be turned into one:
///
/// ```compile_fail
/// use evoloop::environment::{ExecutionFeedback, Provenance};
/// let fake = ExecutionFeedback {
///     loss_text: "the code looks wrong to me".to_string(),
///     provenance: Provenance::Environment,
/// };
/// ```
///
/// ```compile_fail
/// use evoloop::environment::ExecutionFeedback;
/// let fake: ExecutionFeedback = serde_json::from_str("{}").unwrap();
/// ```
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecutionFeedback {
    program: CommandResult,
    reports: Vec<TestReport>,
    logs: Vec<CapturedLog>,
    program_section: String,
    tests_section: String,
    loss_text: String,
    truncated: bool,
    provenance: Provenance,
}

impl ExecutionFeedback {
    pub fn program(&self) -> &CommandResult {
        &self.program
    }

    pub fn reports(&self) -> &[TestReport] {
        &self.reports
    }

    pub fn logs(&self) -> &[CapturedLog] {
        &self.logs
    }

    pub fn loss_text(&self) -> &str {
        &self.loss_text
    }

    /// Program and log part of the loss, each within the budget.
    pub fn program_section(&self) -> &str {
        &self.program_section
    }

    /// Test counts and failure blocks.
    pub fn tests_section(&self) -> &str {
        &self.tests_section
    }

    pub fn is_truncated(&self) -> bool {
        self.truncated
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    pub fn total_cases(&self) -> usize {
        self.reports.iter().map(|r| r.cases.len()).sum()
    }

    pub fn count(&self, status: TestStatus) -> usize {
        self.reports.iter().map(|r| r.count(status)).sum()
    }

    pub fn failing_cases(&self) -> usize {
        self.count(TestStatus::Fail) + self.count(TestStatus::Error)
    }

    /// At least one case ran and none failed or errored.
    pub fn all_passed(&self) -> bool {
        self.total_cases() > 0 && self.failing_cases() == 0
    }

    /// Suites with at least one failing case.
    pub fn failing_suites(&self) -> Vec<&str> {
        self.reports
            .iter()
            .filter(|r| r.failing().next().is_some())
            .map(|r| r.suite.as_str())
            .collect()
    }

    pub fn to_record(&self) -> FeedbackRecord {
        FeedbackRecord {
            command: self.program.command.clone(),
            exit: self.program.exit,
            reports: self.reports.clone(),
            loss_text: self.loss_text.clone(),
            truncated: self.truncated,
        }
    }
}

const RECORD_HEADER: &str = "evoloop-feedback v1";
const RECORD_SEPARATOR: &str = "---\n";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("feedback record line {line}: {message}")]
pub struct RecordError {
    pub line: usize,
    pub message: String,
}

/// Persisted form of [`ExecutionFeedback`]: exit status, per-case results and
/// the loss text. Program output survives only inside the loss text, and
/// durations are dropped so records are reproducible. A record cannot be
/// turned back into feedback.
///
/// Text encoding (see [`FeedbackRecord::to_text`]):
///
/// ```text
/// evoloop-feedback v1
/// command\t<arg>\t<arg>...
/// exit\tcode <n> | signal <n> | killed
/// truncated\ttrue|false
/// suite\t<name>
/// case\t<id>\t<status>\t<message>
/// ---
/// <loss text, verbatim>
/// ```
///
/// Fields use the runner report escapes. Each `case` belongs to the most
/// recent `suite`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub command: Vec<String>,
    pub exit: ExitKind,
    pub reports: Vec<TestReport>,
    pub loss_text: String,
    pub truncated: bool,
}

impl FeedbackRecord {
    pub fn total_cases(&self) -> usize {
        self.reports.iter().map(|r| r.cases.len()).sum()
    }

    pub fn count(&self, status: TestStatus) -> usize {
        self.reports.iter().map(|r| r.count(status)).sum()
    }

    pub fn failing_cases(&self) -> usize {
        self.count(TestStatus::Fail) + self.count(TestStatus::Error)
    }

    pub fn all_passed(&self) -> bool {
        self.total_cases() > 0 && self.failing_cases() == 0
    }

    pub fn failing_suites(&self) -> Vec<&str> {
        self.reports
            .iter()
            .filter(|r| r.failing().next().is_some())
            .map(|r| r.suite.as_str())
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{RECORD_HEADER}\ncommand");
        for arg in &self.command {
            out.push('\t');
            out.push_str(&escape_field(arg));
        }
        out.push('\n');
        let exit = match self.exit {
            ExitKind::Code(c) => format!("code {c}"),
            ExitKind::Signal(s) => format!("signal {s}"),
            ExitKind::Killed => "killed".to_string(),
        };
        let _ = writeln!(out, "exit\t{exit}");
        let _ = writeln!(out, "truncated\t{}", self.truncated);
        for r in &self.reports {
            let _ = writeln!(out, "suite\t{}", escape_field(&r.suite));
            for c in &r.cases {
                let _ = writeln!(
                    out,
                    "case\t{}\t{}\t{}",
                    escape_field(&c.id),
                    c.status,
                    escape_field(&c.message)
                );
            }
        }
        out.push_str(RECORD_SEPARATOR);
        out.push_str(&self.loss_text);
        out
    }

    pub fn parse(text: &str) -> Result<FeedbackRecord, RecordError> {
        let err = |line: usize, message: &str| RecordError {
            line,
            message: message.to_string(),
        };
        let (head, loss_text) = text
            .split_once(&format!("\n{RECORD_SEPARATOR}"))
            .ok_or_else(|| err(0, "missing `---` separator"))?;
        let mut lines = head.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        if lines.next().map(|(_, l)| l) != Some(RECORD_HEADER) {
            return Err(err(1, "missing header"));
        }
        let mut command = None;
        let mut exit = None;
        let mut truncated = None;
        let mut reports: Vec<TestReport> = Vec::new();
        for (no, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            let unescape = |f: &str| unescape_field(f).map_err(|m| err(no, &m));
            match fields.as_slice() {
                ["command", args @ ..] => {
                    command = Some(args.iter().map(|a| unescape(a)).collect::<Result<Vec<_>, _>>()?);
                }
                ["exit", value] => {
                    exit = Some(match value.split_once(' ') {
                        Some(("code", n)) => ExitKind::Code(n.parse().map_err(|_| err(no, "bad exit code"))?),
                        Some(("signal", n)) => ExitKind::Signal(n.parse().map_err(|_| err(no, "bad signal"))?),
                        None if *value == "killed" => ExitKind::Killed,
                        _ => return Err(err(no, "bad exit")),
                    });
                }
                ["truncated", value] => {
                    truncated = Some(value.parse::<bool>().map_err(|_| err(no, "bad truncated flag"))?);
                }
                ["suite", name] => reports.push(TestReport {
                    suite: unescape(name)?,
                    cases: Vec::new(),
                }),
                ["case", id, status, message] => {
                    let case = TestCase {
                        id: unescape(id)?,
                        status: status.parse().map_err(|m: String| err(no, &m))?,
                        message: unescape(message)?,
                    };
                    reports
                        .last_mut()
                        .ok_or_else(|| err(no, "case before any suite"))?
                        .cases
                        .push(case);
                }
                _ => return Err(err(no, "unrecognized line")),
            }
        }
        Ok(FeedbackRecord {
            command: command.ok_or_else(|| err(0, "missing command"))?,
            exit: exit.ok_or_else(|| err(0, "missing exit"))?,
            truncated: truncated.ok_or_else(|| err(0, "missing truncated flag"))?,
            reports,
            loss_text: loss_text.to_string(),
        })
    }
}

pub fn assemble_loss(program: CommandResult, reports: Vec<TestReport>, budget: usize) -> ExecutionFeedback {
    assemble_loss_with_logs(program, reports, Vec::new(), budget)
}

/// Builds the loss text: program summary, captured logs, per-suite counts,
/// then one block per failing case. Pure in its inputs; durations are not
/// used. When longer than `budget` bytes the head is dropped and replaced by
/// a marker, so the most recent failures survive.
pub fn assemble_loss_with_logs(
    program: CommandResult,
    reports: Vec<TestReport>,
    logs: Vec<CapturedLog>,
    budget: usize,
) -> ExecutionFeedback {
    let program_section = render_program(&program, &logs);
    let tests_section = render_tests(&reports);
    let full = format!("{program_section}\n{tests_section}");
    let (loss_text, truncated) = truncate_head(&full, budget);
    ExecutionFeedback {
        program_section: truncate_head(&program_section, budget).0,
        tests_section: truncate_head(&tests_section, budget).0,
        program,
        reports,
        logs,
        loss_text,
        truncated,
        provenance: Provenance::Environment,
    }
}

fn render_stream(out: &mut String, label: &str, s: &CapturedStream) {
    let text = s.text.trim_end();
    let kept = tail(text, PROGRAM_STREAM_TAIL);
    if text.is_empty() {
        let _ = writeln!(out, "{label}: (empty)");
        return;
    }
    let _ = writeln!(out, "{label}:");
    if kept.len() < text.len() {
        let _ = writeln!(out, "[... {} bytes omitted ...]", text.len() - kept.len());
    }
    out.push_str(kept);
    out.push('\n');
    if s.truncated {
        let _ = writeln!(out, "[{label} was cut off by the sandbox output cap]");
    }
}

fn render_program(program: &CommandResult, logs: &[CapturedLog]) -> String {
    let mut out = String::from("## Program execution\n");
    if program.command.is_empty() {
        out.push_str("command: (not run)\n");
    } else {
        let _ = writeln!(out, "command: {}", program.command.join(" "));
    }
    let exit = match program.exit {
        ExitKind::Code(c) => format!("exit code {c}"),
        ExitKind::Signal(s) => format!("killed by signal {s}"),
        ExitKind::Killed => "killed: wall-clock timeout".to_string(),
    };
    let _ = writeln!(out, "status: {exit}");
    render_stream(&mut out, "stdout", &program.stdout);
    render_stream(&mut out, "stderr", &program.stderr);
    if !logs.is_empty() {
        out.push_str("\n## Captured logs\n");
        for log in logs {
            let _ = writeln!(out, "### {}", log.name);
            if log.truncated {
                out.push_str("[... earlier log lines omitted ...]\n");
            }
            out.push_str(log.text.trim_end());
            out.push('\n');
        }
    }
    out
}

fn counts_line(reports: &[&TestReport]) -> String {
    let n = |s| reports.iter().map(|r| r.count(s)).sum::<usize>();
    format!(
        "{} passed, {} failed, {} errors, {} skipped",
        n(TestStatus::Pass),
        n(TestStatus::Fail),
        n(TestStatus::Error),
        n(TestStatus::Skip)
    )
}

fn render_tests(reports: &[TestReport]) -> String {
    let mut out = String::from("## Test results\n");
    for r in reports {
        let _ = writeln!(out, "{}: {}", r.suite, counts_line(&[r]));
    }
    let all: Vec<&TestReport> = reports.iter().collect();
    let _ = writeln!(out, "TOTAL: {}", counts_line(&all));
    let total: usize = reports.iter().map(|r| r.cases.len()).sum();
    let failing: Vec<_> = reports.iter().flat_map(|r| r.failing()).collect();
    if total == 0 {
        let _ = writeln!(out, "{NO_CASES_MARKER}");
    } else if failing.is_empty() {
        let _ = writeln!(out, "{ALL_PASSED_MARKER}");
    } else {
        out.push_str("\n## Failures\n");
        for case in failing {
            let _ = writeln!(out, "### {} [{}]", case.id, case.status);
            let msg = case.message.trim_end();
            if !msg.is_empty() {
                out.push_str(msg);
                out.push('\n');
            }
        }
    }
    out
}

fn truncate_head(text: &str, budget: usize) -> (String, bool) {
    if text.len() <= budget {
        return (text.to_string(), false);
    }
    // Marker width computed with the largest possible count so the result
    // stays within budget.
    let widest = marker(text.len()).len();
    if budget <= widest {
        return (tail(text, budget).to_string(), true);
    }
    let start = ceil_char_boundary(text, text.len() - (budget - widest));
    (format!("{}{}", marker(start), &text[start..]), true)
}

fn marker(dropped: usize) -> String {
    format!("[... {dropped} bytes of earlier feedback truncated ...]\n")
}
