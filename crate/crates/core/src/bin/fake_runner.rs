//! Scripted stand-in for a real test runner.
//!
//! Usage: `evoloop-fake-runner <suite> --report <path>`
//!
//! Every line of the suite of the form
//!
//! ```text
//! # case: <name> :: <check>
//! ```
//!
//! declares one case with id `<suite>::<name>`. Checks:
//!
//! - `file <path> contains <text>` passes when `<path>` exists and contains `<text>`
//! - `file <path> lacks <text>` passes when `<path>` exists and does not contain `<text>`
//! - `pass`, `skip`
//! - `fail <message>`, `error <message>`
//!
//! Paths are relative to the working directory. The report is written in the
//! runner protocol; the exit code is 0 whenever a report was written.

use std::fs;
use std::process::ExitCode;

use evoloop::environment::{encode_report, TestCase, TestStatus};

const CASE_MARKER: &str = "# case:";

fn check(spec: &str) -> (TestStatus, String) {
    let spec = spec.trim();
    let (verb, rest) = spec.split_once(' ').unwrap_or((spec, ""));
    match verb {
        "pass" => (TestStatus::Pass, String::new()),
        "skip" => (TestStatus::Skip, rest.to_string()),
        "fail" => (TestStatus::Fail, rest.to_string()),
        "error" => (TestStatus::Error, rest.to_string()),
        "file" => file_check(rest),
        other => (TestStatus::Error, format!("unknown check {other:?}")),
    }
}

fn file_check(rest: &str) -> (TestStatus, String) {
    let mut parts = rest.splitn(3, ' ');
    let (Some(path), Some(op), Some(needle)) = (parts.next(), parts.next(), parts.next()) else {
        return (TestStatus::Error, format!("malformed file check {rest:?}"));
    };
    let content = match fs::read_to_string(path) {
        Ok(c) => c,
        Err(e) => return (TestStatus::Fail, format!("cannot read {path}: {e}")),
    };
    let found = content.contains(needle);
    match (op, found) {
        ("contains", true) | ("lacks", false) => (TestStatus::Pass, String::new()),
        ("contains", false) => (
            TestStatus::Fail,
            format!("AssertionError: {path} does not contain {needle:?}"),
        ),
        ("lacks", true) => (TestStatus::Fail, format!("AssertionError: {path} contains {needle:?}")),
        _ => (TestStatus::Error, format!("unknown file operator {op:?}")),
    }
}

fn run(suite: &str) -> Result<Vec<TestCase>, String> {
    let text = fs::read_to_string(suite).map_err(|e| format!("cannot read suite {suite}: {e}"))?;
    let mut cases = Vec::new();
    for line in text.lines() {
        let Some(decl) = line.trim_start().strip_prefix(CASE_MARKER) else {
            continue;
        };
        let Some((name, spec)) = decl.split_once("::") else {
            return Err(format!("malformed case line {line:?}"));
        };
        let (status, message) = check(spec);
        cases.push(TestCase {
            id: format!("{suite}::{}", name.trim()),
            status,
            message,
        });
    }
    Ok(cases)
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let [suite, flag, report] = args.as_slice() else {
        eprintln!("usage: evoloop-fake-runner <suite> --report <path>");
        return ExitCode::from(64);
    };
    if flag != "--report" {
        eprintln!("usage: evoloop-fake-runner <suite> --report <path>");
        return ExitCode::from(64);
    }
    let cases = match run(suite) {
        Ok(c) => c,
        Err(msg) => {
            eprintln!("{msg}");
            return ExitCode::from(2);
        }
    };
    if let Err(e) = fs::write(report, encode_report(&cases)) {
        eprintln!("cannot write report {report}: {e}");
        return ExitCode::from(2);
    }
    ExitCode::SUCCESS
}
