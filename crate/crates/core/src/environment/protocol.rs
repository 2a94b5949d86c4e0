//! Runner report encoding.
//!
//! A runner invoked as `<runner> <suite file> --report <path>` writes `path`
//! as UTF-8 text:
//!
//! ```text
//! evoloop-report v1
//! <test_id>\t<status>\t<message>
//! ...
//! ```
//!
//! One record per executed case, each terminated by `\n`. `status` is one of
//! `pass`, `fail`, `error`, `skip`. In `test_id` and `message` the characters
//! backslash, tab, newline and carriage return are written as `\\`, `\t`,
//! `\n` and `\r`; no other escapes exist. Test ids are unique within a file.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const REPORT_HEADER: &str = "evoloop-report v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestStatus {
    Pass,
    Fail,
    Error,
    Skip,
}

impl TestStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TestStatus::Pass => "pass",
            TestStatus::Fail => "fail",
            TestStatus::Error => "error",
            TestStatus::Skip => "skip",
        }
    }

    pub fn is_failing(self) -> bool {
        matches!(self, TestStatus::Fail | TestStatus::Error)
    }
}

impl fmt::Display for TestStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TestStatus {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pass" => Ok(TestStatus::Pass),
            "fail" => Ok(TestStatus::Fail),
            "error" => Ok(TestStatus::Error),
            "skip" => Ok(TestStatus::Skip),
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestCase {
    pub id: String,
    pub status: TestStatus,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestReport {
    pub suite: String,
    pub cases: Vec<TestCase>,
}

impl TestReport {
    pub fn count(&self, status: TestStatus) -> usize {
        self.cases.iter().filter(|c| c.status == status).count()
    }

    pub fn failing(&self) -> impl Iterator<Item = &TestCase> {
        self.cases.iter().filter(|c| c.status.is_failing())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("missing `{REPORT_HEADER}` header")]
    MissingHeader,
    #[error("record {line}: {message}")]
    BadRecord { line: usize, message: String },
    #[error("duplicate test id {0:?}")]
    DuplicateId(String),
}

pub fn escape_field(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
    out
}

pub fn unescape_field(s: &str) -> Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('r') => out.push('\r'),
            Some(other) => return Err(format!("unknown escape `\\{other}`")),
            None => return Err("dangling backslash".into()),
        }
    }
    Ok(out)
}

pub fn encode_report(cases: &[TestCase]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for c in cases {
        out.push_str(&escape_field(&c.id));
        out.push('\t');
        out.push_str(c.status.as_str());
        out.push('\t');
        out.push_str(&escape_field(&c.message));
        out.push('\n');
    }
    out
}

pub fn decode_report(text: &str) -> Result<Vec<TestCase>, ProtocolError> {
    let body = text
        .strip_prefix(REPORT_HEADER)
        .and_then(|r| r.strip_prefix('\n'))
        .ok_or(ProtocolError::MissingHeader)?;
    if !body.is_empty() && !body.ends_with('\n') {
        return Err(ProtocolError::BadRecord {
            line: body.lines().count() + 1,
            message: "last record is not newline-terminated".into(),
        });
    }
    let mut seen = BTreeSet::new();
    let mut cases = Vec::new();
    for (i, line) in body.lines().enumerate() {
        let bad = |message: String| ProtocolError::BadRecord { line: i + 2, message };
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, status, message] = fields.as_slice() else {
            return Err(bad(format!("expected 3 tab-separated fields, found {}", fields.len())));
        };
        let id = unescape_field(id).map_err(bad)?;
        if id.is_empty() {
            return Err(bad("empty test id".into()));
        }
        let status = status.parse().map_err(bad)?;
        let message = unescape_field(message).map_err(bad)?;
        if !seen.insert(id.clone()) {
            return Err(ProtocolError::DuplicateId(id));
        }
        cases.push(TestCase { id, status, message });
    }
    Ok(cases)
}
