//! Requirement-oriented accuracy: each requirement is bound to one or more
//! test cases and counts as satisfied only when all of them pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::environment::{TestReport, TestStatus};
use crate::evolution::EvolutionRun;

pub const STRUCTURED_FORMAT: &str = "evoloop-accuracy v1";
pub const NO_REQUIREMENTS_MARKER: &str = "no requirements bound";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Basic,
    Advanced,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Basic => "basic",
            Difficulty::Advanced => "advanced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequirementBinding {
    pub text: String,
    pub difficulty: Difficulty,
    pub tests: Vec<String>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("requirement {requirement:?} is bound to unknown test id {id:?}")]
    UnknownTestId { requirement: String, id: String },
    #[error("requirement {0:?} has no test ids")]
    EmptyBinding(String),
    #[error("bindings file: {0}")]
    Bindings(String),
    #[error("structured report: {0}")]
    Structured(String),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BindingsFile {
    #[serde(default)]
    requirement: Vec<RequirementBinding>,
}

/// Parses a TOML bindings file:
///
/// ```toml
/// [[requirement]]
/// text = "The player moves with the arrow keys."
/// difficulty = "basic"
/// tests = ["test_requirement_0.py::move"]
/// ```
pub fn parse_bindings(text: &str) -> Result<Vec<RequirementBinding>, MetricsError> {
    let file: BindingsFile = toml::from_str(text).map_err(|e| MetricsError::Bindings(e.to_string()))?;
    for b in &file.requirement {
        if b.tests.is_empty() {
            return Err(MetricsError::EmptyBinding(b.text.clone()));
        }
    }
    Ok(file.requirement)
}

pub fn load_bindings(path: &Path) -> Result<Vec<RequirementBinding>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|e| MetricsError::Bindings(format!("{}: {e}", path.display())))?;
    parse_bindings(&text)
}

/// An exact passed/total ratio.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub passed: usize,
    pub total: usize,
}

impl Ratio {
    /// `None` when nothing was counted.
    pub fn value(self) -> Option<f64> {
        (self.total > 0).then(|| self.passed as f64 / self.total as f64)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{}/{} ({:.2}%)", self.passed, self.total, v * 100.0),
            None => f.write_str(NO_REQUIREMENTS_MARKER),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementStatus {
    pub text: String,
    pub difficulty: Difficulty,
    pub passed: bool,
    /// Bound cases that did not pass.
    pub failing: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub overall: Ratio,
    pub by_difficulty: BTreeMap<Difficulty, Ratio>,
    pub requirements: Vec<RequirementStatus>,
}

/// A requirement passes iff every bound case passed. A case id reported
/// more than once must pass every time.
pub fn compute_accuracy(
    bindings: &[RequirementBinding],
    reports: &[TestReport],
) -> Result<AccuracyReport, MetricsError> {
    let mut outcome: HashMap<&str, bool> = HashMap::new();
    for case in reports.iter().flat_map(|r| &r.cases) {
        let pass = case.status == TestStatus::Pass;
        outcome
            .entry(case.id.as_str())
            .and_modify(|p| *p &= pass)
            .or_insert(pass);
    }
    let mut overall = Ratio::default();
    let mut by_difficulty = BTreeMap::from([
        (Difficulty::Basic, Ratio::default()),
        (Difficulty::Advanced, Ratio::default()),
    ]);
    let mut requirements = Vec::with_capacity(bindings.len());
    for b in bindings {
        if b.tests.is_empty() {
            return Err(MetricsError::EmptyBinding(b.text.clone()));
        }
        let mut failing = Vec::new();
        for id in &b.tests {
            match outcome.get(id.as_str()) {
                Some(true) => {}
                Some(false) => failing.push(id.clone()),
                None => {
                    return Err(MetricsError::UnknownTestId {
                        requirement: b.text.clone(),
                        id: id.clone(),
                    })
                }
            }
        }
        let passed = failing.is_empty();
        for r in [
            &mut overall,
            by_difficulty.get_mut(&b.difficulty).expect("both difficulties present"),
        ] {
            r.total += 1;
            r.passed += usize::from(passed);
        }
        requirements.push(RequirementStatus {
            text: b.text.clone(),
            difficulty: b.difficulty,
            passed,
            failing,
        });
    }
    Ok(AccuracyReport {
        overall,
        by_difficulty,
        requirements,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Structured,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct IterationLine {
    k: u32,
    passed: usize,
    total: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StructuredReport {
    format: String,
    task: String,
    termination: String,
    iterations: Vec<IterationLine>,
    accuracy: AccuracyReport,
    /// Relative path -> SHA-256 for every persisted artifact.
    artifacts: BTreeMap<String, String>,
}

pub fn render_report(run: &EvolutionRun, acc: &AccuracyReport, format: ReportFormat) -> String {
    let iterations: Vec<IterationLine> = run
        .snapshots
        .iter()
        .map(|s| IterationLine {
            k: s.k,
            passed: s.feedback.count(TestStatus::Pass),
            total: s.feedback.total_cases(),
        })
        .collect();
    match format {
        ReportFormat::Text => {
            let mut out = format!("task: {}\ntermination: {}\n", run.task.name, run.termination);
            for it in &iterations {
                out.push_str(&format!(
                    "iteration {}: {}/{} tests passed\n",
                    it.k, it.passed, it.total
                ));
            }
            out.push_str(&format!("accuracy: {}\n", acc.overall));
            for (d, r) in &acc.by_difficulty {
                out.push_str(&format!("  {}: {}\n", d.as_str(), r));
            }
            for r in &acc.requirements {
                let mark = if r.passed { "pass" } else { "FAIL" };
                out.push_str(&format!("[{mark}] ({}) {}\n", r.difficulty.as_str(), r.text));
                for id in &r.failing {
                    out.push_str(&format!("       not passing: {id}\n"));
                }
            }
            out
        }
        ReportFormat::Structured => {
            let doc = StructuredReport {
                format: STRUCTURED_FORMAT.to_string(),
                task: run.task.name.clone(),
                termination: run.termination.to_string(),
                iterations,
                accuracy: acc.clone(),
                artifacts: run.snapshots.iter().flat_map(|s| s.artifact_digests()).collect(),
            };
            let mut text = serde_json::to_string_pretty(&doc).expect("report serializes");
            text.push('\n');
            text
        }
    }
}

/// Reads the accuracy back out of a structured report.
pub fn parse_structured(text: &str) -> Result<AccuracyReport, MetricsError> {
    let doc: StructuredReport = serde_json::from_str(text).map_err(|e| MetricsError::Structured(e.to_string()))?;
    if doc.format != STRUCTURED_FORMAT {
        return Err(MetricsError::Structured(format!("unknown format {:?}", doc.format)));
    }
    Ok(doc.accuracy)
}
