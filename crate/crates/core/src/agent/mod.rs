//! Prompt rendering and reply parsing for the six agent roles.
//!
//! Templates are plain data (see `templates/`); replies are parsed by small
//! line-oriented grammars. Every parse failure is a [`ParseError`], which the
//! caller may retry by re-prompting with the error text.

mod gradient;
mod patch;
mod report;
mod template;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::GraphError;

pub use gradient::{parse_gradient, parse_gradient_with_prefix, Diagnosis, GradientKind, TextualGradient};
pub use patch::{is_test_filename, parse_file_patches, validate_filename, FilePatch, UnsafeFilename};
pub use report::{parse_update_report, parse_update_report_with_limit, RequirementProgress, UpdateReport};
pub use template::{placeholders, render_prompt, RenderError, RenderedPrompt, TemplateId, TemplateSet};

/// Filename prefix that marks a test suite.
pub const DEFAULT_TEST_PREFIX: &str = "test_";

/// The software task handed to the teams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub description: String,
    pub modality: String,
    pub language: String,
    #[serde(default)]
    pub requirements: Vec<String>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<(), String> {
        if self.description.trim().is_empty() {
            return Err("task description is empty".into());
        }
        Ok(())
    }

    /// Requirements list; falls back to the description as a single item.
    pub fn requirements(&self) -> Vec<String> {
        if self.requirements.is_empty() {
            vec![self.description.clone()]
        } else {
            self.requirements.clone()
        }
    }

    /// Requirements as a numbered list, one per line.
    pub fn requirements_text(&self) -> String {
        self.requirements()
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{}. {}", i + 1, r))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("no `FILENAME` + fenced code block pair found in reply")]
    NoPatchesFound,
    #[error("reply matches no gradient shape: {0}")]
    UnparsableGradient(String),
    #[error("invalid boolean {value:?} for `{field}`")]
    InvalidBoolean { field: String, value: String },
    #[error("progress entry field `{0}` appears before any `requirement:` line")]
    OrphanField(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl ParseError {
    /// Whether re-prompting the agent can fix the problem. Model output
    /// errors are always worth another attempt.
    pub fn is_retryable(&self) -> bool {
        true
    }
}
