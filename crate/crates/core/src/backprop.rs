//! Textual backpropagation: the gradient agent diagnoses the feedback, the
//! updating agent rewrites the coding team, and [`apply_update`] turns that
//! rewrite into a new network.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    parse_gradient_with_prefix, parse_update_report_with_limit, GradientKind, RequirementProgress, TaskSpec,
    TemplateId, TextualGradient, UpdateReport,
};
use crate::environment::ExecutionFeedback;
use crate::graph::{build_network, AgentRole, GraphError, MacNetwork};
use crate::runtime::{AgentCallError, AgentRuntime};
use crate::workspace::Workspace;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackpropError {
    #[error("gradient agent failed: {0}")]
    GradientFailed(AgentCallError),
    #[error("updating agent failed: {0}")]
    UpdateFailed(AgentCallError),
    #[error("no update is needed when the gradient reports no error")]
    NothingToUpdate,
}

/// Everything the gradient agent looks at. The loss must be an
/// [`ExecutionFeedback`], which only the environment can produce.
///
/// ```compile_fail
/// use evoloop::backprop::GradientContext;
/// fn swap(ctx: GradientContext, other: &GradientContext) -> GradientContext {
///     GradientContext { feedback: other.feedback().clone(), ..ctx }
/// }
/// ```
#[derive(Debug, Clone)]
pub struct GradientContext {
    pub task: TaskSpec,
    pub code: Workspace,
    pub tests: Workspace,
    feedback: ExecutionFeedback,
}

impl GradientContext {
    pub fn new(task: TaskSpec, code: Workspace, tests: Workspace, feedback: ExecutionFeedback) -> Self {
        GradientContext {
            task,
            code,
            tests,
            feedback,
        }
    }

    pub fn feedback(&self) -> &ExecutionFeedback {
        &self.feedback
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientOutcome {
    pub gradient: TextualGradient,
    pub retries: u32,
}

pub fn compute_gradient(rt: &AgentRuntime<'_>, ctx: &GradientContext) -> Result<GradientOutcome, BackpropError> {
    let settings = rt.settings();
    let bindings = BTreeMap::from([
        ("codes".to_string(), ctx.code.listing(settings.listing_budget)),
        ("test_reports".to_string(), ctx.feedback.program_section().to_string()),
        ("test_codes".to_string(), ctx.tests.listing(settings.listing_budget)),
        ("testcase_reports".to_string(), ctx.feedback.tests_section().to_string()),
    ]);
    let prefix = settings.test_prefix.clone();
    let out = rt
        .call(TemplateId::GradientAgent, &ctx.task, &bindings, "", |reply| {
            parse_gradient_with_prefix(reply, &prefix)
        })
        .map_err(BackpropError::GradientFailed)?;
    tracing::info!(
        kind = out.value.kind.as_str(),
        diagnoses = out.value.diagnoses.len(),
        "gradient computed"
    );
    Ok(GradientOutcome {
        gradient: out.value,
        retries: out.retries,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateOutcome {
    pub report: UpdateReport,
    pub retries: u32,
}

/// Asks the updating agent for a new coding team. Drafts that do not form a
/// valid network are sent back for repair like any other format error.
pub fn compute_update(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    net: &MacNetwork,
    code: &Workspace,
    feedback: &ExecutionFeedback,
    gradient: &TextualGradient,
) -> Result<UpdateOutcome, BackpropError> {
    if gradient.kind == GradientKind::NoError {
        return Err(BackpropError::NothingToUpdate);
    }
    let settings = rt.settings();
    let draft = net.to_draft();
    let bindings = BTreeMap::from([
        ("composition".to_string(), draft.composition_lines()),
        ("workflow".to_string(), draft.workflow_lines()),
        ("codes".to_string(), code.listing(settings.listing_budget)),
        ("test_reports".to_string(), feedback.program_section().to_string()),
        ("issues".to_string(), gradient.issues_text()),
    ]);
    let max_nodes = settings.max_nodes;
    let out = rt
        .call(TemplateId::UpdatingAgent, task, &bindings, "", |reply| {
            let report = parse_update_report_with_limit(reply, max_nodes)?;
            build_network(&report.draft, AgentRole::Coder)?;
            Ok(report)
        })
        .map_err(BackpropError::UpdateFailed)?;
    Ok(UpdateOutcome {
        report: out.value,
        retries: out.retries,
    })
}

/// The structural difference between two coding teams.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedUpdate {
    pub previous: MacNetwork,
    pub new: MacNetwork,
    pub removed: Vec<String>,
    pub added: Vec<String>,
    /// Labels present before and after, including rewritten ones.
    pub retained: Vec<String>,
    /// Retained labels whose subtask text changed.
    pub rewritten: Vec<String>,
    pub progress: Vec<RequirementProgress>,
}

/// Builds the network described by `report` and classifies its nodes
/// against `prev` by label. `prev` is never modified.
pub fn apply_update(prev: &MacNetwork, report: &UpdateReport) -> Result<AppliedUpdate, GraphError> {
    let new = build_network(&report.draft, AgentRole::Coder)?;
    let before: BTreeSet<&str> = prev.nodes().iter().map(|n| n.id.as_str()).collect();
    let after: BTreeSet<&str> = new.nodes().iter().map(|n| n.id.as_str()).collect();
    let sorted = |set: BTreeSet<&str>| {
        let mut v: Vec<String> = set.into_iter().map(str::to_string).collect();
        v.sort_by(|a, b| crate::graph::label_order(a, b));
        v
    };
    let retained: BTreeSet<&str> = before.intersection(&after).copied().collect();
    let rewritten: BTreeSet<&str> = retained
        .iter()
        .copied()
        .filter(|id| prev.node(id).map(|n| &n.subtask) != new.node(id).map(|n| &n.subtask))
        .collect();
    Ok(AppliedUpdate {
        removed: sorted(before.difference(&after).copied().collect()),
        added: sorted(after.difference(&before).copied().collect()),
        retained: sorted(retained),
        rewritten: sorted(rewritten),
        progress: report.progress.clone(),
        previous: prev.clone(),
        new,
    })
}
