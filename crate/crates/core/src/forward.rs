//! Team self-organization and the feed-forward pass over an agent DAG.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::OnceLock;
use std::thread;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{is_test_filename, parse_file_patches, FilePatch, ParseError, TaskSpec, TemplateId};
use crate::graph::{
    build_network, detect_label_kind, parse_network_draft_with_limit, topological_order, topological_order_by,
    AgentRole, LabelKind, MacNetwork,
};
use crate::runtime::{AgentCallError, AgentRuntime};
use crate::workspace::{tail, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeamKind {
    Coding,
    Testing,
}

impl fmt::Display for TeamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TeamKind::Coding => "coding",
            TeamKind::Testing => "testing",
        })
    }
}

/// A patch an agent emitted that the engine refused to merge.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedPatch {
    pub filename: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub node_id: String,
    pub prompt_digest: String,
    pub reply_digest: String,
    /// Files merged from this node, in reply order.
    pub patches: Vec<String>,
    pub rejected: Vec<RejectedPatch>,
    pub retries: u32,
}

/// One record per executed node, in execution order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub records: Vec<NodeRecord>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn rejected(&self) -> impl Iterator<Item = (&str, &RejectedPatch)> {
        self.records
            .iter()
            .flat_map(|r| r.rejected.iter().map(move |p| (r.node_id.as_str(), p)))
    }
}

/// Workspace and trace up to the node that failed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialForward {
    pub workspace: Workspace,
    pub trace: ForwardTrace,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForwardError {
    #[error("{kind} organizer failed after {attempts} attempts: {last}")]
    OrganizationFailed {
        kind: TeamKind,
        attempts: u32,
        last: AgentCallError,
    },
    #[error("agent `{node}` failed: {source}")]
    AgentFailed {
        node: String,
        source: AgentCallError,
        partial: Box<PartialForward>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Organization {
    pub network: MacNetwork,
    pub retries: u32,
    pub prompt_digest: String,
    pub reply_digest: String,
}

/// Asks the coding or testing organizer for a team. Coding teams are
/// relabelled `Programmer N` so the updating agent can refer to them.
pub fn self_organize(rt: &AgentRuntime<'_>, task: &TaskSpec, kind: TeamKind) -> Result<Organization, ForwardError> {
    let settings = rt.settings();
    let max_nodes = settings.max_nodes;
    let (template, role) = match kind {
        TeamKind::Coding => (TemplateId::CodingOrganizer, AgentRole::Coder),
        TeamKind::Testing => (TemplateId::TestingOrganizer, AgentRole::Tester),
    };
    let mut ctx = BTreeMap::new();
    if kind == TeamKind::Coding {
        ctx.insert("ideas".to_string(), settings.ideas.clone());
        ctx.insert("codes".to_string(), String::new());
        ctx.insert("num_agents".to_string(), max_nodes.to_string());
    }
    let parse = |reply: &str| -> Result<MacNetwork, ParseError> {
        let label_kind = detect_label_kind(reply).unwrap_or(LabelKind::Task);
        let mut draft = parse_network_draft_with_limit(reply, label_kind, max_nodes)?;
        if kind == TeamKind::Coding {
            draft = draft.relabel(LabelKind::Programmer);
        }
        Ok(build_network(&draft, role)?)
    };
    match rt.call(template, task, &ctx, "", parse) {
        Ok(out) => {
            tracing::info!(%kind, nodes = out.value.len(), retries = out.retries, "team organized");
            Ok(Organization {
                network: out.value,
                retries: out.retries,
                prompt_digest: out.prompt_digest,
                reply_digest: out.reply_digest,
            })
        }
        Err(last) => Err(ForwardError::OrganizationFailed {
            kind,
            attempts: match &last {
                AgentCallError::Parse { attempts, .. } => *attempts,
                _ => 1,
            },
            last,
        }),
    }
}

/// Runs the coding team over `seed` and returns the merged workspace.
pub fn forward(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    net: &MacNetwork,
    seed: &Workspace,
) -> Result<(Workspace, ForwardTrace), ForwardError> {
    run_team(rt, task, net, TeamKind::Coding, seed, &Workspace::new(), None)
}

/// Runs the testing team against `code` and returns the test workspace.
/// `only` restricts execution to the named nodes (their ancestors' output is
/// taken from `seed_tests`).
pub fn forward_tests(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    net: &MacNetwork,
    code: &Workspace,
    seed_tests: &Workspace,
    only: Option<&BTreeSet<String>>,
) -> Result<(Workspace, ForwardTrace), ForwardError> {
    run_team(rt, task, net, TeamKind::Testing, seed_tests, code, only)
}

/// Suite filename assigned to the testing node at topological position `i`.
pub fn test_file_name(prefix: &str, index: usize, language: &str) -> String {
    format!("{prefix}requirement_{index}.{}", source_extension(language))
}

pub fn source_extension(language: &str) -> &'static str {
    match language.trim().to_ascii_lowercase().as_str() {
        "javascript" | "js" => "js",
        "typescript" | "ts" => "ts",
        "rust" => "rs",
        "java" => "java",
        "go" | "golang" => "go",
        "c" => "c",
        "c++" | "cpp" => "cpp",
        "html" => "html",
        _ => "py",
    }
}

struct NodeResult {
    reply: String,
    patches: Vec<FilePatch>,
    record: NodeRecord,
}

fn run_team(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    net: &MacNetwork,
    kind: TeamKind,
    seed: &Workspace,
    reference: &Workspace,
    only: Option<&BTreeSet<String>>,
) -> Result<(Workspace, ForwardTrace), ForwardError> {
    let order = topological_order_by(net, rt.tie_break);
    // Suite names follow the canonical order so they do not depend on the
    // sibling order hook.
    let canonical = topological_order(net);
    let position: BTreeMap<&str, usize> = canonical.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let seed = seed.reseeded();
    let selected: Vec<&str> = order
        .iter()
        .map(String::as_str)
        .filter(|id| only.is_none_or(|set| set.contains(*id)))
        .collect();

    let width = if rt.provider().supports_concurrency() {
        rt.settings().parallelism.max(1)
    } else {
        1
    };

    let mut done: BTreeMap<&str, NodeResult> = BTreeMap::new();
    let mut pending: Vec<&str> = selected.clone();
    while !pending.is_empty() {
        let ready: Vec<&str> = pending
            .iter()
            .copied()
            .filter(|id| {
                net.predecessors(id)
                    .iter()
                    .all(|p| done.contains_key(p) || !selected.contains(p))
            })
            .take(width)
            .collect();
        debug_assert!(!ready.is_empty(), "acyclic network always has a ready node");

        let results: Vec<(&str, Result<NodeResult, AgentCallError>)> = if ready.len() == 1 {
            let id = ready[0];
            vec![(
                id,
                run_node(
                    rt,
                    task,
                    net,
                    kind,
                    id,
                    position[id],
                    &canonical,
                    &seed,
                    reference,
                    &done,
                ),
            )]
        } else {
            thread::scope(|s| {
                let handles: Vec<_> = ready
                    .iter()
                    .map(|&id| {
                        let done = &done;
                        let (canonical, seed) = (&canonical, &seed);
                        let pos = position[id];
                        (
                            id,
                            s.spawn(move || run_node(rt, task, net, kind, id, pos, canonical, seed, reference, done)),
                        )
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|(id, h)| (id, h.join().expect("agent thread panicked")))
                    .collect()
            })
        };

        // Results are folded back in topological order whatever finished first.
        for (id, result) in results {
            match result {
                Ok(r) => {
                    done.insert(id, r);
                }
                Err(source) => {
                    let (workspace, trace) = merge(&seed, &canonical, &order, &done);
                    return Err(ForwardError::AgentFailed {
                        node: id.to_string(),
                        source,
                        partial: Box::new(PartialForward { workspace, trace }),
                    });
                }
            }
        }
        pending.retain(|id| !done.contains_key(id));
    }

    Ok(merge(&seed, &canonical, &order, &done))
}

/// Seed plus every finished node's patches, folded in canonical topological
/// order so that siblings writing the same file resolve the same way under
/// any tie-break. The trace follows execution order.
fn merge(
    seed: &Workspace,
    canonical: &[String],
    order: &[String],
    done: &BTreeMap<&str, NodeResult>,
) -> (Workspace, ForwardTrace) {
    let mut ws = seed.clone();
    for id in canonical {
        if let Some(r) = done.get(id.as_str()) {
            for p in &r.patches {
                ws.apply(p, id);
            }
        }
    }
    let mut trace = ForwardTrace::default();
    for id in order {
        if let Some(r) = done.get(id.as_str()) {
            trace.records.push(r.record.clone());
        }
    }
    (ws, trace)
}

#[allow(clippy::too_many_arguments)]
fn run_node(
    rt: &AgentRuntime<'_>,
    task: &TaskSpec,
    net: &MacNetwork,
    kind: TeamKind,
    id: &str,
    position: usize,
    canonical: &[String],
    seed: &Workspace,
    reference: &Workspace,
    done: &BTreeMap<&str, NodeResult>,
) -> Result<NodeResult, AgentCallError> {
    let settings = rt.settings();
    let node = net.node(id).expect("node from this network");

    // What this node sees: the seed plus everything its ancestors wrote.
    let ancestors = net.ancestors(id);
    let mut view = seed.clone();
    for a in canonical.iter().filter(|a| ancestors.contains(*a)) {
        if let Some(r) = done.get(a.as_str()) {
            for p in &r.patches {
                view.apply(p, a);
            }
        }
    }

    let mut preds = Vec::new();
    for p in net.predecessors(id) {
        if let Some(r) = done.get(p) {
            preds.push(format!(
                "{p}:\n{}",
                tail(r.reply.trim_end(), settings.predecessor_budget)
            ));
        }
    }
    let predecessor_outputs = preds.join("\n\n");

    let mut ctx = BTreeMap::new();
    ctx.insert("agent_id".to_string(), id.to_string());
    ctx.insert("subtask".to_string(), node.subtask.clone());
    ctx.insert("predecessor_outputs".to_string(), predecessor_outputs.clone());
    let template = match kind {
        TeamKind::Coding => {
            ctx.insert("codes".to_string(), view.listing(settings.listing_budget));
            ctx.insert(
                "unimplemented_file".to_string(),
                unimplemented_files(&view, &task.language),
            );
            ctx.insert("additional_note".to_string(), settings.additional_note.clone());
            TemplateId::CodingAgent
        }
        TeamKind::Testing => {
            ctx.insert("codes".to_string(), reference.listing(settings.listing_budget));
            ctx.insert(
                "test_file_name".to_string(),
                test_file_name(&settings.test_prefix, position, &task.language),
            );
            TemplateId::TestingAgent
        }
    };
    let extra = if predecessor_outputs.is_empty() {
        String::new()
    } else {
        format!("\n\nOutputs of the agents that worked before you:\n\n{predecessor_outputs}")
    };

    let out = rt.call(template, task, &ctx, &extra, parse_file_patches)?;
    let mut patches = Vec::new();
    let mut rejected = Vec::new();
    for p in out.value {
        let is_test = is_test_filename(p.filename(), &settings.test_prefix);
        let reason = match kind {
            TeamKind::Coding if is_test => Some("coding agents may not write test suites"),
            TeamKind::Testing if !is_test => Some("testing agents may only write test suites"),
            _ => None,
        };
        match reason {
            Some(reason) => {
                tracing::warn!(node = id, file = p.filename(), reason, "patch rejected");
                rejected.push(RejectedPatch {
                    filename: p.filename().to_string(),
                    reason: reason.to_string(),
                });
            }
            None => patches.push(p),
        }
    }
    tracing::debug!(
        node = id,
        patches = patches.len(),
        retries = out.retries,
        "agent finished"
    );
    Ok(NodeResult {
        record: NodeRecord {
            node_id: id.to_string(),
            prompt_digest: out.prompt_digest,
            reply_digest: out.reply_digest,
            patches: patches.iter().map(|p| p.filename().to_string()).collect(),
            rejected,
            retries: out.retries,
        },
        reply: out.reply,
        patches,
    })
}

fn stdlib_modules() -> &'static BTreeSet<&'static str> {
    static SET: OnceLock<BTreeSet<&'static str>> = OnceLock::new();
    SET.get_or_init(|| {
        include_str!("../data/python_stdlib_modules.txt")
            .lines()
            .map(str::trim)
            .collect()
    })
}

/// Well-known third-party packages an agent should not be asked to write.
const THIRD_PARTY: &[&str] = &[
    "pygame",
    "numpy",
    "pandas",
    "requests",
    "flask",
    "django",
    "pytest",
    "scipy",
    "matplotlib",
    "PIL",
    "yaml",
    "bs4",
    "sklearn",
    "torch",
    "tensorflow",
    "selenium",
    "fastapi",
    "pydantic",
];

fn import_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"^\s*(?:from\s+([A-Za-z_][\w.]*)\s+import\b|import\s+([A-Za-z_][\w.]*(?:\s*,\s*[A-Za-z_][\w.]*)*))")
            .unwrap()
    })
}

/// Files imported by the workspace's Python sources but not present in it.
/// Standard-library and common third-party modules are ignored, as are
/// relative imports. Other languages yield an empty string.
pub fn unimplemented_files(ws: &Workspace, language: &str) -> String {
    if source_extension(language) != "py" {
        return String::new();
    }
    let mut missing = BTreeSet::new();
    for (name, content) in ws.files() {
        if !name.ends_with(".py") {
            continue;
        }
        for line in content.lines() {
            let Some(c) = import_regex().captures(line) else {
                continue;
            };
            let modules: Vec<&str> = match (c.get(1), c.get(2)) {
                (Some(m), _) => vec![m.as_str()],
                (None, Some(list)) => list.as_str().split(',').map(str::trim).collect(),
                _ => continue,
            };
            for m in modules {
                let top = m.split('.').next().unwrap_or(m);
                if stdlib_modules().contains(top) || THIRD_PARTY.contains(&top) {
                    continue;
                }
                let file = format!("{top}.py");
                let package = format!("{top}/");
                if ws.get(&file).is_some() || ws.filenames().any(|f| f.starts_with(&package)) {
                    continue;
                }
                missing.insert(file);
            }
        }
    }
    missing.into_iter().collect::<Vec<_>>().join(", ")
}
