//! Agent collaboration networks.
//!
//! An organizer agent describes a team as two text sections:
//!
//! ```text
//! ### COMPOSITION
//! Task 1: build GUI
//! Task 2: logging
//!
//! ### WORKFLOW
//! Task 1: []
//! Task 2: [Task 1]
//! ```
//!
//! [`parse_network_draft`] reads that grammar into a [`NetworkDraft`],
//! [`build_network`] validates it into an acyclic [`MacNetwork`], and
//! [`topological_order`] gives the deterministic execution schedule.
//! [`MacNetwork::to_canonical_text`] writes the same grammar back out, which is
//! the on-disk `network.txt` form.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::TemplateId;

/// Default cap on the number of agents an organizer may declare.
pub const DEFAULT_MAX_NODES: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("missing `{0}` section")]
    MissingSection(String),
    #[error("duplicate label `{label}` in {section}")]
    DuplicateLabel { label: String, section: String },
    #[error("`{label}` depends on undeclared `{dependency}`")]
    UnknownDependency { label: String, dependency: String },
    #[error("workflow entry `{0}` has no composition entry")]
    UnknownLabel(String),
    #[error("malformed line {line_no} in {section}: {line:?} ({reason})")]
    MalformedLine {
        section: String,
        line_no: usize,
        line: String,
        reason: String,
    },
    #[error("{count} agents declared, at most {max} allowed; merge related tasks")]
    TooManyNodes { count: usize, max: usize },
    #[error("workflow contains a cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("network has no agents")]
    EmptyNetwork,
    #[error("agent `{0}` has an empty subtask")]
    EmptySubtask(String),
    #[error("agent `{0}` has a multi-line subtask")]
    MultilineSubtask(String),
    #[error("invalid network: {0}")]
    Invalid(String),
}

/// The label prefix used by a team's grammar (`Task 1`, `Programmer 2`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    Task,
    Programmer,
}

impl LabelKind {
    pub fn prefix(self) -> &'static str {
        match self {
            LabelKind::Task => "Task",
            LabelKind::Programmer => "Programmer",
        }
    }

    pub fn label(self, n: u64) -> String {
        format!("{} {n}", self.prefix())
    }

    fn from_word(word: &str) -> Option<Self> {
        if word.eq_ignore_ascii_case("task") {
            Some(LabelKind::Task)
        } else if word.eq_ignore_ascii_case("programmer") {
            Some(LabelKind::Programmer)
        } else {
            None
        }
    }
}

impl fmt::Display for LabelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.prefix())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    Organizer,
    Coder,
    Tester,
    Gradient,
    Updater,
}

impl AgentRole {
    pub fn template(self) -> TemplateId {
        match self {
            AgentRole::Organizer => TemplateId::CodingOrganizer,
            AgentRole::Coder => TemplateId::CodingAgent,
            AgentRole::Tester => TemplateId::TestingAgent,
            AgentRole::Gradient => TemplateId::GradientAgent,
            AgentRole::Updater => TemplateId::UpdatingAgent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentNode {
    pub id: String,
    pub role: AgentRole,
    pub subtask: String,
    pub prompt_template_id: TemplateId,
}

/// Parsed but not yet validated team description.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDraft {
    /// `(label, subtask)` in declaration order.
    pub composition: Vec<(String, String)>,
    /// label -> labels it depends on.
    pub workflow: BTreeMap<String, Vec<String>>,
}

impl NetworkDraft {
    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.composition.iter().map(|(l, _)| l.as_str())
    }

    pub fn subtask(&self, label: &str) -> Option<&str> {
        self.composition
            .iter()
            .find(|(l, _)| l == label)
            .map(|(_, s)| s.as_str())
    }

    /// Rewrites every `<prefix> N` label (in composition and workflow) to the
    /// given kind, keeping the number.
    pub fn relabel(&self, kind: LabelKind) -> NetworkDraft {
        let map = |label: &str| -> String {
            match split_label(label) {
                Some((_, n)) => kind.label(n),
                None => label.to_string(),
            }
        };
        NetworkDraft {
            composition: self.composition.iter().map(|(l, s)| (map(l), s.clone())).collect(),
            workflow: self
                .workflow
                .iter()
                .map(|(l, deps)| (map(l), deps.iter().map(|d| map(d)).collect()))
                .collect(),
        }
    }

    /// The two sections in canonical grammar.
    pub fn to_canonical_text(&self) -> String {
        format!(
            "### COMPOSITION\n```\n{}```\n\n### WORKFLOW\n```\n{}```\n",
            self.composition_lines(),
            self.workflow_lines()
        )
    }

    pub fn composition_lines(&self) -> String {
        let mut out = String::new();
        for (label, subtask) in &self.composition {
            out.push_str(label);
            out.push_str(": ");
            out.push_str(subtask);
            out.push('\n');
        }
        out
    }

    pub fn workflow_lines(&self) -> String {
        let mut out = String::new();
        for (label, _) in &self.composition {
            let deps = self.workflow.get(label).map(Vec::as_slice).unwrap_or(&[]);
            out.push_str(label);
            out.push_str(": [");
            out.push_str(&deps.join(", "));
            out.push_str("]\n");
        }
        out
    }
}

/// Validated, acyclic agent graph. Construct with [`build_network`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawNetwork", into = "RawNetwork")]
pub struct MacNetwork {
    nodes: Vec<AgentNode>,
    edges: BTreeSet<(String, String)>,
}

#[derive(Serialize, Deserialize)]
struct RawNetwork {
    nodes: Vec<AgentNode>,
    edges: Vec<(String, String)>,
}

impl TryFrom<RawNetwork> for MacNetwork {
    type Error = GraphError;

    fn try_from(raw: RawNetwork) -> Result<Self, Self::Error> {
        MacNetwork::from_parts(raw.nodes, raw.edges)
    }
}

impl From<MacNetwork> for RawNetwork {
    fn from(net: MacNetwork) -> Self {
        RawNetwork {
            nodes: net.nodes,
            edges: net.edges.into_iter().collect(),
        }
    }
}

impl MacNetwork {
    /// Validates nodes and edges into a network.
    pub fn from_parts(
        nodes: Vec<AgentNode>,
        edges: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, GraphError> {
        if nodes.is_empty() {
            return Err(GraphError::EmptyNetwork);
        }
        let mut seen = BTreeSet::new();
        for node in &nodes {
            if !seen.insert(node.id.as_str()) {
                return Err(GraphError::DuplicateLabel {
                    label: node.id.clone(),
                    section: "network".into(),
                });
            }
            if matches!(node.role, AgentRole::Coder | AgentRole::Tester) && node.subtask.trim().is_empty() {
                return Err(GraphError::EmptySubtask(node.id.clone()));
            }
            if node.subtask.contains('\n') {
                return Err(GraphError::MultilineSubtask(node.id.clone()));
            }
        }
        let mut edge_set = BTreeSet::new();
        for (from, to) in edges {
            for end in [&from, &to] {
                if !seen.contains(end.as_str()) {
                    return Err(GraphError::Invalid(format!("edge endpoint `{end}` is not a node")));
                }
            }
            if from == to {
                return Err(GraphError::CycleDetected(vec![from]));
            }
            edge_set.insert((from, to));
        }
        let net = MacNetwork { nodes, edges: edge_set };
        if let Some(cycle) = find_cycle(&net) {
            return Err(GraphError::CycleDetected(cycle));
        }
        Ok(net)
    }

    pub fn nodes(&self) -> &[AgentNode] {
        &self.nodes
    }

    pub fn edges(&self) -> &BTreeSet<(String, String)> {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: &str) -> Option<&AgentNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.node(id).is_some()
    }

    /// Direct predecessors of `id`, in canonical tie-break order.
    pub fn predecessors(&self, id: &str) -> Vec<&str> {
        let mut preds: Vec<&str> = self
            .edges
            .iter()
            .filter(|(_, to)| to == id)
            .map(|(from, _)| from.as_str())
            .collect();
        preds.sort_by(|a, b| label_order(a, b));
        preds
    }

    /// All transitive predecessors of `id`.
    pub fn ancestors(&self, id: &str) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id.to_string()];
        while let Some(cur) = stack.pop() {
            for (from, to) in &self.edges {
                if *to == cur && out.insert(from.clone()) {
                    stack.push(from.clone());
                }
            }
        }
        out
    }

    pub fn to_draft(&self) -> NetworkDraft {
        let composition = self.nodes.iter().map(|n| (n.id.clone(), n.subtask.clone())).collect();
        let workflow = self
            .nodes
            .iter()
            .map(|n| {
                let deps = self.predecessors(&n.id).into_iter().map(str::to_string).collect();
                (n.id.clone(), deps)
            })
            .collect();
        NetworkDraft { composition, workflow }
    }

    pub fn to_canonical_text(&self) -> String {
        self.to_draft().to_canonical_text()
    }

    /// Reads a `network.txt` written by [`MacNetwork::to_canonical_text`].
    /// The label kind is taken from the first composition entry.
    pub fn from_canonical_text(text: &str, role: AgentRole, max_nodes: usize) -> Result<Self, GraphError> {
        let kind = detect_label_kind(text).unwrap_or(LabelKind::Task);
        let draft = parse_network_draft_with_limit(text, kind, max_nodes)?;
        build_network(&draft, role)
    }
}

/// Parses organizer output with the default node limit.
pub fn parse_network_draft(text: &str, label_kind: LabelKind) -> Result<NetworkDraft, GraphError> {
    parse_network_draft_with_limit(text, label_kind, DEFAULT_MAX_NODES)
}

pub fn parse_network_draft_with_limit(
    text: &str,
    label_kind: LabelKind,
    max_nodes: usize,
) -> Result<NetworkDraft, GraphError> {
    let lines: Vec<&str> = text.lines().collect();
    let section = |name: &str| {
        let (body, fenced) =
            section_body_fenced(&lines, name).ok_or_else(|| GraphError::MissingSection(name.into()))?;
        // Outside a fence, prose such as a closing remark is not an entry.
        Ok::<_, GraphError>(body.into_iter().filter(move |(_, l)| fenced || looks_like_entry(l)))
    };
    let composition_body = section("COMPOSITION")?;
    let workflow_body = section("WORKFLOW")?;

    let mut draft = NetworkDraft::default();
    for (line_no, line) in composition_body {
        let (label, rest) = parse_entry(line, label_kind).map_err(|reason| GraphError::MalformedLine {
            section: "COMPOSITION".into(),
            line_no: line_no + 1,
            line: line.to_string(),
            reason,
        })?;
        if draft.composition.iter().any(|(l, _)| *l == label) {
            return Err(GraphError::DuplicateLabel {
                label,
                section: "COMPOSITION".into(),
            });
        }
        draft.composition.push((label, rest.trim().to_string()));
    }
    if draft.composition.len() > max_nodes {
        return Err(GraphError::TooManyNodes {
            count: draft.composition.len(),
            max: max_nodes,
        });
    }

    for (line_no, line) in workflow_body {
        let malformed = |reason: String| GraphError::MalformedLine {
            section: "WORKFLOW".into(),
            line_no: line_no + 1,
            line: line.to_string(),
            reason,
        };
        let (label, rest) = parse_entry(line, label_kind).map_err(malformed)?;
        let deps = parse_dependency_list(rest, label_kind).map_err(malformed)?;
        if draft.workflow.contains_key(&label) {
            return Err(GraphError::DuplicateLabel {
                label,
                section: "WORKFLOW".into(),
            });
        }
        draft.workflow.insert(label, deps);
    }

    let declared: BTreeSet<&str> = draft.labels().collect();
    for (label, deps) in &draft.workflow {
        if !declared.contains(label.as_str()) {
            return Err(GraphError::UnknownLabel(label.clone()));
        }
        if let Some(dep) = deps.iter().find(|d| !declared.contains(d.as_str())) {
            return Err(GraphError::UnknownDependency {
                label: label.clone(),
                dependency: dep.clone(),
            });
        }
    }
    // Roots are often left out of the workflow listing.
    for (label, _) in &draft.composition {
        draft.workflow.entry(label.clone()).or_default();
    }
    Ok(draft)
}

/// Builds and validates a network: one node per composition entry, an edge
/// `dep -> label` for each dependency.
pub fn build_network(draft: &NetworkDraft, role: AgentRole) -> Result<MacNetwork, GraphError> {
    if draft.composition.is_empty() {
        return Err(GraphError::EmptyNetwork);
    }
    let nodes = draft
        .composition
        .iter()
        .map(|(label, subtask)| AgentNode {
            id: label.clone(),
            role,
            subtask: subtask.clone(),
            prompt_template_id: role.template(),
        })
        .collect();
    let mut edges = Vec::new();
    for (label, deps) in &draft.workflow {
        for dep in deps {
            if draft.subtask(dep).is_none() {
                return Err(GraphError::UnknownDependency {
                    label: label.clone(),
                    dependency: dep.clone(),
                });
            }
            edges.push((dep.clone(), label.clone()));
        }
        if draft.subtask(label).is_none() {
            return Err(GraphError::UnknownLabel(label.clone()));
        }
    }
    MacNetwork::from_parts(nodes, edges)
}

/// Sibling ordering used when several nodes are ready at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TieBreak {
    /// Ascending numeric label suffix, then lexicographic.
    #[default]
    Canonical,
    /// The exact reverse of [`TieBreak::Canonical`]; used to check that results
    /// do not depend on sibling order.
    Reversed,
}

impl TieBreak {
    pub fn compare(self, a: &str, b: &str) -> Ordering {
        match self {
            TieBreak::Canonical => label_order(a, b),
            TieBreak::Reversed => label_order(b, a),
        }
    }
}

pub fn topological_order(net: &MacNetwork) -> Vec<String> {
    topological_order_by(net, TieBreak::Canonical)
}

/// Kahn's algorithm; among ready nodes the smallest under `tie_break` goes first.
pub fn topological_order_by(net: &MacNetwork, tie_break: TieBreak) -> Vec<String> {
    let mut indegree: HashMap<&str, usize> = net.nodes.iter().map(|n| (n.id.as_str(), 0)).collect();
    for (_, to) in &net.edges {
        *indegree.get_mut(to.as_str()).expect("validated edge") += 1;
    }
    let mut ready: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(id, _)| *id).collect();
    let mut order = Vec::with_capacity(net.nodes.len());
    while !ready.is_empty() {
        ready.sort_by(|a, b| tie_break.compare(b, a));
        let next = ready.pop().expect("non-empty");
        order.push(next.to_string());
        for (from, to) in &net.edges {
            if from == next {
                let d = indegree.get_mut(to.as_str()).expect("validated edge");
                *d -= 1;
                if *d == 0 {
                    ready.push(to.as_str());
                }
            }
        }
    }
    debug_assert_eq!(order.len(), net.nodes.len(), "network is acyclic by construction");
    order
}

/// Total order on labels: labels ending in a number come first, by that number,
/// then everything lexicographically.
pub fn label_order(a: &str, b: &str) -> Ordering {
    let key = |s: &str| {
        let digits = s.len() - s.trim_end_matches(|c: char| c.is_ascii_digit()).len();
        let suffix = s[s.len() - digits..].parse::<u128>().ok();
        (suffix.is_none(), suffix.unwrap_or(0))
    };
    key(a).cmp(&key(b)).then_with(|| a.cmp(b))
}

/// First label kind mentioned in the COMPOSITION section, if any.
pub fn detect_label_kind(text: &str) -> Option<LabelKind> {
    let lines: Vec<&str> = text.lines().collect();
    let body = section_body(&lines, "COMPOSITION")?;
    body.iter().find_map(|(_, line)| {
        let caps = entry_regex().captures(line)?;
        LabelKind::from_word(&caps[1])
    })
}

fn find_cycle(net: &MacNetwork) -> Option<Vec<String>> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        White,
        Gray,
        Black,
    }
    let mut ids: Vec<&str> = net.nodes.iter().map(|n| n.id.as_str()).collect();
    ids.sort_by(|a, b| label_order(a, b));
    let mut succ: HashMap<&str, Vec<&str>> = HashMap::new();
    for (from, to) in &net.edges {
        succ.entry(from.as_str()).or_default().push(to.as_str());
    }
    for list in succ.values_mut() {
        list.sort_by(|a, b| label_order(a, b));
    }
    let mut mark: HashMap<&str, Mark> = ids.iter().map(|id| (*id, Mark::White)).collect();

    for &start in &ids {
        if mark[start] != Mark::White {
            continue;
        }
        // (node, next successor index)
        let mut stack: Vec<(&str, usize)> = vec![(start, 0)];
        mark.insert(start, Mark::Gray);
        while let Some((node, idx)) = stack.last_mut() {
            let next = succ.get(node).and_then(|s| s.get(*idx)).copied();
            *idx += 1;
            match next {
                Some(n) => match mark[n] {
                    Mark::White => {
                        mark.insert(n, Mark::Gray);
                        stack.push((n, 0));
                    }
                    Mark::Gray => {
                        let pos = stack.iter().position(|(s, _)| *s == n).expect("gray on stack");
                        return Some(stack[pos..].iter().map(|(s, _)| s.to_string()).collect());
                    }
                    Mark::Black => {}
                },
                None => {
                    let (done, _) = stack.pop().expect("non-empty");
                    mark.insert(done, Mark::Black);
                }
            }
        }
    }
    None
}

fn entry_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^(?:[-*+]\s+)?\**\s*(task|programmer)\s+(\d+)\s*\**\s*:\s*\**(.*)$").expect("valid regex")
    })
}

/// Whether `line` starts with a label of either family, well-formed or not.
fn looks_like_entry(line: &str) -> bool {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^(?:[-*+]\s+)?\**\s*(task|programmer)\s*\d").expect("valid regex"))
        .is_match(line.trim())
}

/// Splits `Task 12` into its kind and number.
fn split_label(label: &str) -> Option<(LabelKind, u64)> {
    let (word, num) = label.trim().rsplit_once(char::is_whitespace)?;
    Some((LabelKind::from_word(word.trim())?, num.parse().ok()?))
}

fn parse_entry(line: &str, kind: LabelKind) -> Result<(String, &str), String> {
    let caps = entry_regex()
        .captures(line.trim())
        .ok_or_else(|| format!("expected `{} N: ...`", kind.prefix()))?;
    let found = LabelKind::from_word(&caps[1]).expect("regex alternation");
    if found != kind {
        return Err(format!(
            "expected `{}` labels, found `{}`",
            kind.prefix(),
            found.prefix()
        ));
    }
    let n: u64 = caps[2].parse().map_err(|_| "label number out of range".to_string())?;
    let rest = caps.get(3).map(|m| m.as_str()).unwrap_or("");
    Ok((kind.label(n), rest))
}

fn parse_dependency_list(rest: &str, kind: LabelKind) -> Result<Vec<String>, String> {
    let rest = rest.trim().trim_end_matches('.').trim_end_matches('*').trim();
    let inner = rest
        .strip_prefix('[')
        .and_then(|r| r.strip_suffix(']'))
        .ok_or_else(|| "dependencies must be a bracketed list".to_string())?;
    let mut deps: Vec<String> = Vec::new();
    for item in inner.split(',') {
        let item = item.trim().trim_matches(|c| c == '"' || c == '\'' || c == '`').trim();
        if item.is_empty() {
            continue;
        }
        let (found, n) = split_label(item).ok_or_else(|| format!("bad dependency `{item}`"))?;
        if found != kind {
            return Err(format!("dependency `{item}` is not a `{}` label", kind.prefix()));
        }
        let label = kind.label(n);
        if !deps.contains(&label) {
            deps.push(label);
        }
    }
    Ok(deps)
}

/// Heading text of `line` if it looks like a section heading, e.g.
/// `### COMPOSITION`, `**Workflow:**`, `COMPOSITION`.
pub(crate) fn heading_name(line: &str) -> Option<String> {
    let t = line.trim();
    let hashed = t.starts_with('#');
    let t = t.trim_start_matches('#').trim();
    let t = t
        .trim_matches('*')
        .trim()
        .trim_end_matches(':')
        .trim_matches('*')
        .trim();
    if t.is_empty() {
        return None;
    }
    let upper = t.to_ascii_uppercase();
    let known = ["COMPOSITION", "WORKFLOW", "REQUIREMENTS PROGRESS"];
    if known.contains(&upper.as_str()) || hashed {
        Some(upper)
    } else {
        None
    }
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

/// Non-blank lines belonging to the first section called `name`, with their
/// zero-based line numbers. A fenced body ends at its closing fence; an
/// unfenced one at the next heading.
pub(crate) fn section_body<'a>(lines: &[&'a str], name: &str) -> Option<Vec<(usize, &'a str)>> {
    section_body_fenced(lines, name).map(|(body, _)| body)
}

/// Like [`section_body`], also telling whether the body was fenced.
fn section_body_fenced<'a>(lines: &[&'a str], name: &str) -> Option<(Vec<(usize, &'a str)>, bool)> {
    let start = lines.iter().position(|l| heading_name(l).as_deref() == Some(name))?;
    let mut i = start + 1;
    while i < lines.len() && lines[i].trim().is_empty() {
        i += 1;
    }
    let mut body = Vec::new();
    let fenced = i < lines.len() && is_fence(lines[i]);
    if fenced {
        i += 1;
        while i < lines.len() && !is_fence(lines[i]) {
            if !lines[i].trim().is_empty() {
                body.push((i, lines[i]));
            }
            i += 1;
        }
    } else {
        while i < lines.len() && heading_name(lines[i]).is_none() {
            if !lines[i].trim().is_empty() && !is_fence(lines[i]) {
                body.push((i, lines[i]));
            }
            i += 1;
        }
    }
    Some((body, fenced))
}
