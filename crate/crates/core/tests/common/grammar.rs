//! Table of parser cases over the four reply grammars, shared by the
//! grammar suite and the acceptance report.

use evoloop::agent::{parse_file_patches, parse_gradient, parse_update_report, GradientKind, ParseError};
use evoloop::graph::{build_network, parse_network_draft, AgentRole, GraphError, LabelKind, DEFAULT_MAX_NODES};

pub type Check = fn() -> Result<(), String>;

fn ensure(cond: bool, what: &str) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.to_string())
    }
}

fn deps(text: &str, kind: LabelKind, label: &str) -> Result<Vec<String>, String> {
    let d = parse_network_draft(text, kind).map_err(|e| e.to_string())?;
    Ok(d.workflow.get(label).cloned().unwrap_or_default())
}

fn graph_err(text: &str) -> Result<GraphError, String> {
    match parse_network_draft(text, LabelKind::Task) {
        Ok(_) => Err("expected a parse error".into()),
        Err(e) => Ok(e),
    }
}

fn files(reply: &str) -> Result<Vec<(String, String)>, String> {
    let p = parse_file_patches(reply).map_err(|e| e.to_string())?;
    Ok(p.iter()
        .map(|p| (p.filename().to_string(), p.content().to_string()))
        .collect())
}

fn kind(reply: &str) -> Result<GradientKind, String> {
    parse_gradient(reply).map(|g| g.kind).map_err(|e| e.to_string())
}

pub const CASES: &[(&str, Check)] = &[
    // COMPOSITION / WORKFLOW
    ("plain organizer sections", || {
        let d = parse_network_draft(
            "### COMPOSITION\nTask 1: GUI\nTask 2: logic\n### WORKFLOW\nTask 1: []\nTask 2: [Task 1]\n",
            LabelKind::Task,
        )
        .map_err(|e| e.to_string())?;
        ensure(
            d.composition.len() == 2 && d.workflow["Task 2"] == ["Task 1"],
            "two tasks, one edge",
        )
    }),
    ("fenced section bodies", || {
        let text = "### COMPOSITION\n```\nTask 1: a\n```\n### WORKFLOW\n```\nTask 1: []\n```\n";
        ensure(deps(text, LabelKind::Task, "Task 1")?.is_empty(), "root has no deps")
    }),
    ("bold headings with colons", || {
        let text = "**Composition:**\nTask 1: a\nTask 2: b\n**Workflow:**\nTask 2: [Task 1]\n";
        ensure(deps(text, LabelKind::Task, "Task 2")? == ["Task 1"], "edge kept")
    }),
    ("bullets and bold labels", || {
        let text =
            "### COMPOSITION\n- **Task 1**: a\n* Task 2: b\n### WORKFLOW\n- Task 1: []\n- **Task 2**: [Task 1]\n";
        ensure(deps(text, LabelKind::Task, "Task 2")? == ["Task 1"], "edge kept")
    }),
    ("lowercase label words", || {
        let text = "### COMPOSITION\ntask 1: a\n### WORKFLOW\ntask 1: []\n";
        ensure(deps(text, LabelKind::Task, "Task 1")?.is_empty(), "normalized label")
    }),
    ("quoted dependencies and trailing period", || {
        let text = "### COMPOSITION\nTask 1: a\nTask 2: b\nTask 3: c\n### WORKFLOW\nTask 3: [\"Task 1\", 'Task 2'].\n";
        ensure(
            deps(text, LabelKind::Task, "Task 3")? == ["Task 1", "Task 2"],
            "both deps",
        )
    }),
    ("duplicate dependency collapses", || {
        let text = "### COMPOSITION\nTask 1: a\nTask 2: b\n### WORKFLOW\nTask 2: [Task 1, Task 1]\n";
        ensure(deps(text, LabelKind::Task, "Task 2")? == ["Task 1"], "one dep")
    }),
    ("roots omitted from workflow get no deps", || {
        let text = "### COMPOSITION\nTask 1: a\nTask 2: b\n### WORKFLOW\nTask 2: [Task 1]\n";
        ensure(deps(text, LabelKind::Task, "Task 1")?.is_empty(), "root added")
    }),
    ("prose around sections is ignored", || {
        let text = "Sure! Here is the plan.\n\n### COMPOSITION\nTask 1: a\n\n### WORKFLOW\nTask 1: []\n\nGood luck.\n";
        parse_network_draft(text, LabelKind::Task)
            .map(|_| ())
            .map_err(|e| e.to_string())
    }),
    ("subtask keeps inner colons", || {
        let d = parse_network_draft(
            "### COMPOSITION\nTask 1: Write main.py: the entry point.\n### WORKFLOW\nTask 1: []\n",
            LabelKind::Task,
        )
        .map_err(|e| e.to_string())?;
        ensure(d.composition[0].1 == "Write main.py: the entry point.", "subtask text")
    }),
    ("missing workflow section", || {
        let e = graph_err("### COMPOSITION\nTask 1: a\n")?;
        ensure(
            matches!(e, GraphError::MissingSection(ref s) if s == "WORKFLOW"),
            "MissingSection",
        )
    }),
    ("duplicate composition label", || {
        let e = graph_err("### COMPOSITION\nTask 1: a\nTask 1: b\n### WORKFLOW\n")?;
        ensure(matches!(e, GraphError::DuplicateLabel { .. }), "DuplicateLabel")
    }),
    ("undeclared dependency", || {
        let e = graph_err("### COMPOSITION\nTask 1: a\n### WORKFLOW\nTask 1: [Task 9]\n")?;
        ensure(matches!(e, GraphError::UnknownDependency { .. }), "UnknownDependency")
    }),
    ("workflow label without composition entry", || {
        let e = graph_err("### COMPOSITION\nTask 1: a\n### WORKFLOW\nTask 2: []\n")?;
        ensure(
            matches!(e, GraphError::UnknownLabel(ref l) if l == "Task 2"),
            "UnknownLabel",
        )
    }),
    ("unbracketed dependency list", || {
        let e = graph_err("### COMPOSITION\nTask 1: a\nTask 2: b\n### WORKFLOW\nTask 2: Task 1\n")?;
        ensure(matches!(e, GraphError::MalformedLine { .. }), "MalformedLine")
    }),
    ("wrong label family", || {
        let e = graph_err("### COMPOSITION\nProgrammer 1: a\n### WORKFLOW\n")?;
        ensure(matches!(e, GraphError::MalformedLine { .. }), "MalformedLine")
    }),
    ("agent limit is inclusive", || {
        let team = |n: usize| {
            let mut text = String::from("### COMPOSITION\n");
            for i in 1..=n {
                text.push_str(&format!("Task {i}: t\n"));
            }
            text + "### WORKFLOW\n"
        };
        parse_network_draft(&team(DEFAULT_MAX_NODES), LabelKind::Task).map_err(|e| e.to_string())?;
        let e = graph_err(&team(DEFAULT_MAX_NODES + 1))?;
        ensure(
            matches!(e, GraphError::TooManyNodes { count, max } if count == max + 1 && max == DEFAULT_MAX_NODES),
            "TooManyNodes",
        )
    }),
    ("two-node cycle is rejected on build", || {
        let d = parse_network_draft(
            "### COMPOSITION\nTask 1: a\nTask 2: b\n### WORKFLOW\nTask 1: [Task 2]\nTask 2: [Task 1]\n",
            LabelKind::Task,
        )
        .map_err(|e| e.to_string())?;
        ensure(
            matches!(build_network(&d, AgentRole::Tester), Err(GraphError::CycleDetected(_))),
            "CycleDetected",
        )
    }),
    ("self loop is rejected on build", || {
        let d = parse_network_draft(
            "### COMPOSITION\nTask 1: a\n### WORKFLOW\nTask 1: [Task 1]\n",
            LabelKind::Task,
        )
        .map_err(|e| e.to_string())?;
        ensure(
            matches!(build_network(&d, AgentRole::Tester), Err(GraphError::CycleDetected(_))),
            "CycleDetected",
        )
    }),
    // Code blocks
    ("filename line above fence", || {
        ensure(
            files("main.py\n```python\nprint(1)\n```\n")? == [("main.py".into(), "print(1)\n".into())],
            "one file",
        )
    }),
    ("decorated filename", || {
        ensure(
            files("**src/game.py**\n```python\nx = 1\n```\n")?[0].0 == "src/game.py",
            "nested path",
        )
    }),
    ("filename in fence info string", || {
        ensure(
            files("Here:\n```python utils.py\nx = 1\n```\n")?[0].0 == "utils.py",
            "info-string name",
        )
    }),
    ("two files in order", || {
        let f = files("a.py\n```\nA\n```\nb.py\n```\nB\n```\n")?;
        ensure(f.iter().map(|x| x.0.as_str()).eq(["a.py", "b.py"]), "document order")
    }),
    ("nested fence inside longer fence", || {
        let f = files("README.md\n````markdown\n```python\nx\n```\n````\n")?;
        ensure(f[0].1 == "```python\nx\n```\n", "inner fence kept")
    }),
    ("traversal filename is skipped", || {
        let f = files("../evil.py\n```\nx\n```\nok.py\n```\ny\n```\n")?;
        ensure(f.len() == 1 && f[0].0 == "ok.py", "unsafe name dropped")
    }),
    ("prose only reply", || {
        ensure(
            parse_file_patches("No code today.") == Err(ParseError::NoPatchesFound),
            "NoPatchesFound",
        )
    }),
    ("unclosed fence", || {
        ensure(
            parse_file_patches("a.py\n```python\nx = 1\n") == Err(ParseError::NoPatchesFound),
            "NoPatchesFound",
        )
    }),
    // Gradients
    ("sentinel: No error in codes.", || {
        ensure(kind("No error in codes.")? == GradientKind::NoError, "NoError")
    }),
    ("sentinel: Wrong test code.", || {
        ensure(
            kind("Wrong test code.")? == GradientKind::WrongTestCode,
            "WrongTestCode",
        )
    }),
    ("sentinel inside prose", || {
        ensure(
            kind("I checked everything.\nNo error in codes.\n")? == GradientKind::NoError,
            "NoError",
        )
    }),
    ("two diagnosis blocks", || {
        let g = parse_gradient(
            "file name: a.py\nfunction name: f, g()\ndetailed analysis of the problem: f is wrong.\n\n\
             file name: b.py\nfunction name: h\ndetailed analysis of the problem: h loops\nforever.\n",
        )
        .map_err(|e| e.to_string())?;
        ensure(
            g.diagnoses.len() == 2
                && g.diagnoses[0].functions == ["f", "g"]
                && g.diagnoses[1].analysis == "h loops\nforever.",
            "two blocks with continuation",
        )
    }),
    ("numbered and bold diagnosis fields", || {
        let g = parse_gradient(
            "1. **File name:** a.py\n2. **Function name:** f\n3. **Detailed analysis of the problem:** bad\n",
        )
        .map_err(|e| e.to_string())?;
        ensure(g.diagnoses[0].filename == "a.py", "filename read")
    }),
    ("only test files diagnosed", || {
        ensure(
            parse_gradient("file name: test_requirement_0.py\nfunction name: t\ndetailed analysis of the problem: x\n")
                .is_err(),
            "UnparsableGradient",
        )
    }),
    ("unrecognized gradient", || {
        ensure(parse_gradient("Looks fine to me.").is_err(), "UnparsableGradient")
    }),
    // Update reports
    ("update report with progress", || {
        let r = parse_update_report(
            "### REQUIREMENTS PROGRESS\nrequirement: moves\nachieved: True\ndouble-checked: False\n\
             detailed progress: works\n\n### COMPOSITION\nProgrammer 1: keep\n### WORKFLOW\nProgrammer 1: []\n",
        )
        .map_err(|e| e.to_string())?;
        ensure(
            r.progress.len() == 1 && r.progress[0].achieved && !r.progress[0].double_checked,
            "one progress entry",
        )
    }),
    ("update report yes/no booleans", || {
        let r = parse_update_report(
            "### REQUIREMENTS PROGRESS\n- requirement: a\n- achieved: yes\n- double_checked: no\n\
             ### COMPOSITION\nProgrammer 1: x\n### WORKFLOW\n",
        )
        .map_err(|e| e.to_string())?;
        ensure(r.progress[0].achieved && !r.progress[0].double_checked, "booleans")
    }),
    ("update report invalid boolean", || {
        let e = parse_update_report(
            "### REQUIREMENTS PROGRESS\nrequirement: a\nachieved: maybe\n### COMPOSITION\nProgrammer 1: x\n### WORKFLOW\n",
        );
        ensure(matches!(e, Err(ParseError::InvalidBoolean { .. })), "InvalidBoolean")
    }),
    ("update report field before requirement", || {
        let e = parse_update_report(
            "### REQUIREMENTS PROGRESS\nachieved: True\n### COMPOSITION\nProgrammer 1: x\n### WORKFLOW\n",
        );
        ensure(matches!(e, Err(ParseError::OrphanField(_))), "OrphanField")
    }),
    ("update report canonical text round trips", || {
        let text = "### REQUIREMENTS PROGRESS\nrequirement: a\nachieved: False\ndouble-checked: True\n\
                    detailed progress: line one\nline two\n\n### COMPOSITION\nProgrammer 1: x\nProgrammer 2: y\n\
                    ### WORKFLOW\nProgrammer 2: [Programmer 1]\n";
        let r = parse_update_report(text).map_err(|e| e.to_string())?;
        let back = parse_update_report(&r.to_canonical_text()).map_err(|e| e.to_string())?;
        ensure(back == r && r.progress[0].detail == "line one\nline two", "round trip")
    }),
    ("update report missing progress section", || {
        ensure(
            parse_update_report("### COMPOSITION\nProgrammer 1: x\n### WORKFLOW\n").is_err(),
            "MissingSection",
        )
    }),
];

/// Runs every case and returns the names of the failing ones with reasons.
pub fn run_all() -> Vec<String> {
    CASES
        .iter()
        .filter_map(|(name, check)| check().err().map(|e| format!("{name}: {e}")))
        .collect()
}
