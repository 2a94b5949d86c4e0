use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::ParseError;
use crate::graph::{
    parse_network_draft_with_limit, section_body, GraphError, LabelKind, NetworkDraft, DEFAULT_MAX_NODES,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequirementProgress {
    pub requirement: String,
    pub achieved: bool,
    pub double_checked: bool,
    pub detail: String,
}

/// The updating agent's answer: requirement assessment plus the new team.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub progress: Vec<RequirementProgress>,
    pub draft: NetworkDraft,
}

impl UpdateReport {
    /// Canonical text in the updating agent's reply format; parses back with
    /// [`parse_update_report`].
    pub fn to_canonical_text(&self) -> String {
        let mut out = String::from("### REQUIREMENTS PROGRESS\n\n");
        for p in &self.progress {
            let _ = writeln!(out, "requirement: {}", p.requirement);
            let _ = writeln!(out, "achieved: {}", title_bool(p.achieved));
            let _ = writeln!(out, "double-checked: {}", title_bool(p.double_checked));
            let _ = writeln!(out, "detailed progress: {}", p.detail);
            out.push('\n');
        }
        out.push_str(&self.draft.to_canonical_text());
        out
    }
}

fn title_bool(b: bool) -> &'static str {
    if b {
        "True"
    } else {
        "False"
    }
}

fn field_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(
            r"(?i)^[\s\-*+>]*(?:\d+[.)]\s*)?\**\s*(requirement|achieved|double[\s_-]?checked|detailed\s+progress)\s*\**\s*:\s*\**(.*)$",
        )
        .unwrap()
    })
}

fn parse_bool(field: &str, value: &str) -> Result<bool, ParseError> {
    let v = value.trim().trim_matches(|c| matches!(c, '*' | '`' | '.' | '"')).trim();
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" => Ok(true),
        "false" | "no" => Ok(false),
        _ => Err(ParseError::InvalidBoolean {
            field: field.to_string(),
            value: value.trim().to_string(),
        }),
    }
}

pub fn parse_update_report(reply: &str) -> Result<UpdateReport, ParseError> {
    parse_update_report_with_limit(reply, DEFAULT_MAX_NODES)
}

/// Reads the `REQUIREMENTS PROGRESS` entries and the `Programmer`-labelled
/// COMPOSITION/WORKFLOW sections.
pub fn parse_update_report_with_limit(reply: &str, max_nodes: usize) -> Result<UpdateReport, ParseError> {
    let lines: Vec<&str> = reply.lines().collect();
    let body = section_body(&lines, "REQUIREMENTS PROGRESS")
        .ok_or_else(|| GraphError::MissingSection("REQUIREMENTS PROGRESS".into()))?;

    let mut progress: Vec<RequirementProgress> = Vec::new();
    // Which free-text field a continuation line extends.
    let mut open_text: Option<&'static str> = None;
    for (_, line) in body {
        let Some(c) = field_regex().captures(line) else {
            match (open_text, progress.last_mut()) {
                (Some("detail"), Some(p)) => {
                    p.detail.push('\n');
                    p.detail.push_str(line.trim_end());
                }
                (Some("requirement"), Some(p)) => {
                    p.requirement.push(' ');
                    p.requirement.push_str(line.trim());
                }
                _ => {}
            }
            continue;
        };
        let key = c[1].to_ascii_lowercase();
        let value = c[2].trim();
        if key == "requirement" {
            progress.push(RequirementProgress {
                requirement: value.to_string(),
                achieved: false,
                double_checked: false,
                detail: String::new(),
            });
            open_text = Some("requirement");
            continue;
        }
        let entry = progress
            .last_mut()
            .ok_or_else(|| ParseError::OrphanField(key.clone()))?;
        if key == "achieved" {
            entry.achieved = parse_bool("achieved", value)?;
            open_text = None;
        } else if key.starts_with("double") {
            entry.double_checked = parse_bool("double-checked", value)?;
            open_text = None;
        } else {
            entry.detail = value.to_string();
            open_text = Some("detail");
        }
    }
    for p in &mut progress {
        p.detail = p.detail.trim().to_string();
    }

    let draft = parse_network_draft_with_limit(reply, LabelKind::Programmer, max_nodes)?;
    Ok(UpdateReport { progress, draft })
}

#[cfg(test)]
mod tests {
    use super::*;

    const REPORT: &str = "\
I reviewed the code.

### REQUIREMENTS PROGRESS

requirement: The snake moves with arrow keys
achieved: True
double-checked: False
detailed progress: movement works

### COMPOSITION
```
Programmer 1: fix logging
Programmer 2: add score display
```

### WORKFLOW
```
Programmer 1: []
Programmer 2: [Programmer 1]
```
";

    #[test]
    fn parses_progress_and_draft() {
        let r = parse_update_report(REPORT).unwrap();
        assert_eq!(r.progress.len(), 1);
        assert!(r.progress[0].achieved);
        assert!(!r.progress[0].double_checked);
        assert_eq!(r.progress[0].detail, "movement works");
        assert_eq!(r.draft.composition.len(), 2);
        assert_eq!(r.draft.workflow["Programmer 2"], vec!["Programmer 1".to_string()]);
    }

    #[test]
    fn missing_composition() {
        let text = REPORT.split("### COMPOSITION").next().unwrap();
        assert_eq!(
            parse_update_report(text),
            Err(ParseError::Graph(GraphError::MissingSection("COMPOSITION".into())))
        );
    }

    #[test]
    fn missing_progress() {
        let text = REPORT.replace("### REQUIREMENTS PROGRESS", "### NOTES");
        assert_eq!(
            parse_update_report(&text),
            Err(ParseError::Graph(GraphError::MissingSection(
                "REQUIREMENTS PROGRESS".into()
            )))
        );
    }

    #[test]
    fn lowercase_booleans() {
        let r = parse_update_report(&REPORT.replace("achieved: True", "achieved: false")).unwrap();
        assert!(!r.progress[0].achieved);
        let r = parse_update_report(&REPORT.replace("double-checked: False", "Double-Checked: TRUE.")).unwrap();
        assert!(r.progress[0].double_checked);
    }

    #[test]
    fn invalid_boolean() {
        assert!(matches!(
            parse_update_report(&REPORT.replace("achieved: True", "achieved: mostly")),
            Err(ParseError::InvalidBoolean { .. })
        ));
    }

    #[test]
    fn orphan_field() {
        let text = REPORT.replace("requirement: The snake moves with arrow keys\n", "");
        assert_eq!(
            parse_update_report(&text),
            Err(ParseError::OrphanField("achieved".into()))
        );
    }

    #[test]
    fn bulleted_entries_and_multiline_detail() {
        let text = REPORT.replace(
            "requirement: The snake moves with arrow keys\nachieved: True\ndouble-checked: False\ndetailed progress: movement works\n",
            "1. **requirement**: moves\n   - achieved: True\n   - double-checked: True\n   - detailed progress: ok\n     but slow\n\n2. requirement: logs\n   achieved: False\n",
        );
        let r = parse_update_report(&text).unwrap();
        assert_eq!(r.progress.len(), 2);
        assert_eq!(r.progress[0].requirement, "moves");
        assert_eq!(r.progress[0].detail, "ok\n     but slow");
        assert!(!r.progress[1].achieved);
    }

    #[test]
    fn task_labels_are_rejected() {
        let text = REPORT.replace("Programmer", "Task");
        assert!(matches!(
            parse_update_report(&text),
            Err(ParseError::Graph(GraphError::MalformedLine { .. }))
        ));
    }

    #[test]
    fn canonical_text_round_trips() {
        let r = parse_update_report(REPORT).unwrap();
        assert_eq!(parse_update_report(&r.to_canonical_text()).unwrap(), r);
    }
}
