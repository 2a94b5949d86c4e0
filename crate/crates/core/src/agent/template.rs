use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    CodingOrganizer,
    CodingAgent,
    TestingOrganizer,
    TestingAgent,
    GradientAgent,
    UpdatingAgent,
}

impl TemplateId {
    pub const ALL: [TemplateId; 6] = [
        TemplateId::CodingOrganizer,
        TemplateId::CodingAgent,
        TemplateId::TestingOrganizer,
        TemplateId::TestingAgent,
        TemplateId::GradientAgent,
        TemplateId::UpdatingAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TemplateId::CodingOrganizer => "coding_organizer",
            TemplateId::CodingAgent => "coding_agent",
            TemplateId::TestingOrganizer => "testing_organizer",
            TemplateId::TestingAgent => "testing_agent",
            TemplateId::GradientAgent => "gradient_agent",
            TemplateId::UpdatingAgent => "updating_agent",
        }
    }

    fn builtin_text(self) -> &'static str {
        match self {
            TemplateId::CodingOrganizer => include_str!("../../templates/coding_organizer.txt"),
            TemplateId::CodingAgent => include_str!("../../templates/coding_agent.txt"),
            TemplateId::TestingOrganizer => include_str!("../../templates/testing_organizer.txt"),
            TemplateId::TestingAgent => include_str!("../../templates/testing_agent.txt"),
            TemplateId::GradientAgent => include_str!("../../templates/gradient_agent.txt"),
            TemplateId::UpdatingAgent => include_str!("../../templates/updating_agent.txt"),
        }
    }

    fn system_text(self) -> &'static str {
        match self {
            TemplateId::CodingOrganizer => {
                "You are the coding organizer of a software company. You split software tasks into subtasks for a team of programmers."
            }
            TemplateId::CodingAgent => {
                "You are a programmer in a software company. You write complete, runnable code for your assigned subtask."
            }
            TemplateId::TestingOrganizer => {
                "You are the testing organizer of a software company. You split testing work into subtasks for a team of test engineers."
            }
            TemplateId::TestingAgent => {
                "You are a test engineer in a software company. You write unit tests that locate bugs in the source code."
            }
            TemplateId::GradientAgent => {
                "You are a code reviewer. You attribute test failures to the source files and functions that cause them."
            }
            TemplateId::UpdatingAgent => {
                "You are an organization fine-tuner. You restructure the coding team so the remaining requirements get done."
            }
        }
    }

    fn default_bindings(self) -> &'static [(&'static str, &'static str)] {
        match self {
            TemplateId::CodingAgent => &[("assistant_role", "Programmer")],
            TemplateId::UpdatingAgent => &[("assistant_role", "organization fine-tuner")],
            _ => &[],
        }
    }
}

impl fmt::Display for TemplateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TemplateId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TemplateId::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown template `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("template `{template}` needs `{{{name}}}` but no binding was supplied")]
    MissingPlaceholder { template: TemplateId, name: String },
    #[error("cannot read template file {path}: {message}")]
    Io { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub template_id: TemplateId,
    pub system_text: String,
    pub user_text: String,
    pub placeholder_bindings: BTreeMap<String, String>,
}

/// Placeholder names in `text`, in first-appearance order. A placeholder is
/// `{name}` with `name` made of lowercase ASCII letters, digits and `_`.
pub fn placeholders(text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (_, name, _) in scan(text) {
        if seen.insert(name) {
            out.push(name.to_string());
        }
    }
    out
}

/// `(start, name, end)` byte spans of every placeholder token.
fn scan(text: &str) -> Vec<(usize, &str, usize)> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        if bytes[i] == b'{' {
            let mut j = i + 1;
            while j < bytes.len() && (bytes[j].is_ascii_lowercase() || bytes[j].is_ascii_digit() || bytes[j] == b'_') {
                j += 1;
            }
            if j > i + 1 && j < bytes.len() && bytes[j] == b'}' && !bytes[i + 1].is_ascii_digit() {
                out.push((i, &text[i + 1..j], j + 1));
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    out
}

/// The template texts used by a run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    texts: BTreeMap<TemplateId, String>,
}

impl Default for TemplateSet {
    fn default() -> Self {
        Self::builtin()
    }
}

impl TemplateSet {
    /// The templates shipped in `templates/`.
    pub fn builtin() -> Self {
        TemplateSet {
            texts: TemplateId::ALL
                .into_iter()
                .map(|id| (id, id.builtin_text().to_string()))
                .collect(),
        }
    }

    /// Loads `<dir>/<id>.txt` for each template, falling back to the built-in
    /// text for files that are absent.
    pub fn load_dir(dir: &Path) -> Result<Self, RenderError> {
        let mut set = Self::builtin();
        for id in TemplateId::ALL {
            let path = dir.join(format!("{}.txt", id.as_str()));
            if path.exists() {
                let text = fs::read_to_string(&path).map_err(|e| RenderError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })?;
                set.texts.insert(id, text);
            }
        }
        Ok(set)
    }

    pub fn text(&self, id: TemplateId) -> &str {
        &self.texts[&id]
    }

    pub fn required_placeholders(&self, id: TemplateId) -> Vec<String> {
        placeholders(self.text(id))
    }

    /// Substitutes every placeholder in one left-to-right pass. Bound values
    /// are inserted literally and never rescanned.
    ///
    /// Bindings come from, in increasing precedence: per-template defaults,
    /// fields of `task`, then `context`.
    pub fn render(
        &self,
        id: TemplateId,
        task: &TaskSpec,
        context: &BTreeMap<String, String>,
    ) -> Result<RenderedPrompt, RenderError> {
        let mut bindings: BTreeMap<String, String> = id
            .default_bindings()
            .iter()
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect();
        bindings.extend(task_bindings(task));
        bindings.extend(context.iter().map(|(k, v)| (k.clone(), v.clone())));

        let text = self.text(id);
        let mut user_text = String::with_capacity(text.len());
        let mut last = 0;
        for (start, name, end) in scan(text) {
            let value = bindings.get(name).ok_or_else(|| RenderError::MissingPlaceholder {
                template: id,
                name: name.to_string(),
            })?;
            user_text.push_str(&text[last..start]);
            user_text.push_str(value);
            last = end;
        }
        user_text.push_str(&text[last..]);

        Ok(RenderedPrompt {
            template_id: id,
            system_text: id.system_text().to_string(),
            user_text,
            placeholder_bindings: bindings,
        })
    }
}

fn task_bindings(task: &TaskSpec) -> [(String, String); 5] {
    [
        ("task".into(), task.description.clone()),
        ("description".into(), task.description.clone()),
        ("modality".into(), task.modality.clone()),
        ("language".into(), task.language.clone()),
        ("requirements".into(), task.requirements_text()),
    ]
}

/// Renders with the built-in templates.
pub fn render_prompt(
    id: TemplateId,
    task: &TaskSpec,
    context: &BTreeMap<String, String>,
) -> Result<RenderedPrompt, RenderError> {
    TemplateSet::builtin().render(id, task, context)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn task() -> TaskSpec {
        TaskSpec {
            name: "snake".into(),
            description: "A snake game".into(),
            modality: "game".into(),
            language: "python".into(),
            requirements: vec![],
        }
    }

    fn ctx(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn coding_agent_substitutes_subtask() {
        let p = render_prompt(
            TemplateId::CodingAgent,
            &task(),
            &ctx(&[
                ("subtask", "implement logging"),
                ("codes", ""),
                ("unimplemented_file", ""),
                ("additional_note", ""),
            ]),
        )
        .unwrap();
        assert!(p.user_text.contains("Sub-Task description: \"implement logging\""));
        for name in placeholders(TemplateSet::builtin().text(TemplateId::CodingAgent)) {
            assert!(!p.user_text.contains(&format!("{{{name}}}")), "{name} left unresolved");
        }
        assert!(p.user_text.contains("As the Programmer,"));
        assert_eq!(p.placeholder_bindings["subtask"], "implement logging");
    }

    #[test]
    fn missing_subtask_is_reported() {
        let err = render_prompt(
            TemplateId::CodingAgent,
            &task(),
            &ctx(&[("codes", ""), ("unimplemented_file", ""), ("additional_note", "")]),
        )
        .unwrap_err();
        assert_eq!(
            err,
            RenderError::MissingPlaceholder {
                template: TemplateId::CodingAgent,
                name: "subtask".into()
            }
        );
    }

    #[test]
    fn template_without_placeholders_is_identity() {
        let mut set = TemplateSet::builtin();
        set.texts
            .insert(TemplateId::GradientAgent, "No tokens here. {Not_one} {1x}".into());
        let p = set
            .render(TemplateId::GradientAgent, &task(), &BTreeMap::new())
            .unwrap();
        assert_eq!(p.user_text, "No tokens here. {Not_one} {1x}");
    }

    #[test]
    fn substitution_is_not_recursive() {
        let p = render_prompt(
            TemplateId::TestingOrganizer,
            &TaskSpec {
                description: "uses {modality} literally".into(),
                ..task()
            },
            &BTreeMap::new(),
        )
        .unwrap();
        assert!(p.user_text.contains("Task: \"uses {modality} literally\"."));
        assert!(p.user_text.contains("Modality: \"game\"."));
    }

    #[test]
    fn every_template_placeholder_set_matches_its_requirements() {
        let expected: [(TemplateId, &[&str]); 6] = [
            (
                TemplateId::CodingOrganizer,
                &[
                    "task",
                    "description",
                    "modality",
                    "language",
                    "requirements",
                    "ideas",
                    "codes",
                    "num_agents",
                ],
            ),
            (
                TemplateId::CodingAgent,
                &[
                    "task",
                    "modality",
                    "language",
                    "subtask",
                    "codes",
                    "unimplemented_file",
                    "assistant_role",
                    "additional_note",
                ],
            ),
            (TemplateId::TestingOrganizer, &["task", "modality", "language"]),
            (
                TemplateId::TestingAgent,
                &["language", "codes", "subtask", "test_file_name"],
            ),
            (
                TemplateId::GradientAgent,
                &[
                    "language",
                    "task",
                    "codes",
                    "test_reports",
                    "test_codes",
                    "testcase_reports",
                ],
            ),
            (
                TemplateId::UpdatingAgent,
                &[
                    "task",
                    "requirements",
                    "composition",
                    "workflow",
                    "codes",
                    "test_reports",
                    "issues",
                    "assistant_role",
                ],
            ),
        ];
        let set = TemplateSet::builtin();
        for (id, names) in expected {
            assert_eq!(set.required_placeholders(id), names.to_vec(), "{id}");
            // Binding exactly the scanned set renders cleanly; dropping any one fails.
            let all: BTreeMap<String, String> = names.iter().map(|n| (n.to_string(), format!("<{n}>"))).collect();
            let p = set.render(id, &task(), &all).unwrap();
            assert!(placeholders(&p.user_text).iter().all(|n| !names.contains(&n.as_str())));
        }
    }

    #[test]
    fn template_id_round_trips_through_str() {
        for id in TemplateId::ALL {
            assert_eq!(id.as_str().parse::<TemplateId>().unwrap(), id);
        }
        assert!("nope".parse::<TemplateId>().is_err());
    }

    #[test]
    fn load_dir_overrides_and_falls_back() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("gradient_agent.txt"), "G {task}").unwrap();
        let set = TemplateSet::load_dir(dir.path()).unwrap();
        assert_eq!(set.text(TemplateId::GradientAgent), "G {task}");
        assert_eq!(
            set.text(TemplateId::CodingAgent),
            TemplateSet::builtin().text(TemplateId::CodingAgent)
        );
    }
}
