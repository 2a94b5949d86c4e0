#![allow(dead_code)]

pub mod grammar;
pub mod graphs;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use evoloop::agent::TaskSpec;
use evoloop::environment::SandboxConfig;
use evoloop::evolution::EvolutionConfig;
use evoloop::metrics::{parse_bindings, RequirementBinding};
use evoloop::provider::Script;

pub const RUNNER: &str = env!("CARGO_BIN_EXE_evoloop-fake-runner");

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures/jumper")
}

pub fn task() -> TaskSpec {
    TaskSpec {
        name: "jumper".into(),
        description: "A tiny platformer core: a Player that can move and jump.".into(),
        modality: "console".into(),
        language: "python".into(),
        requirements: vec!["The player can move.".into(), "The player can jump.".into()],
    }
}

pub fn script() -> Script {
    Script::parse(&fs::read_to_string(fixture_dir().join("script")).unwrap()).unwrap()
}

/// The fixture replies, in call order.
pub fn replies() -> Vec<String> {
    script().entries().iter().map(|e| e.response_text.clone()).collect()
}

pub fn bindings() -> Vec<RequirementBinding> {
    parse_bindings(&fs::read_to_string(fixture_dir().join("bindings.toml")).unwrap()).unwrap()
}

pub fn sandbox() -> SandboxConfig {
    SandboxConfig {
        wall_clock_timeout: std::time::Duration::from_secs(10),
        runner: vec![RUNNER.to_string()],
        ..SandboxConfig::default()
    }
}

pub fn config(root: &Path) -> EvolutionConfig {
    EvolutionConfig {
        max_iterations: 4,
        entry_command: vec!["python3".into(), "game.py".into()],
        sandbox: sandbox(),
        root: root.to_path_buf(),
        ..EvolutionConfig::default()
    }
}

pub fn tree(root: &Path) -> BTreeMap<String, String> {
    evoloop::evolution::snapshot_tree_digests(root).unwrap()
}

pub fn fenced(filename: &str, body: &str) -> String {
    format!("{filename}\n```python\n{body}```\n")
}
