use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_evoloop");

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .unwrap()
}

/// The fake runner lives in the core package; build it if this package's
/// tests run on their own.
fn fake_runner() -> PathBuf {
    let path = Path::new(BIN).with_file_name("evoloop-fake-runner");
    if !path.exists() {
        let status = Command::new(env!("CARGO"))
            .args(["build", "-p", "evoloop-core", "--bin", "evoloop-fake-runner"])
            .current_dir(repo_root())
            .status()
            .unwrap();
        assert!(status.success());
    }
    path
}

fn fixture(name: &str) -> PathBuf {
    repo_root().join("fixtures/jumper").join(name)
}

/// Writes a config for the jumper fixture into `dir`. `provider` is spliced
/// in verbatim.
fn write_config(dir: &Path, provider: &str) -> PathBuf {
    let config = format!(
        r#"
[task]
name = "jumper"
description = "A tiny platformer core: a Player that can move and jump."
modality = "console"
language = "python"
requirements = ["The player can move.", "The player can jump."]

{provider}

[evolution]
max_iterations = 4
entry_command = ["python3", "game.py"]

[sandbox]
wall_clock_timeout = 10.0
runner = [{runner:?}]
"#,
        runner = fake_runner().to_string_lossy()
    );
    let path = dir.join("config.toml");
    fs::write(&path, config).unwrap();
    path
}

fn scripted(script: &Path) -> String {
    format!("[scripted]\nscript = {:?}\n", script.to_string_lossy())
}

fn evoloop(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn run_fixture(dir: &Path) -> PathBuf {
    let config = write_config(dir, &scripted(&fixture("script")));
    let out = dir.join("run");
    let o = evoloop(&["run", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn run_fixture_converges() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &scripted(&fixture("script")));
    let out = dir.path().join("run");
    let o = evoloop(&[
        "run",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--bindings",
        s(&fixture("bindings.toml")),
    ]);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("termination: converged"), "{stdout}");
    assert!(stdout.contains("iteration 0: 1/2 tests passed"));
    assert!(stdout.contains("iteration 1: 2/2 tests passed"));
    assert!(stdout.contains("accuracy: 2/2 (100.00%)"));
    assert!(out.join("manifest").is_file());
    assert!(out.join("iter_1/code/game.py").is_file());
}

#[test]
fn json_report_parses_back() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &scripted(&fixture("script")));
    let out = dir.path().join("run");
    let o = evoloop(&[
        "run",
        "--config",
        s(&config),
        "--out",
        s(&out),
        "--bindings",
        s(&fixture("bindings.toml")),
        "--json",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let acc = evoloop::metrics::parse_structured(&String::from_utf8(o.stdout).unwrap()).unwrap();
    assert_eq!(acc.overall.passed, 2);
    assert_eq!(acc.overall.total, 2);
}

#[test]
fn budget_exhaustion_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &scripted(&fixture("script")));
    let out = dir.path().join("run");
    let o = evoloop(&["run", "--config", s(&config), "--out", s(&out), "--max-iterations", "1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stdout).contains("termination: budget_exhausted"));
}

#[test]
fn both_providers_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let provider = format!(
        "{}\n[live]\napi_base = \"http://127.0.0.1:9\"\n",
        scripted(&fixture("script"))
    );
    let config = write_config(dir.path(), &provider);
    let out = dir.path().join("run");
    let o = evoloop(&["run", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("both [live] and [scripted]"));
    assert!(!out.exists());
}

#[test]
fn non_empty_out_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &scripted(&fixture("script")));
    let out = dir.path().join("run");
    fs::create_dir(&out).unwrap();
    fs::write(out.join("keep.txt"), "precious").unwrap();
    let o = evoloop(&["run", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert_eq!(fs::read_dir(&out).unwrap().count(), 1);
    assert_eq!(fs::read_to_string(out.join("keep.txt")).unwrap(), "precious");
}

#[test]
fn failure_names_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    // Only the proxy and organizer replies: the first coder call misses.
    let full = evoloop::provider::Script::parse(&fs::read_to_string(fixture("script")).unwrap()).unwrap();
    let short = evoloop::provider::Script::sequence(full.entries()[..4].iter().map(|e| e.response_text.clone()));
    let script = dir.path().join("short.script");
    fs::write(&script, short.to_text()).unwrap();
    let config = write_config(dir.path(), &scripted(&script));
    let o = evoloop(&["run", "--config", s(&config), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("forward stage failed in iteration 0"), "{stderr}");
}

#[test]
fn inspect_prints_network_verbatim() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fixture(dir.path());
    let o = evoloop(&["inspect", s(&out), "0"]);
    assert_eq!(o.status.code(), Some(0));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let network = fs::read_to_string(out.join("iter_0/network.txt")).unwrap();
    assert!(stdout.contains(&network));
    assert!(stdout.contains("1/2 passed"));
    assert!(stdout.contains("kind: diagnoses"));
    assert!(stdout.contains("added: Programmer 2"));
}

#[test]
fn inspect_out_of_range_and_tampered() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fixture(dir.path());
    let o = evoloop(&["inspect", s(&out), "2"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("MissingIteration"));

    fs::write(out.join("iter_0/network.txt"), "### COMPOSITION\n").unwrap();
    let o = evoloop(&["inspect", s(&out), "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("corrupt run directory"));
}

#[test]
fn replay_is_identical() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fixture(dir.path());
    let o = evoloop(&["replay", s(&out), "--out", s(&dir.path().join("again"))]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("replay identical"));
}

#[test]
fn replay_detects_tampered_script() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fixture(dir.path());
    let text = fs::read_to_string(out.join("script")).unwrap();
    // Change what the final program prints; the digest keys stay valid.
    let edited = text.replace("\"y =\", p.y", "\"Y =\", p.y");
    assert_ne!(edited, text);
    // Body lengths are recorded, so re-encode through the parser.
    let edited = evoloop::provider::Script::parse(&text).unwrap().entries().iter().fold(
        evoloop::provider::Script::new(),
        |mut acc, e| {
            let body = e.response_text.replace("\"y =\", p.y", "\"Y =\", p.y");
            acc.push(e.match_key.clone(), body).unwrap();
            acc
        },
    );
    fs::write(out.join("script"), edited.to_text()).unwrap();
    let o = evoloop(&["replay", s(&out), "--out", s(&dir.path().join("again"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("DigestMismatch"));
}

#[test]
fn replay_without_script_fails() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_fixture(dir.path());
    fs::remove_file(out.join("script")).unwrap();
    let o = evoloop(&["replay", s(&out), "--out", s(&dir.path().join("again"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no recorded script"));
}

#[test]
fn shipped_config_runs_from_repo_root() {
    let dir = tempfile::tempdir().unwrap();
    fake_runner();
    let out = dir.path().join("run");
    let o = Command::new(BIN)
        .args(["run", "--config", "fixtures/jumper/config.toml", "--out", s(&out)])
        .current_dir(repo_root())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
}
