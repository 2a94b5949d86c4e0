use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// How long to keep collecting output after the process is gone.
const DRAIN_GRACE: Duration = Duration::from_millis(500);
const POLL: Duration = Duration::from_millis(10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ExitKind {
    Code(i32),
    Signal(i32),
    /// Killed by the sandbox after the wall-clock timeout.
    Killed,
}

impl ExitKind {
    pub fn success(self) -> bool {
        self == ExitKind::Code(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapturedStream {
    pub text: String,
    pub truncated: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommandResult {
    pub command: Vec<String>,
    pub exit: ExitKind,
    pub stdout: CapturedStream,
    pub stderr: CapturedStream,
    pub duration: Duration,
    pub timed_out: bool,
}

impl CommandResult {
    /// Placeholder for a program that was never started.
    pub fn not_run(reason: &str) -> Self {
        CommandResult {
            command: Vec::new(),
            exit: ExitKind::Code(0),
            stdout: CapturedStream {
                text: String::new(),
                truncated: false,
            },
            stderr: CapturedStream {
                text: reason.to_string(),
                truncated: false,
            },
            duration: Duration::ZERO,
            timed_out: false,
        }
    }
}

#[derive(Default)]
struct Capture {
    bytes: Vec<u8>,
    truncated: bool,
}

fn spawn_reader<R: Read + Send + 'static>(mut src: R, cap: usize, done: mpsc::Sender<()>) -> Arc<Mutex<Capture>> {
    let buf = Arc::new(Mutex::new(Capture::default()));
    let sink = Arc::clone(&buf);
    thread::spawn(move || {
        let mut chunk = [0u8; 8192];
        loop {
            match src.read(&mut chunk) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let mut c = sink.lock().expect("capture buffer");
                    let room = cap.saturating_sub(c.bytes.len());
                    if n > room {
                        c.truncated = true;
                    }
                    let take = n.min(room);
                    c.bytes.extend_from_slice(&chunk[..take]);
                }
            }
        }
        let _ = done.send(());
    });
    buf
}

fn kill_group(child: &mut Child) {
    let pid = child.id() as libc::pid_t;
    // SAFETY: plain syscall on a process group this sandbox created.
    unsafe {
        libc::killpg(pid, libc::SIGKILL);
    }
    let _ = child.kill();
}

fn finish(buf: &Arc<Mutex<Capture>>) -> CapturedStream {
    let c = buf.lock().expect("capture buffer");
    CapturedStream {
        text: String::from_utf8_lossy(&c.bytes).into_owned(),
        truncated: c.truncated,
    }
}

/// Runs `argv` in its own process group with a cleared environment, stdin
/// closed, and both output streams capped at `max_output` bytes each.
/// Returns after at most `timeout` plus a short drain grace period.
pub(crate) fn run_command(
    argv: &[String],
    cwd: &Path,
    env: &[(String, String)],
    timeout: Duration,
    max_output: usize,
) -> std::io::Result<CommandResult> {
    let (program, args) = argv
        .split_first()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "empty command"))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(cwd)
        .env_clear()
        .envs(env.iter().map(|(k, v)| (k, v)))
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .process_group(0);

    let started = Instant::now();
    let mut child = cmd.spawn()?;
    let (tx, rx) = mpsc::channel();
    let stdout = spawn_reader(child.stdout.take().expect("piped"), max_output, tx.clone());
    let stderr = spawn_reader(child.stderr.take().expect("piped"), max_output, tx);

    let mut timed_out = false;
    let status = loop {
        if let Some(status) = child.try_wait()? {
            break status;
        }
        if started.elapsed() >= timeout {
            timed_out = true;
            kill_group(&mut child);
            break child.wait()?;
        }
        thread::sleep(POLL);
    };
    let duration = started.elapsed();

    // Grandchildren may still hold the pipes open; do not wait on them forever.
    let drain_deadline = Instant::now() + DRAIN_GRACE;
    for _ in 0..2 {
        let left = drain_deadline.saturating_duration_since(Instant::now());
        if rx.recv_timeout(left).is_err() {
            break;
        }
    }

    let exit = if timed_out {
        ExitKind::Killed
    } else if let Some(code) = status.code() {
        ExitKind::Code(code)
    } else {
        ExitKind::Signal(status.signal().unwrap_or(0))
    };
    Ok(CommandResult {
        command: argv.to_vec(),
        exit,
        stdout: finish(&stdout),
        stderr: finish(&stderr),
        duration,
        timed_out,
    })
}
