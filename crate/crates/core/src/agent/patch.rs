use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ParseError;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unsafe filename {name:?}: {reason}")]
pub struct UnsafeFilename {
    pub name: String,
    pub reason: &'static str,
}

/// Checks that `name` is a relative path that stays inside its root and ends
/// in a file with an extension. Only `[A-Za-z0-9._-]` and `/` are accepted.
pub fn validate_filename(name: &str) -> Result<(), UnsafeFilename> {
    let fail = |reason| {
        Err(UnsafeFilename {
            name: name.to_string(),
            reason,
        })
    };
    if name.is_empty() {
        return fail("empty");
    }
    if name.len() > 255 {
        return fail("longer than 255 bytes");
    }
    if name.starts_with('/') {
        return fail("absolute path");
    }
    if !name
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-' | '/'))
    {
        return fail("character outside [A-Za-z0-9._-/]");
    }
    let components: Vec<&str> = name.split('/').collect();
    for c in &components {
        match *c {
            "" => return fail("empty path component"),
            "." | ".." => return fail("relative path component"),
            _ => {}
        }
    }
    let base = components.last().expect("split yields one item");
    match base.rfind('.') {
        Some(dot) if dot > 0 && dot + 1 < base.len() => Ok(()),
        _ => fail("no file extension"),
    }
}

/// Whether `filename` names a test suite: its base name starts with `prefix`.
pub fn is_test_filename(filename: &str, prefix: &str) -> bool {
    let base = filename.rsplit('/').next().unwrap_or(filename);
    base.starts_with(prefix)
}

/// Full contents for one file, as emitted by an agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawPatch")]
pub struct FilePatch {
    filename: String,
    content: String,
}

#[derive(Deserialize)]
struct RawPatch {
    filename: String,
    content: String,
}

impl TryFrom<RawPatch> for FilePatch {
    type Error = UnsafeFilename;

    fn try_from(raw: RawPatch) -> Result<Self, Self::Error> {
        FilePatch::new(raw.filename, raw.content)
    }
}

impl FilePatch {
    pub fn new(filename: impl Into<String>, content: impl Into<String>) -> Result<Self, UnsafeFilename> {
        let filename = filename.into();
        validate_filename(&filename)?;
        Ok(FilePatch {
            filename,
            content: content.into(),
        })
    }

    pub fn filename(&self) -> &str {
        &self.filename
    }

    pub fn content(&self) -> &str {
        &self.content
    }

    pub fn into_parts(self) -> (String, String) {
        (self.filename, self.content)
    }
}

impl fmt::Display for FilePatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} bytes)", self.filename, self.content.len())
    }
}

fn fence_len(line: &str) -> Option<usize> {
    let t = line.trim_start();
    let n = t.len() - t.trim_start_matches('`').len();
    (n >= 3).then_some(n)
}

fn is_closing_fence(line: &str, open_len: usize) -> bool {
    let t = line.trim();
    !t.is_empty() && t.chars().all(|c| c == '`') && t.len() >= open_len
}

/// Pulls a bare filename out of a line such as `main.py`, `**main.py**`,
/// `` `src/app.py` ``, `### utils.py` or `File: main.py:`.
fn filename_candidate(line: &str) -> Option<String> {
    let mut t = line.trim().trim_start_matches('#').trim();
    for prefix in ["filename:", "file name:", "file:"] {
        if t.get(..prefix.len())
            .is_some_and(|head| head.eq_ignore_ascii_case(prefix))
        {
            t = t[prefix.len()..].trim();
        }
    }
    let t = t
        .trim_matches(|c| matches!(c, '*' | '`' | '"' | '\''))
        .trim_end_matches(':')
        .trim_matches(|c| matches!(c, '*' | '`' | '"' | '\''))
        .trim();
    if t.is_empty() || t.contains(char::is_whitespace) {
        return None;
    }
    validate_filename(t).ok().map(|_| t.to_string())
}

/// Scans an agent reply for `FILENAME` lines followed by fenced code blocks.
///
/// The filename is the nearest non-blank line above the opening fence (or, if
/// that line is not a filename, a filename in the fence info string). The
/// block body is kept verbatim and ends with a newline. Unclosed fences and
/// unsafe names are skipped. A later block for the same file replaces an earlier one.
pub fn parse_file_patches(reply: &str) -> Result<Vec<FilePatch>, ParseError> {
    let lines: Vec<&str> = reply.lines().map(|l| l.strip_suffix('\r').unwrap_or(l)).collect();
    let mut patches: Vec<FilePatch> = Vec::new();
    let mut previous: Option<&str> = None;
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i];
        let Some(open) = fence_len(line) else {
            if !line.trim().is_empty() {
                previous = Some(line);
            }
            i += 1;
            continue;
        };
        let Some(close) = (i + 1..lines.len()).find(|&j| is_closing_fence(lines[j], open)) else {
            break;
        };
        let info = line.trim_start()[open..].trim();
        let name = previous.and_then(filename_candidate).or_else(|| {
            info.split_whitespace()
                .filter(|tok| tok.contains('.'))
                .find_map(filename_candidate)
        });
        if let Some(name) = name {
            // Files end with a newline, as the fence line implies.
            let mut body = lines[i + 1..close].join("\n");
            if close > i + 1 {
                body.push('\n');
            }
            patches.retain(|p| p.filename != name);
            patches.push(FilePatch {
                filename: name,
                content: body,
            });
        } else if let Some(prev) = previous {
            tracing::debug!(line = prev, "code block without a usable filename");
        }
        previous = None;
        i = close + 1;
    }
    if patches.is_empty() {
        Err(ParseError::NoPatchesFound)
    } else {
        Ok(patches)
    }
}
