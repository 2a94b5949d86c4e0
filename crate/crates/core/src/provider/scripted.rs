//! Deterministic replay.
//!
//! Script file format (UTF-8):
//!
//! ```text
//! evoloop-script v1
//! @digest <64 hex chars> <occurrence> <byte length>
//! <response bytes>
//! @index <call number> <byte length>
//! <response bytes>
//! ```
//!
//! Each response body is followed by exactly one `\n`. `occurrence` counts
//! repeats of the same request within a run, starting at 0; a request seen
//! more often than the script records gets the highest recorded occurrence.
//! Canonical files list digest entries sorted by (digest, occurrence), then
//! index entries by call number.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::{ChatProvider, ChatRequest, ChatResponse, ProviderError, TokenUsage};

const HEADER: &str = "evoloop-script v1";

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MatchKey {
    Digest { digest: String, occurrence: u64 },
    Index(u64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptEntry {
    pub match_key: MatchKey,
    pub response_text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScriptError {
    #[error("missing `{HEADER}` header")]
    MissingHeader,
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate script key {0:?}")]
    DuplicateKey(MatchKey),
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Script {
    entries: Vec<ScriptEntry>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[ScriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, match_key: MatchKey, response_text: impl Into<String>) -> Result<(), ScriptError> {
        if self.entries.iter().any(|e| e.match_key == match_key) {
            return Err(ScriptError::DuplicateKey(match_key));
        }
        self.entries.push(ScriptEntry {
            match_key,
            response_text: response_text.into(),
        });
        Ok(())
    }

    /// Appends an index entry numbered after the existing ones.
    pub fn push_next(&mut self, response_text: impl Into<String>) {
        let next = self
            .entries
            .iter()
            .filter_map(|e| match e.match_key {
                MatchKey::Index(i) => Some(i + 1),
                MatchKey::Digest { .. } => None,
            })
            .max()
            .unwrap_or(0);
        self.push(MatchKey::Index(next), response_text)
            .expect("fresh index is unique");
    }

    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut script = Script::new();
        for r in responses {
            script.push_next(r);
        }
        script
    }

    pub fn to_text(&self) -> String {
        let mut entries: Vec<&ScriptEntry> = self.entries.iter().collect();
        entries.sort_by(|a, b| a.match_key.cmp(&b.match_key));
        let mut out = String::from(HEADER);
        out.push('\n');
        for e in entries {
            match &e.match_key {
                MatchKey::Digest { digest, occurrence } => {
                    out.push_str(&format!("@digest {digest} {occurrence} {}\n", e.response_text.len()))
                }
                MatchKey::Index(i) => out.push_str(&format!("@index {i} {}\n", e.response_text.len())),
            }
            out.push_str(&e.response_text);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Script, ScriptError> {
        let rest = text
            .strip_prefix(HEADER)
            .and_then(|r| r.strip_prefix('\n'))
            .ok_or(ScriptError::MissingHeader)?;
        let mut script = Script::new();
        let mut pos = text.len() - rest.len();
        let mut line = 2;
        while pos < text.len() {
            let malformed = |message: String| ScriptError::Malformed { line, message };
            let eol = text[pos..]
                .find('\n')
                .map(|i| pos + i)
                .ok_or_else(|| malformed("unterminated entry header".into()))?;
            let header = &text[pos..eol];
            let fields: Vec<&str> = header.split(' ').collect();
            let (key, len) = match fields.as_slice() {
                ["@digest", digest, occ, len]
                    if digest.len() == 64
                        && digest.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) =>
                {
                    let occurrence = occ.parse().map_err(|_| malformed(format!("bad occurrence {occ:?}")))?;
                    (
                        MatchKey::Digest {
                            digest: digest.to_string(),
                            occurrence,
                        },
                        len,
                    )
                }
                ["@index", idx, len] => (
                    MatchKey::Index(idx.parse().map_err(|_| malformed(format!("bad index {idx:?}")))?),
                    len,
                ),
                _ => return Err(malformed(format!("bad entry header {header:?}"))),
            };
            let len: usize = len.parse().map_err(|_| malformed(format!("bad length {len:?}")))?;
            let start = eol + 1;
            let end = start
                .checked_add(len)
                .ok_or_else(|| malformed("body length overflows".into()))?;
            if text.as_bytes().get(end) != Some(&b'\n') {
                return Err(malformed("body length does not match".into()));
            }
            let body = text
                .get(start..end)
                .ok_or_else(|| malformed("body splits a UTF-8 character".into()))?;
            line += 1 + body.matches('\n').count() + 1;
            script.push(key, body)?;
            pos = end + 1;
        }
        Ok(script)
    }
}

fn rough_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Answers requests from a [`Script`]: first by request digest, then by call
/// number.
#[derive(Debug)]
pub struct ScriptedProvider {
    by_digest: HashMap<String, BTreeMap<u64, String>>,
    by_index: HashMap<u64, String>,
    state: Mutex<ScriptState>,
}

#[derive(Debug, Default)]
struct ScriptState {
    calls: u64,
    seen: HashMap<String, u64>,
}

impl ScriptedProvider {
    pub fn new(script: &Script) -> Self {
        let mut by_digest: HashMap<String, BTreeMap<u64, String>> = HashMap::new();
        let mut by_index = HashMap::new();
        for e in script.entries() {
            match &e.match_key {
                MatchKey::Digest { digest, occurrence } => {
                    by_digest
                        .entry(digest.clone())
                        .or_default()
                        .insert(*occurrence, e.response_text.clone());
                }
                MatchKey::Index(i) => {
                    by_index.insert(*i, e.response_text.clone());
                }
            }
        }
        ScriptedProvider {
            by_digest,
            by_index,
            state: Mutex::new(ScriptState::default()),
        }
    }

    /// Treats the first request as call number `calls`. Used to continue an
    /// index script after `calls` requests were already answered elsewhere,
    /// e.g. when resuming an interrupted run.
    pub fn starting_at(self, calls: u64) -> Self {
        self.state.lock().expect("script state").calls = calls;
        self
    }

    /// Requests answered or missed so far, plus any [`starting_at`](Self::starting_at) offset.
    pub fn calls(&self) -> u64 {
        self.state.lock().expect("script state").calls
    }
}

impl ChatProvider for ScriptedProvider {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        req.validate()?;
        let digest = req.digest();
        let (index, occurrence) = {
            let mut state = self.state.lock().expect("script state");
            let index = state.calls;
            state.calls += 1;
            let seen = state.seen.entry(digest.clone()).or_insert(0);
            let occurrence = *seen;
            *seen += 1;
            (index, occurrence)
        };
        let text = self
            .by_digest
            .get(&digest)
            .and_then(|occ| occ.range(..=occurrence).next_back())
            .map(|(_, text)| text)
            .or_else(|| self.by_index.get(&index))
            .ok_or(ProviderError::ScriptMiss { digest, index })?;
        Ok(ChatResponse {
            text: text.clone(),
            token_usage: TokenUsage {
                prompt: rough_tokens(&req.system_text) + rough_tokens(&req.user_text),
                completion: rough_tokens(text),
            },
            provider_latency: Duration::ZERO,
        })
    }

    /// Call-number matching depends on arrival order, so a script with index
    /// entries must be driven from one thread.
    fn supports_concurrency(&self) -> bool {
        self.by_index.is_empty()
    }
}

/// Wraps a provider and keeps every successful exchange, keyed by digest.
#[derive(Debug)]
pub struct RecordingProvider<P> {
    inner: P,
    log: Mutex<BTreeMap<String, Vec<String>>>,
}

impl<P: ChatProvider> RecordingProvider<P> {
    pub fn new(inner: P) -> Self {
        RecordingProvider {
            inner,
            log: Mutex::new(BTreeMap::new()),
        }
    }

    /// Seeds the log, e.g. with the script of a run being resumed.
    pub fn with_history(inner: P, history: &Script) -> Self {
        let rec = Self::new(inner);
        {
            let mut log = rec.log.lock().expect("recording log");
            let mut entries: Vec<&ScriptEntry> = history.entries().iter().collect();
            entries.sort_by(|a, b| a.match_key.cmp(&b.match_key));
            for e in entries {
                if let MatchKey::Digest { digest, .. } = &e.match_key {
                    log.entry(digest.clone()).or_default().push(e.response_text.clone());
                }
            }
        }
        rec
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    /// Everything recorded so far as a digest-keyed script. Trailing repeats
    /// of one request's answer collapse into a single entry.
    pub fn script(&self) -> Script {
        let log = self.log.lock().expect("recording log");
        let mut script = Script::new();
        for (digest, responses) in log.iter() {
            let mut keep = responses.len();
            while keep > 1 && responses[keep - 1] == responses[keep - 2] {
                keep -= 1;
            }
            for (occurrence, text) in responses[..keep].iter().enumerate() {
                script
                    .push(
                        MatchKey::Digest {
                            digest: digest.clone(),
                            occurrence: occurrence as u64,
                        },
                        text.clone(),
                    )
                    .expect("digest/occurrence pairs are unique");
            }
        }
        script
    }
}

impl<P: ChatProvider> ChatProvider for RecordingProvider<P> {
    fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, ProviderError> {
        let started = Instant::now();
        let resp = self.inner.complete(req)?;
        self.log
            .lock()
            .expect("recording log")
            .entry(req.digest())
            .or_default()
            .push(resp.text.clone());
        tracing::trace!(elapsed = ?started.elapsed(), "recorded exchange");
        Ok(resp)
    }

    fn supports_concurrency(&self) -> bool {
        self.inner.supports_concurrency()
    }
}
