use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agent::{validate_filename, FilePatch, UnsafeFilename};

/// Origin recorded for files that were already present when a forward pass
/// started.
pub const SEED_ORIGIN: &str = "<seed>";

/// Named files plus, for each, the id of the agent that last wrote it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawWorkspace")]
pub struct Workspace {
    files: BTreeMap<String, String>,
    origin: BTreeMap<String, String>,
}

#[derive(Deserialize)]
struct RawWorkspace {
    files: BTreeMap<String, String>,
    origin: BTreeMap<String, String>,
}

impl TryFrom<RawWorkspace> for Workspace {
    type Error = String;

    fn try_from(raw: RawWorkspace) -> Result<Self, Self::Error> {
        for name in raw.files.keys() {
            validate_filename(name).map_err(|e| e.to_string())?;
        }
        if let Some(stray) = raw.origin.keys().find(|k| !raw.files.contains_key(*k)) {
            return Err(format!("origin entry `{stray}` has no file"));
        }
        Ok(Workspace {
            files: raw.files,
            origin: raw.origin,
        })
    }
}

impl Workspace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Builds a workspace whose files all carry [`SEED_ORIGIN`].
    pub fn from_files<I, K, V>(files: I) -> Result<Self, UnsafeFilename>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut ws = Workspace::new();
        for (k, v) in files {
            ws.insert(k, v, SEED_ORIGIN)?;
        }
        Ok(ws)
    }

    pub fn insert(
        &mut self,
        filename: impl Into<String>,
        content: impl Into<String>,
        origin: impl Into<String>,
    ) -> Result<(), UnsafeFilename> {
        let filename = filename.into();
        validate_filename(&filename)?;
        self.origin.insert(filename.clone(), origin.into());
        self.files.insert(filename, content.into());
        Ok(())
    }

    /// Last-writer-wins merge of one patch.
    pub fn apply(&mut self, patch: &FilePatch, origin: &str) {
        self.files
            .insert(patch.filename().to_string(), patch.content().to_string());
        self.origin.insert(patch.filename().to_string(), origin.to_string());
    }

    pub fn remove(&mut self, filename: &str) -> Option<String> {
        self.origin.remove(filename);
        self.files.remove(filename)
    }

    pub fn get(&self, filename: &str) -> Option<&str> {
        self.files.get(filename).map(String::as_str)
    }

    pub fn origin_of(&self, filename: &str) -> Option<&str> {
        self.origin.get(filename).map(String::as_str)
    }

    pub fn files(&self) -> &BTreeMap<String, String> {
        &self.files
    }

    pub fn origins(&self) -> &BTreeMap<String, String> {
        &self.origin
    }

    pub fn filenames(&self) -> impl Iterator<Item = &str> {
        self.files.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.files.len()
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn total_bytes(&self) -> usize {
        self.files.values().map(String::len).sum()
    }

    /// Same files, every origin reset to [`SEED_ORIGIN`].
    pub fn reseeded(&self) -> Workspace {
        Workspace {
            files: self.files.clone(),
            origin: self
                .files
                .keys()
                .map(|k| (k.clone(), SEED_ORIGIN.to_string()))
                .collect(),
        }
    }

    /// Files rendered as `name` + fenced block, in name order, within
    /// `budget` bytes of content. When over budget the largest files are cut
    /// first: every file keeps at most `cap` bytes, with `cap` the largest
    /// value that fits.
    pub fn listing(&self, budget: usize) -> String {
        let sizes: Vec<usize> = self.files.values().map(String::len).collect();
        let cap = content_cap(&sizes, budget);
        let mut out = String::new();
        for (name, content) in &self.files {
            let lang = language_tag(name);
            out.push_str(name);
            out.push_str("\n```");
            out.push_str(lang);
            out.push('\n');
            if content.len() > cap {
                let cut = floor_char_boundary(content, cap);
                out.push_str(&content[..cut]);
                out.push_str(&format!("\n... [{} bytes truncated]", content.len() - cut));
            } else {
                out.push_str(content);
            }
            if !out.ends_with('\n') {
                out.push('\n');
            }
            out.push_str("```\n\n");
        }
        out.truncate(out.trim_end().len());
        out
    }
}

/// Largest per-file cap such that `sum(min(size, cap)) <= budget`.
pub(crate) fn content_cap(sizes: &[usize], budget: usize) -> usize {
    let total: usize = sizes.iter().sum();
    if total <= budget {
        return usize::MAX;
    }
    let mut sorted = sizes.to_vec();
    sorted.sort_unstable();
    let mut remaining = budget;
    let mut left = sorted.len();
    for size in sorted {
        let share = remaining / left;
        if size <= share {
            remaining -= size;
            left -= 1;
        } else {
            return share;
        }
    }
    usize::MAX
}

pub(crate) fn floor_char_boundary(s: &str, mut idx: usize) -> usize {
    if idx >= s.len() {
        return s.len();
    }
    while !s.is_char_boundary(idx) {
        idx -= 1;
    }
    idx
}

pub(crate) fn ceil_char_boundary(s: &str, mut idx: usize) -> usize {
    if idx >= s.len() {
        return s.len();
    }
    while !s.is_char_boundary(idx) {
        idx += 1;
    }
    idx
}

/// Keeps the last `budget` bytes of `text` (on a char boundary).
pub(crate) fn tail(text: &str, budget: usize) -> &str {
    if text.len() <= budget {
        return text;
    }
    &text[ceil_char_boundary(text, text.len() - budget)..]
}

fn language_tag(filename: &str) -> &'static str {
    match filename.rsplit('.').next().unwrap_or("") {
        "py" => "python",
        "js" | "mjs" => "javascript",
        "ts" => "typescript",
        "html" | "htm" => "html",
        "css" => "css",
        "rs" => "rust",
        "java" => "java",
        "go" => "go",
        "c" | "h" => "c",
        "cpp" | "hpp" | "cc" => "cpp",
        "json" => "json",
        "md" => "markdown",
        "sh" => "bash",
        _ => "",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_unsafe_names() {
        let mut ws = Workspace::new();
        assert!(ws.insert("../x.py", "", "a").is_err());
        assert!(ws.insert("/x.py", "", "a").is_err());
        assert!(ws.is_empty());
    }

    #[test]
    fn apply_is_last_writer_wins() {
        let mut ws = Workspace::new();
        ws.apply(&FilePatch::new("main.py", "1").unwrap(), "Programmer 1");
        ws.apply(&FilePatch::new("main.py", "2").unwrap(), "Programmer 2");
        assert_eq!(ws.get("main.py"), Some("2"));
        assert_eq!(ws.origin_of("main.py"), Some("Programmer 2"));
        assert_eq!(ws.reseeded().origin_of("main.py"), Some(SEED_ORIGIN));
    }

    #[test]
    fn cap_is_water_filled() {
        assert_eq!(content_cap(&[10, 20], 100), usize::MAX);
        // 5 + 5 + min(50, 40) + min(100, 40) = 90
        assert_eq!(content_cap(&[5, 5, 50, 100], 90), 40);
        assert_eq!(content_cap(&[100, 100], 50), 25);
        assert_eq!(content_cap(&[], 0), usize::MAX);
    }

    #[test]
    fn listing_truncates_largest_first() {
        let ws = Workspace::from_files([("a.py", "x".repeat(10)), ("b.py", "y".repeat(1000))]).unwrap();
        let listing = ws.listing(110);
        assert!(listing.contains(&"x".repeat(10)));
        assert!(listing.contains(&format!("{}\n... [900 bytes truncated]", "y".repeat(100))));
        assert!(listing.starts_with("a.py\n```python\n"));
    }

    #[test]
    fn empty_listing() {
        assert_eq!(Workspace::new().listing(100), "");
    }

    #[test]
    fn tail_respects_char_boundaries() {
        assert_eq!(tail("héllo", 4), "llo");
        assert_eq!(tail("abc", 10), "abc");
    }

    #[test]
    fn deserialization_checks_invariants() {
        assert!(serde_json::from_str::<Workspace>(r#"{"files":{"a.py":"x"},"origin":{"b.py":"n"}}"#).is_err());
        assert!(serde_json::from_str::<Workspace>(r#"{"files":{"../a.py":"x"},"origin":{}}"#).is_err());
    }
}
