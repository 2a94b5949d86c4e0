use std::fmt::Write as _;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{is_test_filename, ParseError, DEFAULT_TEST_PREFIX};

pub const NO_ERROR_SENTINEL: &str = "No error in codes";
pub const WRONG_TEST_SENTINEL: &str = "Wrong test code";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientKind {
    NoError,
    WrongTestCode,
    Diagnoses,
}

impl GradientKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GradientKind::NoError => "no_error",
            GradientKind::WrongTestCode => "wrong_test_code",
            GradientKind::Diagnoses => "diagnoses",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub filename: String,
    pub functions: Vec<String>,
    pub analysis: String,
}

/// A parsed gradient-agent diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextualGradient {
    pub kind: GradientKind,
    pub diagnoses: Vec<Diagnosis>,
    /// The reply as received.
    pub raw: String,
}

impl TextualGradient {
    /// Text handed to the updating agent as the current issues.
    pub fn issues_text(&self) -> String {
        match self.kind {
            GradientKind::NoError => "No error in codes.".to_string(),
            GradientKind::WrongTestCode => self.raw.trim().to_string(),
            GradientKind::Diagnoses => self.diagnoses_text(),
        }
    }

    /// Diagnoses in the gradient agent's own answer format.
    pub fn diagnoses_text(&self) -> String {
        let mut out = String::new();
        for (i, d) in self.diagnoses.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            let _ = writeln!(out, "file name:{}", d.filename);
            let _ = writeln!(out, "function name: {}", d.functions.join(", "));
            let _ = writeln!(out, "detailed analysis of the problem: {}", d.analysis);
        }
        out
    }
}

fn block_regexes() -> &'static [Regex; 3] {
    static RE: OnceLock<[Regex; 3]> = OnceLock::new();
    RE.get_or_init(|| {
        let prefix = r"^[\s\-*+>]*(?:\d+[.)]\s*)?\**\s*";
        [
            Regex::new(&format!(r"(?i){prefix}file\s*names?\s*\**\s*:\s*\**(.*)$")).unwrap(),
            Regex::new(&format!(r"(?i){prefix}function\s*names?\s*\**\s*:\s*\**(.*)$")).unwrap(),
            Regex::new(&format!(
                r"(?i){prefix}detailed\s+analysis\s+of\s+the\s+problem\s*\**\s*:\s*\**(.*)$"
            ))
            .unwrap(),
        ]
    })
}

fn clean_token(s: &str) -> String {
    s.trim()
        .trim_matches(|c| matches!(c, '*' | '`' | '"' | '\''))
        .trim()
        .to_string()
}

/// Parses with the default test-file prefix.
pub fn parse_gradient(reply: &str) -> Result<TextualGradient, ParseError> {
    parse_gradient_with_prefix(reply, DEFAULT_TEST_PREFIX)
}

/// Classifies a gradient-agent reply.
///
/// The sentinels are matched as exact substrings, `No error in codes` first.
/// Otherwise the reply is split into `file name:` blocks; diagnoses of test
/// files are discarded.
pub fn parse_gradient_with_prefix(reply: &str, test_prefix: &str) -> Result<TextualGradient, ParseError> {
    let trimmed = reply.trim();
    let simple = |kind| TextualGradient {
        kind,
        diagnoses: Vec::new(),
        raw: reply.to_string(),
    };
    if trimmed.contains(NO_ERROR_SENTINEL) {
        return Ok(simple(GradientKind::NoError));
    }
    if trimmed.contains(WRONG_TEST_SENTINEL) {
        return Ok(simple(GradientKind::WrongTestCode));
    }

    #[derive(PartialEq)]
    enum Field {
        None,
        Analysis,
    }
    let [file_re, func_re, analysis_re] = block_regexes();
    let mut diagnoses: Vec<Diagnosis> = Vec::new();
    let mut field = Field::None;
    for line in trimmed.lines() {
        if let Some(c) = file_re.captures(line) {
            diagnoses.push(Diagnosis {
                filename: clean_token(&c[1]),
                functions: Vec::new(),
                analysis: String::new(),
            });
            field = Field::None;
        } else if let Some(c) = func_re.captures(line) {
            if let Some(d) = diagnoses.last_mut() {
                d.functions = c[1]
                    .split(',')
                    .map(|f| clean_token(f).trim_end_matches("()").to_string())
                    .filter(|f| !f.is_empty())
                    .collect();
            }
            field = Field::None;
        } else if let Some(c) = analysis_re.captures(line) {
            if let Some(d) = diagnoses.last_mut() {
                d.analysis = c[1].trim().to_string();
                field = Field::Analysis;
            }
        } else if field == Field::Analysis {
            let d = diagnoses.last_mut().expect("analysis follows a block");
            d.analysis.push('\n');
            d.analysis.push_str(line);
        }
    }
    for d in &mut diagnoses {
        d.analysis = d.analysis.trim().to_string();
    }
    let found = diagnoses.len();
    diagnoses.retain(|d| !d.filename.is_empty() && !is_test_filename(&d.filename, test_prefix));
    if diagnoses.is_empty() {
        let reason = if found > 0 {
            "every `file name:` block was empty or named a test file"
        } else {
            "expected `No error in codes.`, `Wrong test code.` or `file name:` blocks"
        };
        return Err(ParseError::UnparsableGradient(reason.into()));
    }
    Ok(TextualGradient {
        kind: GradientKind::Diagnoses,
        diagnoses,
        raw: reply.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sentinels() {
        assert_eq!(
            parse_gradient("No error in codes.").unwrap().kind,
            GradientKind::NoError
        );
        assert_eq!(
            parse_gradient("Wrong test code.").unwrap().kind,
            GradientKind::WrongTestCode
        );
        assert_eq!(
            parse_gradient("After careful review: Wrong test code. The expected score is 10.")
                .unwrap()
                .kind,
            GradientKind::WrongTestCode
        );
        assert_eq!(
            parse_gradient("  No error in codes.\n").unwrap().kind,
            GradientKind::NoError
        );
    }

    #[test]
    fn sentinels_are_case_sensitive() {
        assert!(parse_gradient("no error in codes.").is_err());
        assert!(parse_gradient("WRONG TEST CODE").is_err());
    }

    #[test]
    fn one_block() {
        let g = parse_gradient(
            "file name:game.py\nfunction name: move, jump\ndetailed analysis of the problem: jump ignores gravity",
        )
        .unwrap();
        assert_eq!(g.kind, GradientKind::Diagnoses);
        assert_eq!(
            g.diagnoses,
            vec![Diagnosis {
                filename: "game.py".into(),
                functions: vec!["move".into(), "jump".into()],
                analysis: "jump ignores gravity".into(),
            }]
        );
    }

    #[test]
    fn multiple_blocks_with_multiline_analysis() {
        let reply = "Let me look.\n\nfile name: game.py\nfunction name: `update()`\ndetailed analysis of the problem: score\nis never incremented.\n\n**file name:** ui.py\n**function name:** draw\n**detailed analysis of the problem:** wrong colour";
        let g = parse_gradient(reply).unwrap();
        assert_eq!(g.diagnoses.len(), 2);
        assert_eq!(g.diagnoses[0].functions, vec!["update"]);
        assert_eq!(g.diagnoses[0].analysis, "score\nis never incremented.");
        assert_eq!(g.diagnoses[1].filename, "ui.py");
        assert_eq!(g.diagnoses[1].analysis, "wrong colour");
    }

    #[test]
    fn test_files_are_dropped() {
        let reply = "file name:test_requirement_0.py\nfunction name: test_a\ndetailed analysis of the problem: x\n\nfile name:main.py\nfunction name: run\ndetailed analysis of the problem: y";
        let g = parse_gradient(reply).unwrap();
        assert_eq!(g.diagnoses.len(), 1);
        assert_eq!(g.diagnoses[0].filename, "main.py");

        let only_tests = "file name:test_requirement_0.py\nfunction name: t\ndetailed analysis of the problem: x";
        assert!(matches!(
            parse_gradient(only_tests),
            Err(ParseError::UnparsableGradient(_))
        ));
    }

    #[test]
    fn unparsable() {
        assert!(matches!(
            parse_gradient("The code looks mostly fine."),
            Err(ParseError::UnparsableGradient(_))
        ));
        assert!(matches!(parse_gradient(""), Err(ParseError::UnparsableGradient(_))));
    }

    #[test]
    fn canonical_text_reparses() {
        let g = parse_gradient("file name:a.py\nfunction name: f, g\ndetailed analysis of the problem: broken\nbadly")
            .unwrap();
        let again = parse_gradient(&g.diagnoses_text()).unwrap();
        assert_eq!(again.diagnoses, g.diagnoses);
    }
}
