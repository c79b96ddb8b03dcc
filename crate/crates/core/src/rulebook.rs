//! Ordered category rules and first-match log classification.
//!
//! A rule file is a sequence of sections:
//!
//! ```text
//! [category-id]
//! description = free text
//! pattern = regex            (repeatable, order kept)
//! case_insensitive = true    (optional, default true)
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Patterns use the
//! `regex` crate dialect, which has no backreferences or lookaround, so every
//! scan is linear in the log length. Patterns are unanchored and compiled in
//! multi-line mode; `.` never crosses a newline.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use regex::{RegexBuilder, RegexSet, RegexSetBuilder};
use thiserror::Error;

use crate::ansi::strip_ansi;

const BUILTIN: &str = include_str!("builtin.rules");

#[derive(Debug, Error)]
pub enum RulebookError {
    #[error("cannot read rule file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("rule file line {line}: {message}")]
    RuleParseError { line: usize, message: String },
    #[error("rule `{category}`: bad pattern `{pattern}`: {reason}")]
    BadPattern {
        category: String,
        pattern: String,
        reason: String,
    },
    #[error("duplicate category `{0}`")]
    DuplicateCategory(String),
    #[error("rulebook contains no rules")]
    EmptyRulebook,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rule {
    pub category: String,
    pub description: String,
    pub patterns: Vec<String>,
    pub case_insensitive: bool,
}

impl Rule {
    pub fn new(category: impl Into<String>, patterns: &[&str]) -> Self {
        Rule {
            category: category.into(),
            description: String::new(),
            patterns: patterns.iter().map(|p| p.to_string()).collect(),
            case_insensitive: true,
        }
    }

    /// Pattern source with the rule's flags applied inline.
    fn flagged(&self, pattern: &str) -> String {
        let flags = if self.case_insensitive { "mi" } else { "m" };
        format!("(?{flags}:{pattern})")
    }
}

/// Compiled, immutable rulebook. Safe to share across threads.
#[derive(Debug, Clone)]
pub struct Rulebook {
    rules: Vec<Rule>,
    source: String,
    set: RegexSet,
    /// Rule index for each pattern in `set`.
    owner: Vec<usize>,
}

fn valid_category(name: &str) -> bool {
    !name.is_empty()
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_' || b == b'-')
}

impl Rulebook {
    pub fn new(rules: Vec<Rule>, source: impl Into<String>) -> Result<Self, RulebookError> {
        if rules.is_empty() {
            return Err(RulebookError::EmptyRulebook);
        }
        let mut seen = HashSet::new();
        let mut sources = Vec::new();
        let mut owner = Vec::new();
        for (idx, rule) in rules.iter().enumerate() {
            if !seen.insert(rule.category.as_str()) {
                return Err(RulebookError::DuplicateCategory(rule.category.clone()));
            }
            for pattern in &rule.patterns {
                // Compile individually first so errors name the pattern.
                RegexBuilder::new(pattern)
                    .multi_line(true)
                    .case_insensitive(rule.case_insensitive)
                    .build()
                    .map_err(|e| RulebookError::BadPattern {
                        category: rule.category.clone(),
                        pattern: pattern.clone(),
                        reason: e.to_string(),
                    })?;
                sources.push(rule.flagged(pattern));
                owner.push(idx);
            }
        }
        let set = RegexSetBuilder::new(&sources)
            .size_limit(256 << 20)
            .build()
            .map_err(|e| RulebookError::BadPattern {
                category: "*".into(),
                pattern: "<combined set>".into(),
                reason: e.to_string(),
            })?;
        Ok(Rulebook {
            rules,
            source: source.into(),
            set,
            owner,
        })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN, "builtin").expect("builtin rulebook is valid")
    }

    pub fn parse(text: &str, source: &str) -> Result<Self, RulebookError> {
        let mut rules: Vec<(usize, Rule)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let err = |message: String| RulebookError::RuleParseError { line, message };
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?
                    .trim();
                if !valid_category(name) {
                    return Err(err(format!("category `{name}` must match [a-z0-9_-]+")));
                }
                rules.push((
                    line,
                    Rule {
                        category: name.to_string(),
                        description: String::new(),
                        patterns: Vec::new(),
                        case_insensitive: true,
                    },
                ));
                continue;
            }
            let (key, value) = trimmed
                .split_once('=')
                .ok_or_else(|| err("expected `key = value`".into()))?;
            let (key, value) = (key.trim(), value.trim());
            let (_, rule) = rules
                .last_mut()
                .ok_or_else(|| err("key outside of a [category] section".into()))?;
            match key {
                "description" => rule.description = value.to_string(),
                "pattern" => {
                    if value.is_empty() {
                        return Err(err("empty pattern".into()));
                    }
                    rule.patterns.push(value.to_string())
                }
                "case_insensitive" => {
                    rule.case_insensitive = match value {
                        "true" => true,
                        "false" => false,
                        other => return Err(err(format!("expected true|false, got `{other}`"))),
                    }
                }
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        if let Some((line, rule)) = rules.iter().find(|(_, r)| r.patterns.is_empty()) {
            return Err(RulebookError::RuleParseError {
                line: *line,
                message: format!("rule `{}` has no patterns", rule.category),
            });
        }
        Self::new(rules.into_iter().map(|(_, r)| r).collect(), source)
    }

    pub fn rules(&self) -> &[Rule] {
        &self.rules
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    /// Category of the first rule with any pattern matching the ANSI-stripped
    /// log, or `None`.
    pub fn match_category(&self, log: &str) -> Option<&str> {
        if log.is_empty() {
            return None;
        }
        let text = strip_ansi(log);
        self.set
            .matches(&text)
            .iter()
            .map(|p| self.owner[p])
            .min()
            .map(|r| self.rules[r].category.as_str())
    }
}

/// Loads the rulebook at `path`, or the builtin starter rulebook.
pub fn load_rules(path: Option<&Path>) -> Result<Rulebook, RulebookError> {
    match path {
        None => Ok(Rulebook::builtin()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| RulebookError::Io {
                path: p.display().to_string(),
                source: e,
            })?;
            Rulebook::parse(&text, &p.display().to_string())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_order() {
        let rb = load_rules(None).unwrap();
        let cats: Vec<_> = rb.rules().iter().map(|r| r.category.as_str()).collect();
        assert_eq!(
            cats,
            [
                "job_timeout",
                "runner_failure",
                "connection_error",
                "out_of_memory",
                "docker_pull_error",
                "git_checkout_error",
                "dependency_install_error",
                "disk_quota_exceeded",
            ]
        );
        assert!(rb
            .rules()
            .iter()
            .all(|r| (2..=4).contains(&r.patterns.len())));
        assert_eq!(rb.source(), "builtin");
    }

    #[test]
    fn duplicate_category_rejected() {
        let text = "[oom]\npattern = a\n[oom]\npattern = b\n";
        assert!(matches!(
            Rulebook::parse(text, "t"),
            Err(RulebookError::DuplicateCategory(c)) if c == "oom"
        ));
    }

    #[test]
    fn backreference_rejected() {
        let text = "[x]\npattern = (?P<x>a)\\1\n";
        assert!(matches!(
            Rulebook::parse(text, "t"),
            Err(RulebookError::BadPattern { category, .. }) if category == "x"
        ));
    }

    #[test]
    fn lookaround_rejected() {
        let text = "[x]\npattern = foo(?=bar)\n";
        assert!(matches!(
            Rulebook::parse(text, "t"),
            Err(RulebookError::BadPattern { .. })
        ));
    }

    #[test]
    fn parse_errors_carry_line() {
        for (text, line) in [
            ("pattern = a\n", 1),
            ("[ok]\npattern = a\n\n[Bad Name]\npattern = b\n", 4),
            ("[ok]\nnonsense\n", 2),
            ("[ok]\ncase_insensitive = maybe\npattern = a\n", 2),
            ("# c\n[empty]\ndescription = nothing\n", 2),
            ("[ok]\ncolour = red\n", 2),
        ] {
            match Rulebook::parse(text, "t") {
                Err(RulebookError::RuleParseError { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(matches!(
            Rulebook::parse("# nothing\n", "t"),
            Err(RulebookError::EmptyRulebook)
        ));
    }

    #[test]
    fn empty_log_has_no_category() {
        assert_eq!(Rulebook::builtin().match_category(""), None);
    }

    #[test]
    fn first_rule_wins() {
        let rb = Rulebook::new(
            vec![
                Rule::new("r1", &["connection timed out"]),
                Rule::new("r2", &["timed out"]),
            ],
            "t",
        )
        .unwrap();
        assert_eq!(rb.match_category("error: connection timed out"), Some("r1"));
        assert_eq!(rb.match_category("step timed out"), Some("r2"));
    }

    #[test]
    fn case_flag_respected() {
        let text = "[strict]\ncase_insensitive = false\npattern = OOM\n[loose]\npattern = oom\n";
        let rb = Rulebook::parse(text, "t").unwrap();
        assert_eq!(rb.match_category("OOM"), Some("strict"));
        assert_eq!(rb.match_category("oom"), Some("loose"));
        assert_eq!(rb.match_category("Oom"), Some("loose"));
    }

    #[test]
    fn dot_does_not_cross_lines_and_anchors_are_per_line() {
        let text = "[a]\npattern = ^fatal: .*refused$\n";
        let rb = Rulebook::parse(text, "t").unwrap();
        assert_eq!(rb.match_category("x\nfatal: conn refused\ny"), Some("a"));
        assert_eq!(rb.match_category("fatal: conn\nrefused"), None);
    }

    #[test]
    fn ansi_codes_do_not_split_literals() {
        let rb = Rulebook::builtin();
        assert_eq!(
            rb.match_category("\x1b[31mno space left\x1b[0m on device"),
            Some("disk_quota_exceeded")
        );
    }
}
