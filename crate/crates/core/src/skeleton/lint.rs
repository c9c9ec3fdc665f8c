use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{FunctionalTag, Skeleton};
use crate::trace::{is_punctuation, segment_steps, tokenize_surface};
use crate::zones::FunctionWords;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub rule_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_index: Option<usize>,
    pub severity: Severity,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LintReport {
    pub violations: Vec<Violation>,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_errors(&self) -> bool {
        self.violations
            .iter()
            .any(|v| v.severity == Severity::Error)
    }

    pub fn rule_ids(&self) -> Vec<&str> {
        self.violations.iter().map(|v| v.rule_id.as_str()).collect()
    }

    fn push(&mut self, rule: &str, step: Option<usize>, severity: Severity, message: String) {
        self.violations.push(Violation {
            rule_id: rule.to_string(),
            step_index: step,
            severity,
            message,
        });
    }
}

/// Rule switches and thresholds for [`lint_skeleton`].
#[derive(Debug, Clone)]
pub struct LintConfig {
    /// L1: maximum whitespace-delimited words per summary.
    pub max_words: usize,
    pub check_length: bool,
    /// L2: numeric literals, quoted strings, answer content trigrams.
    pub check_leaks: bool,
    /// L3: composite actions (`;` or ` and then `).
    pub check_granularity: bool,
    pub function_words: FunctionWords,
}

impl Default for LintConfig {
    fn default() -> Self {
        Self {
            max_words: 20,
            check_length: true,
            check_leaks: true,
            check_granularity: true,
            function_words: FunctionWords::builtin().clone(),
        }
    }
}

fn quoted_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r#""[^"]+"|\u{201C}[^\u{201D}]+\u{201D}|(?:^|\s)'[^']+'(?:$|[\s.,;:!?])"#)
            .unwrap()
    })
}

fn content_words(text: &str, fw: &FunctionWords) -> Vec<String> {
    tokenize_surface(text)
        .into_iter()
        .filter(|t| !t.chars().all(is_punctuation) && !fw.contains(t))
        .collect()
}

pub fn lint_skeleton(skeleton: &Skeleton, answer_text: &str) -> LintReport {
    lint_skeleton_with(skeleton, answer_text, &LintConfig::default())
}

pub fn lint_skeleton_with(
    skeleton: &Skeleton,
    answer_text: &str,
    config: &LintConfig,
) -> LintReport {
    let mut report = LintReport::default();
    let answer_words = content_words(answer_text, &config.function_words);
    let trigrams: Vec<&[String]> = answer_words.windows(3).collect();

    for step in skeleton.steps() {
        let idx = Some(step.index);
        let summary = &step.summary;

        if config.check_length {
            let words = summary.split_whitespace().count();
            if words > config.max_words {
                report.push(
                    "L1",
                    idx,
                    Severity::Error,
                    format!("summary has {words} words, limit {}", config.max_words),
                );
            }
        }

        if config.check_leaks {
            if summary.chars().any(|c| c.is_ascii_digit()) {
                report.push(
                    "L2",
                    idx,
                    Severity::Warning,
                    "summary contains a numeric literal".into(),
                );
            }
            if quoted_re().is_match(summary) {
                report.push(
                    "L2",
                    idx,
                    Severity::Warning,
                    "summary contains a quoted string".into(),
                );
            }
            let words = content_words(summary, &config.function_words);
            if let Some(tri) = trigrams.iter().find(|t| words.windows(3).any(|w| w == **t)) {
                report.push(
                    "L2",
                    idx,
                    Severity::Warning,
                    format!("summary repeats answer phrase `{}`", tri.join(" ")),
                );
            }
        }

        if config.check_granularity && (summary.contains(';') || summary.contains(" and then ")) {
            report.push(
                "L3",
                idx,
                Severity::Warning,
                "summary combines several actions; split into separate steps".into(),
            );
        }
    }
    report
}

fn numbered_line_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^[ \t]*\d+\.").unwrap())
}

/// Checks a `<reason>` block against its skeleton: no step numbering, no
/// literal tags, one paragraph per step.
pub fn lint_reason_block(reason_text: &str, skeleton: &Skeleton) -> LintReport {
    let mut report = LintReport::default();
    if numbered_line_re().is_match(reason_text) {
        report.push(
            "R1",
            None,
            Severity::Error,
            "reason block numbers its steps".into(),
        );
    }
    for tag in FunctionalTag::ALL {
        let literal = format!("[{tag}]");
        if reason_text.contains(&literal) {
            report.push(
                "R2",
                None,
                Severity::Error,
                format!("reason block uses tag label {literal}"),
            );
        }
    }
    let paragraphs = segment_steps(reason_text).len();
    if paragraphs != skeleton.len() {
        report.push(
            "R3",
            None,
            Severity::Warning,
            format!(
                "{paragraphs} paragraphs for {} skeleton steps",
                skeleton.len()
            ),
        );
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::parse_skeleton;

    fn one(summary: &str) -> Skeleton {
        Skeleton::from_parts([(FunctionalTag::Infr, summary)]).unwrap()
    }

    #[test]
    fn word_limit() {
        let twenty = vec!["word"; 20].join(" ");
        assert!(lint_skeleton(&one(&twenty), "x").is_clean());
        let report = lint_skeleton(&one(&format!("{twenty} more")), "x");
        assert_eq!(report.rule_ids(), ["L1"]);
        assert_eq!(report.violations[0].step_index, Some(1));
        assert!(report.has_errors());
    }

    #[test]
    fn numeric_literal_warns() {
        let report = lint_skeleton(&one("calculate 0.5"), "the ratio is 0.5");
        assert_eq!(report.rule_ids(), ["L2"]);
        assert_eq!(report.violations[0].severity, Severity::Warning);
        assert!(lint_skeleton(&one("calculate the ratio"), "the ratio is 0.5").is_clean());
    }

    #[test]
    fn quoted_and_trigram_leaks() {
        assert_eq!(
            lint_skeleton(&one("Mention \"blue whale\" explicitly"), "x").rule_ids(),
            ["L2"]
        );
        assert!(lint_skeleton(&one("Restate the user's goal"), "x").is_clean());
        let answer = "The largest animal is the blue whale species overall.";
        let r = lint_skeleton(&one("Name the blue whale species first"), answer);
        assert_eq!(r.rule_ids(), ["L2"]);
        assert!(r.violations[0].message.contains("blue whale species"));
    }

    #[test]
    fn granularity() {
        assert_eq!(
            lint_skeleton(&one("Identify constraints; choose approach"), "x").rule_ids(),
            ["L3"]
        );
        assert_eq!(
            lint_skeleton(&one("Identify constraints and then choose approach"), "x").rule_ids(),
            ["L3"]
        );
    }

    #[test]
    fn abstract_skeleton_is_clean() {
        let s = parse_skeleton(
            "1. [PLAN] Analyze the request and define the overall goal.\n\
             2. [RETR] Recall the relevant background facts for this topic.\n\
             3. [EVAL] Check that the conclusion satisfies every stated constraint.",
        )
        .unwrap();
        assert!(lint_skeleton(&s, "Paris is the capital of France.").is_clean());
    }

    #[test]
    fn rules_can_be_disabled() {
        let cfg = LintConfig {
            check_leaks: false,
            ..LintConfig::default()
        };
        assert!(lint_skeleton_with(&one("calculate 0.5"), "x", &cfg).is_clean());
    }

    #[test]
    fn reason_block_rules() {
        let skel = parse_skeleton("1. [PLAN] a\n2. [INFR] b\n3. [EVAL] c\n4. [SUMM] d").unwrap();
        let tagged = "We [PLAN] first.\n\nThen infer.\n\nCheck.\n\nWrap up.";
        assert_eq!(lint_reason_block(tagged, &skel).rule_ids(), ["R2"]);

        let numbered = "1. We plan.\n\nThen infer.\n\nCheck.\n\nWrap up.";
        assert_eq!(lint_reason_block(numbered, &skel).rule_ids(), ["R1"]);

        let five = "a\n\nb\n\nc\n\nd\n\ne";
        let r = lint_reason_block(five, &skel);
        assert_eq!(r.rule_ids(), ["R3"]);
        assert!(!r.has_errors());

        let clean = "First we plan.\n\nThen we infer.\n\nWe check it.\n\nWe wrap up.";
        assert!(lint_reason_block(clean, &skel).is_clean());
    }
}
