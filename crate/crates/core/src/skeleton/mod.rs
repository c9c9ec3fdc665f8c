//! Structural skeletons: tagged step lists of the form `n. [TAG] summary`.
//!
//! Covers the canonical line grammar, summary and reason-block lints, the
//! `<summary>`/`<reason>` block extractor, the answer-leakage probe and
//! the skeleton capacity bound.

mod blocks;
mod lint;
mod probe;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use blocks::{extract_block, extract_blocks, SsrBlocks};
pub use lint::{
    lint_reason_block, lint_skeleton, lint_skeleton_with, LintConfig, LintReport, Severity,
    Violation,
};
pub use probe::{invariance_probe, ProbeReport, StepLeak};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SkeletonError {
    #[error("line {line}: invalid tag `{tag}`")]
    InvalidTag { line: usize, tag: String },
    #[error("line {line}: expected exactly one space {after}")]
    BadSpacing { line: usize, after: &'static str },
    #[error("line {line}: non-sequential numbering, expected {expected} found {found}")]
    NonSequentialNumbering {
        line: usize,
        expected: usize,
        found: usize,
    },
    #[error("line {line}: empty summary")]
    EmptySummary { line: usize },
    #[error("line {line}: not a skeleton line (`n. [TAG] summary`)")]
    MalformedLine { line: usize },
    #[error("malformed output: missing or unclosed <{block}> block")]
    MalformedOutput { block: &'static str },
    #[error("invalid skeleton: {0}")]
    Invalid(String),
    #[error("epsilon is undefined for an empty skeleton")]
    UndefinedEpsilon,
    #[error("invalid capacity-bound input: {0}")]
    InvalidBound(String),
}

/// Closed set of step intents.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FunctionalTag {
    Plan,
    Retr,
    Infr,
    Eval,
    Summ,
    Btrk,
    Rflx,
    Brch,
}

impl FunctionalTag {
    pub const ALL: [FunctionalTag; 8] = [
        FunctionalTag::Plan,
        FunctionalTag::Retr,
        FunctionalTag::Infr,
        FunctionalTag::Eval,
        FunctionalTag::Summ,
        FunctionalTag::Btrk,
        FunctionalTag::Rflx,
        FunctionalTag::Brch,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            FunctionalTag::Plan => "PLAN",
            FunctionalTag::Retr => "RETR",
            FunctionalTag::Infr => "INFR",
            FunctionalTag::Eval => "EVAL",
            FunctionalTag::Summ => "SUMM",
            FunctionalTag::Btrk => "BTRK",
            FunctionalTag::Rflx => "RFLX",
            FunctionalTag::Brch => "BRCH",
        }
    }
}

impl fmt::Display for FunctionalTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FunctionalTag {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        FunctionalTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonStep {
    pub index: usize,
    pub tag: FunctionalTag,
    pub summary: String,
}

/// Ordered skeleton steps with indices `1..=n`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<SkeletonStep>", into = "Vec<SkeletonStep>")]
pub struct Skeleton {
    steps: Vec<SkeletonStep>,
}

impl Skeleton {
    /// Validates consecutive numbering and single-line, trimmed, non-empty summaries.
    pub fn new(steps: Vec<SkeletonStep>) -> Result<Self, SkeletonError> {
        for (i, step) in steps.iter().enumerate() {
            if step.index != i + 1 {
                return Err(SkeletonError::Invalid(format!(
                    "step {} has index {}",
                    i + 1,
                    step.index
                )));
            }
            let s = &step.summary;
            if s.is_empty() || s.trim() != s || s.contains(['\n', '\r']) {
                return Err(SkeletonError::Invalid(format!(
                    "step {}: summary must be a non-empty trimmed single line",
                    i + 1
                )));
            }
        }
        Ok(Self { steps })
    }

    pub fn from_parts<I, S>(parts: I) -> Result<Self, SkeletonError>
    where
        I: IntoIterator<Item = (FunctionalTag, S)>,
        S: Into<String>,
    {
        Self::new(
            parts
                .into_iter()
                .enumerate()
                .map(|(i, (tag, summary))| SkeletonStep {
                    index: i + 1,
                    tag,
                    summary: summary.into(),
                })
                .collect(),
        )
    }

    pub fn steps(&self) -> &[SkeletonStep] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Canonical text: one `n. [TAG] summary` line per step, LF-separated,
    /// no trailing newline.
    pub fn render(&self) -> String {
        self.steps
            .iter()
            .map(|s| format!("{}. [{}] {}", s.index, s.tag, s.summary))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl TryFrom<Vec<SkeletonStep>> for Skeleton {
    type Error = SkeletonError;
    fn try_from(steps: Vec<SkeletonStep>) -> Result<Self, Self::Error> {
        Skeleton::new(steps)
    }
}

impl From<Skeleton> for Vec<SkeletonStep> {
    fn from(s: Skeleton) -> Self {
        s.steps
    }
}

/// Parses skeleton text. Blank lines are ignored; every other line must
/// match `<int>. [<TAG>] <summary>` with single spaces, numbered from 1.
pub fn parse_skeleton(text: &str) -> Result<Skeleton, SkeletonError> {
    let mut steps = Vec::new();
    for (i, raw) in text.split('\n').enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() {
            continue;
        }
        let step = parse_line(line, line_no)?;
        let expected = steps.len() + 1;
        if step.0 != expected {
            return Err(SkeletonError::NonSequentialNumbering {
                line: line_no,
                expected,
                found: step.0,
            });
        }
        steps.push(SkeletonStep {
            index: step.0,
            tag: step.1,
            summary: step.2,
        });
    }
    Skeleton::new(steps)
}

fn parse_line(line: &str, line_no: usize) -> Result<(usize, FunctionalTag, String), SkeletonError> {
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 || line.as_bytes().get(digits) != Some(&b'.') {
        return Err(SkeletonError::MalformedLine { line: line_no });
    }
    let index: usize = line[..digits]
        .parse()
        .map_err(|_| SkeletonError::MalformedLine { line: line_no })?;
    let rest = &line[digits + 1..];
    let after_dot = rest.trim_start_matches([' ', '\t']);
    if rest.len() - after_dot.len() != 1 || !rest.starts_with(' ') {
        return Err(SkeletonError::BadSpacing {
            line: line_no,
            after: "after the dot",
        });
    }
    let Some(inner) = after_dot.strip_prefix('[') else {
        return Err(SkeletonError::MalformedLine { line: line_no });
    };
    let Some(close) = inner.find(']') else {
        return Err(SkeletonError::MalformedLine { line: line_no });
    };
    let tag_text = &inner[..close];
    let tag: FunctionalTag = tag_text.parse().map_err(|_| SkeletonError::InvalidTag {
        line: line_no,
        tag: tag_text.to_string(),
    })?;
    let tail = &inner[close + 1..];
    if tail.trim().is_empty() {
        return Err(SkeletonError::EmptySummary { line: line_no });
    }
    let summary = tail.trim_start_matches([' ', '\t']);
    if tail.len() - summary.len() != 1 || !tail.starts_with(' ') {
        return Err(SkeletonError::BadSpacing {
            line: line_no,
            after: "after the tag",
        });
    }
    Ok((index, tag, summary.trim_end().to_string()))
}

/// Upper bound `n * (ln |F| + epsilon)` in nats on the information an
/// `n`-step skeleton can carry about the answer.
pub fn capacity_bound(n: u64, tag_count: u64, epsilon: f64) -> Result<f64, SkeletonError> {
    if tag_count < 1 {
        return Err(SkeletonError::InvalidBound("tag_count must be >= 1".into()));
    }
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(SkeletonError::InvalidBound(format!(
            "epsilon must be finite and >= 0, got {epsilon}"
        )));
    }
    Ok(n as f64 * ((tag_count as f64).ln() + epsilon))
}
