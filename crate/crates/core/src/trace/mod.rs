//! Shared data model: query/answer pairs, scored tokens, trace records,
//! surface tokenization and step segmentation.

mod io;
mod segment;
mod tokenize;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entropic::Degeneracy;
use crate::skeleton::Skeleton;
use crate::zones::ConditionKind;

pub use io::{
    load_pairs, load_trace_records, read_jsonl, save_trace_records, to_canonical_jsonl,
    write_jsonl, LineIssue, LoadMode, LoadOutcome,
};
pub use segment::{map_tokens_to_steps, segment_steps, StepMapping, StepRange, StepSpan};
pub(crate) use tokenize::split_affixes;
pub use tokenize::{is_punctuation, tokenize_surface, tokenize_with, TokenizerConfig};

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{}", format_issues(.issues))]
    Load { issues: Vec<LineIssue> },
    #[error("token {index} starts at byte {offset}, beyond text length {len}")]
    OffsetOutOfRange {
        index: usize,
        offset: usize,
        len: usize,
    },
    #[error("token offsets not strictly increasing at token {index}")]
    NonMonotoneOffsets { index: usize },
    #[error("invalid record: {0}")]
    Invalid(String),
}

fn format_issues(issues: &[LineIssue]) -> String {
    issues
        .iter()
        .map(|i| format!("line {}: {}", i.line, i.message))
        .collect::<Vec<_>>()
        .join("; ")
}

/// A query with its pre-committed answer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QAPair {
    pub id: String,
    pub query: String,
    pub answer: String,
}

impl QAPair {
    pub fn new(id: impl Into<String>, query: impl Into<String>, answer: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            query: query.into(),
            answer: answer.into(),
        }
    }

    pub fn validate(&self) -> Result<(), TraceError> {
        if self.id.is_empty() {
            return Err(TraceError::Invalid("empty id".into()));
        }
        if self.query.trim().is_empty() {
            return Err(TraceError::Invalid("empty query".into()));
        }
        if self.answer.trim().is_empty() {
            return Err(TraceError::Invalid("empty answer".into()));
        }
        Ok(())
    }
}

/// Where a token's entropy came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntropySource {
    /// Computed from the full predictive distribution.
    Exact,
    /// Estimated from the top-k alternatives plus a tail bucket.
    Topk,
}

/// One emitted token with its log-probability (nats) and predictive entropy (nats).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    #[serde(rename = "t")]
    pub text: String,
    #[serde(rename = "lp")]
    pub logprob: f64,
    #[serde(rename = "h")]
    pub entropy: f64,
    #[serde(rename = "off")]
    pub byte_offset: usize,
    #[serde(rename = "hs", default, skip_serializing_if = "Option::is_none")]
    pub entropy_source: Option<EntropySource>,
}

/// Generation strategy (or reference condition) that produced a trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    Neu,
    Sup,
    AugSup,
    Ssr,
    Condition(ConditionKind),
}

impl Method {
    pub const PROMPTED: [Method; 4] = [Method::Neu, Method::Sup, Method::AugSup, Method::Ssr];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Neu => "NEU",
            Method::Sup => "SUP",
            Method::AugSup => "AUG_SUP",
            Method::Ssr => "SSR",
            Method::Condition(kind) => kind.as_str(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase().replace('-', "_");
        match upper.as_str() {
            "NEU" => Ok(Method::Neu),
            "SUP" => Ok(Method::Sup),
            "AUG_SUP" | "AUGSUP" => Ok(Method::AugSup),
            "SSR" => Ok(Method::Ssr),
            other => {
                let kind = other.strip_prefix("CONDITION:").unwrap_or(other);
                kind.parse::<ConditionKind>()
                    .map(Method::Condition)
                    .map_err(|_| format!("unknown method `{s}`"))
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.as_str().to_string()
    }
}

/// The unit every stage of the pipeline passes around.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    #[serde(flatten)]
    pub pair: QAPair,
    pub method: Method,
    pub trace_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<TokenScore>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub skeleton: Option<Skeleton>,
}

impl TraceRecord {
    pub fn text_only(pair: QAPair, method: Method, trace_text: impl Into<String>) -> Self {
        Self {
            pair,
            method,
            trace_text: trace_text.into(),
            tokens: None,
            skeleton: None,
        }
    }

    pub fn has_tokens(&self) -> bool {
        self.tokens.as_ref().is_some_and(|t| !t.is_empty())
    }

    /// Checks the schema-level invariants that serde cannot express.
    pub fn validate(&self) -> Result<(), TraceError> {
        self.pair.validate()?;
        if let Some(tokens) = &self.tokens {
            validate_tokens(tokens, &self.trace_text)?;
        }
        Ok(())
    }
}

pub(crate) fn validate_tokens(tokens: &[TokenScore], text: &str) -> Result<(), TraceError> {
    let mut prev: Option<usize> = None;
    for (i, tok) in tokens.iter().enumerate() {
        if !tok.logprob.is_finite() || tok.logprob > 0.0 {
            return Err(TraceError::Invalid(format!(
                "token {i}: logprob must be finite and <= 0, got {}",
                tok.logprob
            )));
        }
        if !tok.entropy.is_finite() || tok.entropy < 0.0 {
            return Err(TraceError::Invalid(format!(
                "token {i}: entropy must be finite and >= 0, got {}",
                tok.entropy
            )));
        }
        if prev.is_some_and(|p| tok.byte_offset <= p) {
            return Err(TraceError::NonMonotoneOffsets { index: i });
        }
        if tok.byte_offset >= text.len() || !text.is_char_boundary(tok.byte_offset) {
            return Err(TraceError::OffsetOutOfRange {
                index: i,
                offset: tok.byte_offset,
                len: text.len(),
            });
        }
        prev = Some(tok.byte_offset);
    }
    Ok(())
}

/// Per-step token group with its mean predictive entropy.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    /// 1-based position of the step among the segmented spans.
    pub index: usize,
    pub token_range: Range<usize>,
    /// Mean entropy over the step's tokens, in nats.
    pub info_density: f64,
}

/// Components of the entropic score carried alongside the headline triple.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub g_unif: f64,
    pub l_nonunif: f64,
    pub var_norm: f64,
    pub mu_delta: f64,
    pub sigma_delta: f64,
}

/// The three anchoring metrics for one trace. Absent metrics were either not
/// requested, not computable (missing logprobs) or degenerate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnchoringScores {
    pub a_lex: Option<f64>,
    pub a_ent: Option<f64>,
    pub a_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<ScoreBreakdown>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<Degeneracy>,
}

impl AnchoringScores {
    /// Point in the entropic/probabilistic plane, when both coordinates exist.
    pub fn plane_point(&self) -> Option<(f64, f64)> {
        Some((self.a_ent?, self.a_prob?))
    }
}
