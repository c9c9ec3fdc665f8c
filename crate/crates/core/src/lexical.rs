//! Lexical anchoring: ROUGE-L recall of the answer inside the trace.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{tokenize_with, TokenizerConfig};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LexicalError {
    #[error("lexical anchoring undefined: answer has no tokens")]
    EmptyAnswer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LexicalResult {
    pub lcs_len: usize,
    pub answer_len: usize,
    pub a_lex: f64,
}

/// Length of the longest common subsequence, O(|a|·|b|) time and
/// O(min(|a|, |b|)) memory.
pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return 0;
    }
    let mut row = vec![0usize; short.len() + 1];
    for x in long {
        // `diag` holds the previous row's value at j-1
        let mut diag = 0;
        for (j, y) in short.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[short.len()]
}

/// `LCS(R, A) / |A|` over surface tokens of trace and answer.
pub fn lexical_anchoring(
    trace_text: &str,
    answer_text: &str,
) -> Result<LexicalResult, LexicalError> {
    lexical_anchoring_with(trace_text, answer_text, &TokenizerConfig::default())
}

pub fn lexical_anchoring_with(
    trace_text: &str,
    answer_text: &str,
    config: &TokenizerConfig,
) -> Result<LexicalResult, LexicalError> {
    let answer = tokenize_with(answer_text, config);
    if answer.is_empty() {
        return Err(LexicalError::EmptyAnswer);
    }
    let trace = tokenize_with(trace_text, config);
    let lcs_len = lcs_length(&trace, &answer);
    Ok(LexicalResult {
        lcs_len,
        answer_len: answer.len(),
        a_lex: lcs_len as f64 / answer.len() as f64,
    })
}
