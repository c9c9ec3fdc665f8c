use std::ops::Range;

use super::{TokenScore, TraceError};

/// Byte span of one reasoning step inside the original (un-normalized) text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSpan {
    pub start: usize,
    pub end: usize,
}

impl StepSpan {
    pub fn text<'a>(&self, source: &'a str) -> &'a str {
        &source[self.start..self.end]
    }
}

/// Splits a trace into steps at runs of blank lines. `\r\n` counts as a
/// newline; whitespace-only lines count as blank. Spans exclude the line
/// terminators around them.
pub fn segment_steps(text: &str) -> Vec<StepSpan> {
    let mut spans = Vec::new();
    let mut current: Option<StepSpan> = None;
    let mut line_start = 0;
    while line_start <= text.len() {
        let line_end = text[line_start..]
            .find('\n')
            .map_or(text.len(), |i| line_start + i);
        let mut content_end = line_end;
        if text[line_start..content_end].ends_with('\r') {
            content_end -= 1;
        }
        let line = &text[line_start..content_end];
        if line.trim().is_empty() {
            if let Some(span) = current.take() {
                spans.push(span);
            }
        } else {
            match current.as_mut() {
                Some(span) => span.end = content_end,
                None => {
                    current = Some(StepSpan {
                        start: line_start,
                        end: content_end,
                    })
                }
            }
        }
        if line_end == text.len() {
            break;
        }
        line_start = line_end + 1;
    }
    if let Some(span) = current {
        spans.push(span);
    }
    spans
}

/// Token range assigned to one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepRange {
    /// 1-based index of the span this range belongs to.
    pub index: usize,
    pub tokens: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StepMapping {
    pub steps: Vec<StepRange>,
    /// 1-based indices of spans that received no tokens.
    pub dropped: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Assigns each token to the span holding its first byte. Tokens that start
/// in the gap between two spans (separator newlines) go to the preceding
/// span; tokens before the first span go to the first.
pub fn map_tokens_to_steps(
    tokens: &[TokenScore],
    spans: &[StepSpan],
    text_len: usize,
) -> Result<StepMapping, TraceError> {
    for (i, tok) in tokens.iter().enumerate() {
        if tok.byte_offset >= text_len {
            return Err(TraceError::OffsetOutOfRange {
                index: i,
                offset: tok.byte_offset,
                len: text_len,
            });
        }
        if i > 0 && tok.byte_offset <= tokens[i - 1].byte_offset {
            return Err(TraceError::NonMonotoneOffsets { index: i });
        }
    }
    let mut mapping = StepMapping::default();
    if spans.is_empty() {
        if !tokens.is_empty() {
            mapping
                .warnings
                .push(format!("{} tokens but no step spans", tokens.len()));
        }
        return Ok(mapping);
    }

    let mut counts = vec![0usize; spans.len()];
    for tok in tokens {
        let owner = spans
            .partition_point(|s| s.start <= tok.byte_offset)
            .saturating_sub(1);
        counts[owner] += 1;
    }
    let mut next = 0;
    for (i, &count) in counts.iter().enumerate() {
        if count == 0 {
            mapping.dropped.push(i + 1);
            mapping
                .warnings
                .push(format!("step {} has no tokens and was dropped", i + 1));
            continue;
        }
        mapping.steps.push(StepRange {
            index: i + 1,
            tokens: next..next + count,
        });
        next += count;
    }
    Ok(mapping)
}
