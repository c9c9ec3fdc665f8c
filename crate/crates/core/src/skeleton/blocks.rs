use std::ops::Range;

use super::SkeletonError;

/// Contents of a single-call SSR completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SsrBlocks {
    pub summary: String,
    pub reason: String,
    /// Trimmed non-whitespace text found outside both blocks.
    pub outside: String,
    /// Byte range of the (trimmed) reason content in the input.
    pub reason_span: Range<usize>,
    pub warnings: Vec<String>,
}

fn find_block(
    text: &str,
    name: &'static str,
) -> Result<(Range<usize>, Range<usize>), SkeletonError> {
    let open = format!("<{name}>");
    let close = format!("</{name}>");
    let start = text
        .find(&open)
        .ok_or(SkeletonError::MalformedOutput { block: name })?;
    let body_start = start + open.len();
    let body_len = text[body_start..]
        .find(&close)
        .ok_or(SkeletonError::MalformedOutput { block: name })?;
    let body_end = body_start + body_len;
    Ok((start..body_end + close.len(), body_start..body_end))
}

fn trimmed(text: &str, range: Range<usize>) -> Range<usize> {
    let s = &text[range.clone()];
    let lead = s.len() - s.trim_start().len();
    let trail = s.len() - s.trim_end().len();
    range.start + lead..range.end - trail
}

/// Trimmed content span of a single `<name>...</name>` block.
pub fn extract_block(text: &str, name: &'static str) -> Result<Range<usize>, SkeletonError> {
    let (_, body) = find_block(text, name)?;
    Ok(trimmed(text, body))
}

pub fn extract_blocks(text: &str) -> Result<SsrBlocks, SkeletonError> {
    let (summary_outer, summary_body) = find_block(text, "summary")?;
    let (reason_outer, reason_body) = find_block(text, "reason")?;
    if summary_outer.start < reason_outer.end && reason_outer.start < summary_outer.end {
        return Err(SkeletonError::MalformedOutput { block: "reason" });
    }

    let mut outer = [summary_outer, reason_outer];
    outer.sort_by_key(|r| r.start);
    let mut outside = String::new();
    let mut cursor = 0;
    for r in &outer {
        push_piece(&mut outside, &text[cursor..r.start]);
        cursor = r.end;
    }
    push_piece(&mut outside, &text[cursor..]);

    let mut warnings = Vec::new();
    if !outside.is_empty() {
        warnings.push(format!("text outside the required blocks: {outside}"));
    }
    let summary_span = trimmed(text, summary_body);
    let reason_span = trimmed(text, reason_body);
    Ok(SsrBlocks {
        summary: text[summary_span].to_string(),
        reason: text[reason_span.clone()].to_string(),
        outside,
        reason_span,
        warnings,
    })
}

fn push_piece(out: &mut String, piece: &str) {
    let piece = piece.trim();
    if piece.is_empty() {
        return;
    }
    if !out.is_empty() {
        out.push('\n');
    }
    out.push_str(piece);
}
