/// Surface tokenizer settings. The defaults (lowercase, punctuation split)
/// are what the lexical metric uses; turning both off gives plain
/// whitespace tokens for byte-exact comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub split_punctuation: bool,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            split_punctuation: true,
        }
    }
}

/// ASCII punctuation plus the common typographic quotes, dashes and CJK marks.
pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00BF}'
                | '\u{00A1}'
                | '\u{3001}'
                | '\u{3002}'
                | '\u{FF0C}'
                | '\u{FF01}'
                | '\u{FF1F}'
                | '\u{FF1A}'
                | '\u{FF1B}'
        )
}

pub fn tokenize_surface(text: &str) -> Vec<String> {
    tokenize_with(text, &TokenizerConfig::default())
}

pub fn tokenize_with(text: &str, config: &TokenizerConfig) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if !config.split_punctuation {
            out.push(fold(word, config));
            continue;
        }
        let (lead, core, trail) = split_affixes(word);
        out.extend(lead.chars().map(String::from));
        if !core.is_empty() {
            out.push(fold(core, config));
        }
        out.extend(trail.chars().map(String::from));
    }
    out
}

/// Splits a whitespace-free word into leading punctuation, core and
/// trailing punctuation. An all-punctuation word is returned as leading.
pub(crate) fn split_affixes(word: &str) -> (&str, &str, &str) {
    let core_start = word
        .char_indices()
        .find(|&(_, c)| !is_punctuation(c))
        .map_or(word.len(), |(i, _)| i);
    let rest = &word[core_start..];
    let core_len = rest
        .char_indices()
        .rev()
        .find(|&(_, c)| !is_punctuation(c))
        .map_or(0, |(i, c)| i + c.len_utf8());
    (&word[..core_start], &rest[..core_len], &rest[core_len..])
}

fn fold(s: &str, config: &TokenizerConfig) -> String {
    if config.lowercase {
        s.to_lowercase()
    } else {
        s.to_string()
    }
}
