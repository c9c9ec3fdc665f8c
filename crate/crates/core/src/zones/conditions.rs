use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::ZoneError;
use crate::trace::split_affixes;

/// Controlled reference conditions that locate the behavioral zones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionKind {
    /// The model's own reasoning, answer unseen.
    #[serde(rename = "REAL_COT")]
    RealCot,
    /// Own reasoning followed by the answer.
    #[serde(rename = "PROB_ANCHOR")]
    ProbAnchor,
    /// The answer with content words masked out.
    #[serde(rename = "ENTROPY_ANCHOR")]
    EntropyAnchor,
    /// The answer itself posing as the trace.
    #[serde(rename = "COPY")]
    Copy,
}

impl ConditionKind {
    pub const ALL: [ConditionKind; 4] = [
        ConditionKind::RealCot,
        ConditionKind::ProbAnchor,
        ConditionKind::EntropyAnchor,
        ConditionKind::Copy,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionKind::RealCot => "REAL_COT",
            ConditionKind::ProbAnchor => "PROB_ANCHOR",
            ConditionKind::EntropyAnchor => "ENTROPY_ANCHOR",
            ConditionKind::Copy => "COPY",
        }
    }

    fn needs_own_cot(&self) -> bool {
        matches!(self, ConditionKind::RealCot | ConditionKind::ProbAnchor)
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = ZoneError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        ConditionKind::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| ZoneError::UnknownCondition(s.to_string()))
    }
}

/// Case-insensitive closed-class word inventory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionWords {
    words: HashSet<String>,
}

const BUILTIN: &str = include_str!("../../assets/function_words.txt");

impl FunctionWords {
    /// One word per line; blank lines and `#` comments ignored.
    pub fn parse(text: &str) -> Self {
        let words = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect();
        Self { words }
    }

    pub fn from_words<I: IntoIterator<Item = S>, S: AsRef<str>>(words: I) -> Self {
        Self {
            words: words
                .into_iter()
                .map(|w| w.as_ref().to_lowercase())
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ZoneError> {
        std::fs::read_to_string(path)
            .map(|t| Self::parse(&t))
            .map_err(|e| ZoneError::Io(format!("{}: {e}", path.display())))
    }

    /// The shipped English inventory.
    pub fn builtin() -> &'static FunctionWords {
        static FW: OnceLock<FunctionWords> = OnceLock::new();
        FW.get_or_init(|| Self::parse(BUILTIN))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(&word.to_lowercase())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub const MASK: &str = "____";

/// Replaces every non-function word with [`MASK`], keeping whitespace,
/// punctuation and the retained words' original case.
pub fn mask_content_words(text: &str, fw: &FunctionWords) -> String {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while !rest.is_empty() {
        let ws = rest.len() - rest.trim_start().len();
        out.push_str(&rest[..ws]);
        rest = &rest[ws..];
        let end = rest.find(char::is_whitespace).unwrap_or(rest.len());
        let word = &rest[..end];
        let (lead, core, trail) = split_affixes(word);
        if core.is_empty() || fw.contains(core) {
            out.push_str(word);
        } else {
            out.push_str(lead);
            out.push_str(MASK);
            out.push_str(trail);
        }
        rest = &rest[end..];
    }
    out
}

/// Trace text for one reference condition.
pub fn build_condition(
    kind: ConditionKind,
    own_cot: Option<&str>,
    answer: Option<&str>,
    function_words: &FunctionWords,
) -> Result<String, ZoneError> {
    let missing = |what: &'static str| ZoneError::MissingInput { kind, what };
    if kind.needs_own_cot() && own_cot.is_none() {
        return Err(missing("own_cot"));
    }
    if kind != ConditionKind::RealCot && answer.is_none() {
        return Err(missing("answer"));
    }
    Ok(match kind {
        ConditionKind::RealCot => own_cot.unwrap().to_string(),
        ConditionKind::ProbAnchor => format!("{}\n\n{}", own_cot.unwrap(), answer.unwrap()),
        ConditionKind::EntropyAnchor => mask_content_words(answer.unwrap(), function_words),
        ConditionKind::Copy => answer.unwrap().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn documented_examples() {
        let fw = FunctionWords::from_words(["the", "on"]);
        assert_eq!(
            build_condition(
                ConditionKind::EntropyAnchor,
                None,
                Some("The cat sat on the mat"),
                &fw
            )
            .unwrap(),
            "The ____ ____ on the ____"
        );
        assert_eq!(
            build_condition(
                ConditionKind::ProbAnchor,
                Some("step one"),
                Some("final"),
                &fw
            )
            .unwrap(),
            "step one\n\nfinal"
        );
        let answer = "  Exact \t bytes, kept.\n";
        assert_eq!(
            build_condition(ConditionKind::Copy, None, Some(answer), &fw).unwrap(),
            answer
        );
        assert_eq!(
            build_condition(ConditionKind::RealCot, Some("mine"), None, &fw).unwrap(),
            "mine"
        );
    }

    #[test]
    fn punctuation_and_layout_survive_masking() {
        let fw = FunctionWords::builtin();
        assert_eq!(
            mask_content_words("Is it (really) true?\n\nYes, \"it\" is.", fw),
            "Is it (____) ____?\n\n____, \"it\" is."
        );
        assert_eq!(mask_content_words("-- ...", fw), "-- ...");
    }

    #[test]
    fn missing_inputs() {
        let fw = FunctionWords::builtin();
        assert!(matches!(
            build_condition(ConditionKind::ProbAnchor, None, Some("a"), fw),
            Err(ZoneError::MissingInput {
                what: "own_cot",
                ..
            })
        ));
        assert!(matches!(
            build_condition(ConditionKind::Copy, Some("c"), None, fw),
            Err(ZoneError::MissingInput { what: "answer", .. })
        ));
    }

    #[test]
    fn builtin_inventory_covers_categories() {
        let fw = FunctionWords::builtin();
        for w in ["the", "of", "and", "they", "would", "not", "THE", "don't"] {
            assert!(fw.contains(w), "{w}");
        }
        assert!(!fw.contains("whale"));
    }

    #[test]
    fn names_round_trip() {
        for k in ConditionKind::ALL {
            assert_eq!(k.as_str().parse::<ConditionKind>().unwrap(), k);
            assert_eq!(serde_json::to_string(&k).unwrap(), format!("\"{k}\""));
        }
        assert!("COT".parse::<ConditionKind>().is_err());
    }

    proptest! {
        #[test]
        fn masking_preserves_word_count(text in "[A-Za-z ,.!]{0,60}") {
            let fw = FunctionWords::builtin();
            let masked = mask_content_words(&text, fw);
            prop_assert_eq!(masked.split_whitespace().count(), text.split_whitespace().count());
            prop_assert_eq!(mask_content_words(&masked, fw), masked.clone());
        }
    }
}
