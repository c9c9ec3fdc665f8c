//! Versioned prompt assets and their instantiation.
//!
//! Every template is compiled in and pinned by SHA-256; [`verify_assets`]
//! fails if a file under `assets/prompts` drifts from its pinned digest.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BackendError, ChatMessage};
use crate::trace::{Method, QAPair};

pub const ASSET_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptAsset {
    pub id: &'static str,
    pub text: &'static str,
    pub sha256: &'static str,
}

macro_rules! asset {
    ($id:literal, $sha:literal) => {
        PromptAsset {
            id: $id,
            text: include_str!(concat!("../../assets/prompts/", $id, ".txt")),
            sha256: $sha,
        }
    };
}

pub const ASSETS: &[PromptAsset] = &[
    asset!(
        "neu",
        "2de7488c3a7fca2dd66a13b6515cb4a8aaa03ee8b24a5f1b7bbb9495ed2928ff"
    ),
    asset!(
        "sup",
        "068a7aa12d791ca58a5022c609855074fc14ed8b2f6f93fcc1cfdbefc5661379"
    ),
    asset!(
        "augsup",
        "41c501346241cd5a9f3d106ea1f688fe384782b0415828d10772c261ac439f51"
    ),
    asset!(
        "ssr",
        "95af46d1da0a9430884c8fc7604c5f692061b29b055e2cf7d81dc908e260fbfa"
    ),
    asset!(
        "ss_gen",
        "5b55aec48c9d03d8a97c6f34a3023b1197dc05414b867ba194ac2bfd1b121e31"
    ),
    asset!(
        "judge",
        "7d3f68fb115ea3693c03aa6cf74dc654f81c9955aa7f49214d7278a0e8705e06"
    ),
    asset!(
        "judge_reask",
        "e2a1f205b3acb0c74fd4853bd03b0e1df118c3ec89c313a1a7bbafd4787a22c6"
    ),
    asset!(
        "probe_preamble",
        "aba2f8164232066db089c1c005f266b82cf68a8dc2b12d503c7f52cc46ef69ee"
    ),
    asset!(
        "probe_user_with_answer",
        "a54fb3a2ffa984be66c52b4f4af121d41854bd7ff428247c3ca070d6ff43d681"
    ),
    asset!(
        "probe_user_without_answer",
        "e8527a443bc8dd0f8a182bfda1849616894bae4d0aefc140803a23b37f87f772"
    ),
    asset!(
        "scoring_preamble",
        "08671b9d3fef720a5447202ba05cfe6f3f43d51744c39c0bc965c892a3cf434a"
    ),
    asset!(
        "ssr_reason",
        "592f9be25b586796b5c0e24212313a677676ce8879335b5de9e8bdb664d6be6d"
    ),
    asset!(
        "ssr_skeleton",
        "9b4da0b4a751370b6c6a4d3e1a83d0455f088f2a90c0aedd02b82e6f3e749e72"
    ),
    asset!(
        "synthesize",
        "6fad7aee687ab39170a98d5144232b7d26a8ab2a3a65a306968d25d2be616510"
    ),
    asset!(
        "user_qa",
        "8161606c4f5cfc26d13b5ee46e78d741a8539e74c53abcca36f7f806c45b50a6"
    ),
    asset!(
        "user_ssr",
        "e57fa398c8d55140912ef8e4c9ab816dcaf6dd6c235a38c3875c201a4c7b38d8"
    ),
];

/// Looks up a compiled-in template by id.
pub fn asset(id: &str) -> Result<&'static PromptAsset, BackendError> {
    ASSETS
        .iter()
        .find(|a| a.id == id)
        .ok_or_else(|| BackendError::Template(format!("unknown template `{id}`")))
}

pub fn sha256_hex(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Ids of assets whose content does not match the pinned digest.
pub fn verify_assets() -> Result<(), Vec<&'static str>> {
    let bad: Vec<_> = ASSETS
        .iter()
        .filter(|a| sha256_hex(a.text) != a.sha256)
        .map(|a| a.id)
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(bad)
    }
}

fn placeholder_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([a-z_]+)\}").unwrap())
}

/// Substitutes `{name}` placeholders in one pass. Every placeholder in the
/// template must be bound; substituted values are not rescanned.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> Result<String, BackendError> {
    let mut out = String::with_capacity(template.len());
    let mut last = 0;
    for cap in placeholder_re().captures_iter(template) {
        let whole = cap.get(0).unwrap();
        let name = &cap[1];
        let value = vars
            .iter()
            .find(|(k, _)| *k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| BackendError::Template(format!("unfilled placeholder {{{name}}}")))?;
        out.push_str(&template[last..whole.start()]);
        out.push_str(value);
        last = whole.end();
    }
    out.push_str(&template[last..]);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PromptMethod {
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "SUP")]
    Sup,
    #[serde(rename = "AUG_SUP")]
    AugSup,
    #[serde(rename = "SSR")]
    Ssr,
    #[serde(rename = "SS_GEN")]
    SsGen,
}

impl PromptMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            PromptMethod::Neu => "NEU",
            PromptMethod::Sup => "SUP",
            PromptMethod::AugSup => "AUG_SUP",
            PromptMethod::Ssr => "SSR",
            PromptMethod::SsGen => "SS_GEN",
        }
    }

    fn asset_id(&self) -> &'static str {
        match self {
            PromptMethod::Neu => "neu",
            PromptMethod::Sup => "sup",
            PromptMethod::AugSup => "augsup",
            PromptMethod::Ssr => "ssr",
            PromptMethod::SsGen => "ss_gen",
        }
    }
}

impl fmt::Display for PromptMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMethod {
    type Err = BackendError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "NEU" => Ok(PromptMethod::Neu),
            "SUP" => Ok(PromptMethod::Sup),
            "AUG_SUP" | "AUGSUP" => Ok(PromptMethod::AugSup),
            "SSR" => Ok(PromptMethod::Ssr),
            "SS_GEN" | "SSGEN" => Ok(PromptMethod::SsGen),
            _ => Err(BackendError::Template(format!(
                "unknown prompt method `{s}`"
            ))),
        }
    }
}

impl TryFrom<Method> for PromptMethod {
    type Error = BackendError;
    fn try_from(m: Method) -> Result<Self, Self::Error> {
        match m {
            Method::Neu => Ok(PromptMethod::Neu),
            Method::Sup => Ok(PromptMethod::Sup),
            Method::AugSup => Ok(PromptMethod::AugSup),
            Method::Ssr => Ok(PromptMethod::Ssr),
            Method::Condition(c) => Err(BackendError::Template(format!(
                "condition {c} is constructed, not prompted"
            ))),
        }
    }
}

/// System prompt plus one user turn carrying the pair.
///
/// For `SS_GEN` the answer is the input text to segment and the language
/// defaults to English; use [`render_ss_gen`] to choose it.
pub fn render_prompt(
    method: PromptMethod,
    pair: &QAPair,
) -> Result<Vec<ChatMessage>, BackendError> {
    if method == PromptMethod::SsGen {
        return render_ss_gen(&pair.answer, "English");
    }
    let system = asset(method.asset_id())?.text.to_string();
    let user_template = if method == PromptMethod::Ssr {
        "user_ssr"
    } else {
        "user_qa"
    };
    let user = fill(
        asset(user_template)?.text,
        &[("query", &pair.query), ("answer", &pair.answer)],
    )?;
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}

pub fn render_ss_gen(input_text: &str, lang: &str) -> Result<Vec<ChatMessage>, BackendError> {
    let text = fill(
        asset("ss_gen")?.text,
        &[("lang", lang), ("input_text", input_text)],
    )?;
    Ok(vec![ChatMessage::user(text)])
}

/// First phase of two-call SSR: skeleton only.
pub fn render_ssr_skeleton_phase(pair: &QAPair) -> Result<Vec<ChatMessage>, BackendError> {
    let user = fill(
        asset("user_ssr")?.text,
        &[("query", &pair.query), ("answer", &pair.answer)],
    )?;
    Ok(vec![
        ChatMessage::system(asset("ssr_skeleton")?.text),
        ChatMessage::user(user),
    ])
}

/// Second phase of two-call SSR: reasoning following a fixed skeleton.
pub fn render_ssr_reason_phase(
    pair: &QAPair,
    skeleton: &str,
) -> Result<Vec<ChatMessage>, BackendError> {
    let system = fill(asset("ssr_reason")?.text, &[("skeleton", skeleton)])?;
    let user = fill(
        asset("user_ssr")?.text,
        &[("query", &pair.query), ("answer", &pair.answer)],
    )?;
    Ok(vec![ChatMessage::system(system), ChatMessage::user(user)])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> QAPair {
        QAPair::new("q1", "What is 2+2?", "4")
    }

    #[test]
    fn assets_match_pinned_digests() {
        assert_eq!(verify_assets(), Ok(()));
        assert!(ASSETS.iter().all(|a| !a.text.ends_with('\n')));
    }

    #[test]
    fn golden_markers() {
        let neu = render_prompt(PromptMethod::Neu, &pair()).unwrap();
        assert!(neu[0].content.contains("<|begin_of_solution|>"));
        let sup = render_prompt(PromptMethod::Sup, &pair()).unwrap();
        assert_eq!(
            sup[0]
                .content
                .matches("**DO NOT** explicitly output or hint")
                .count(),
            3
        );
        let ssr = render_prompt(PromptMethod::Ssr, &pair()).unwrap();
        assert!(ssr[0]
            .content
            .contains("single-sentence summary under 20 words"));
        assert!(ssr[0]
            .content
            .contains("DO NOT output anything outside the required"));
        assert_eq!(
            ssr[1].content,
            "### Dialogue\n\nUser:\nWhat is 2+2?\n\n### Final Assistant Turn\n\n4"
        );
        let aug = render_prompt(PromptMethod::AugSup, &pair()).unwrap();
        assert_eq!(aug[1].content, "Question:\nWhat is 2+2?\n\nSolution:\n4");
    }

    #[test]
    fn system_text_is_byte_exact() {
        for m in [
            PromptMethod::Neu,
            PromptMethod::Sup,
            PromptMethod::AugSup,
            PromptMethod::Ssr,
        ] {
            let msgs = render_prompt(m, &pair()).unwrap();
            assert_eq!(msgs[0].content, asset(m.asset_id()).unwrap().text);
        }
    }

    #[test]
    fn ss_gen_substitutes_input() {
        let msgs = render_ss_gen("trace body {query}", "French").unwrap();
        assert_eq!(msgs.len(), 1);
        assert!(msgs[0].content.contains("Output in language: French."));
        // Substituted text is not rescanned.
        assert!(msgs[0].content.contains("trace body {query}"));
        assert!(!msgs[0].content.contains("{input_text}"));
    }

    #[test]
    fn unfilled_placeholder_errors() {
        assert!(fill("a {x} b", &[]).is_err());
        assert_eq!(fill("a {x} {y b", &[("x", "1")]).unwrap(), "a 1 {y b");
        assert!("ZZZ".parse::<PromptMethod>().is_err());
        assert_eq!(
            "aug-sup".parse::<PromptMethod>().unwrap(),
            PromptMethod::AugSup
        );
    }
}
