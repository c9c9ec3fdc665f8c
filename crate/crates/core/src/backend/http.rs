//! OpenAI-compatible HTTP backend.
//!
//! Generation uses `chat/completions` with `logprobs`/`top_logprobs`.
//! Teacher-forced scoring uses the legacy `completions` endpoint with
//! `echo: true`, which servers such as vLLM support: the context is
//! rendered to a single prompt string, the target appended, and the
//! echoed prompt logprobs that fall inside the target are kept.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::entropy::estimate_entropy_topk;
use super::{
    Backend, BackendError, Capabilities, ChatMessage, ContextKind, GenParams, Generation, Role,
    ScoringContext,
};
use crate::trace::{EntropySource, TokenScore};

pub const ENV_API_BASE: &str = "ANCHOR_API_BASE";
pub const ENV_API_KEY: &str = "ANCHOR_API_KEY";

/// How a scoring context becomes a single prompt string.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextRendering {
    /// `<|im_start|>role ... <|im_end|>` turns; hidden reasoning in `<think>`.
    #[default]
    ChatMl,
    /// Message contents joined by blank lines.
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    pub rendering: ContextRendering,
    /// Alternatives per position requested when scoring (legacy API caps at 5).
    pub score_top_logprobs: u8,
}

impl HttpConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            model: model.into(),
            timeout: Duration::from_secs(300),
            rendering: ContextRendering::default(),
            score_top_logprobs: 5,
        }
    }

    pub fn from_env(model: impl Into<String>) -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE)
            .map_err(|_| BackendError::Config(format!("{ENV_API_BASE} is not set")))?;
        let mut cfg = Self::new(base, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        Ok(cfg)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = format!("{}/{path}", self.config.base_url);
        let mut req = self
            .agent
            .post(&url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let mut resp = req
            .send(body.to_string())
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(BackendError::Http { status, body: text });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::InvalidResponse(e.to_string()))
    }
}

fn role_name(role: Role) -> &'static str {
    match role {
        Role::System => "system",
        Role::User => "user",
        Role::AssistantThinking | Role::Assistant => "assistant",
    }
}

fn chat_messages(messages: &[ChatMessage]) -> Vec<Value> {
    messages
        .iter()
        .map(|m| {
            let content = match m.role {
                Role::AssistantThinking => format!("<think>\n{}\n</think>", m.content),
                _ => m.content.clone(),
            };
            json!({ "role": role_name(m.role), "content": content })
        })
        .collect()
}

/// Prompt text preceding the scored target.
pub fn render_context(ctx: &ScoringContext, rendering: ContextRendering) -> String {
    let mut out = String::new();
    match rendering {
        ContextRendering::Raw => {
            for m in &ctx.messages {
                out.push_str(&m.content);
                out.push_str("\n\n");
            }
        }
        ContextRendering::ChatMl => {
            let mut thinking = None;
            for m in &ctx.messages {
                match m.role {
                    Role::AssistantThinking => thinking = Some(m.content.as_str()),
                    role => {
                        out.push_str(&format!(
                            "<|im_start|>{}\n{}<|im_end|>\n",
                            role_name(role),
                            m.content
                        ));
                    }
                }
            }
            out.push_str("<|im_start|>assistant\n");
            if let Some(r) = thinking {
                out.push_str(&format!("<think>\n{r}\n</think>\n\n"));
            } else if ctx.kind == ContextKind::TraceForcing {
                out.push_str("<think>\n");
            }
        }
    }
    out
}

#[derive(Deserialize)]
struct TopLogprob {
    token: String,
    logprob: f64,
}

#[derive(Deserialize)]
struct ChatTokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    bytes: Option<Vec<u8>>,
    #[serde(default)]
    top_logprobs: Vec<TopLogprob>,
}

struct RawPiece {
    bytes: Vec<u8>,
    logprob: f64,
    entropy: f64,
}

/// Joins raw pieces into tokens that start on character boundaries.
/// Pieces holding a partial UTF-8 sequence are folded into their
/// predecessor, summing log-probabilities.
fn assemble(pieces: Vec<RawPiece>) -> Result<Generation, BackendError> {
    let mut bytes = Vec::new();
    let mut starts = Vec::new();
    for p in &pieces {
        starts.push(bytes.len());
        bytes.extend_from_slice(&p.bytes);
    }
    let text = String::from_utf8(bytes.clone())
        .unwrap_or_else(|_| String::from_utf8_lossy(&bytes).into_owned());
    if text.len() != bytes.len() {
        return Err(BackendError::InvalidResponse(
            "token bytes are not valid UTF-8".into(),
        ));
    }
    let mut tokens: Vec<TokenScore> = Vec::new();
    for (p, start) in pieces.into_iter().zip(starts) {
        let opens_token = !p.bytes.is_empty() && text.is_char_boundary(start);
        match tokens.last_mut() {
            Some(prev) if !opens_token => prev.logprob += p.logprob,
            _ if !opens_token => {
                return Err(BackendError::InvalidResponse(
                    "first token is empty or partial".into(),
                ))
            }
            _ => tokens.push(TokenScore {
                text: String::new(),
                logprob: p.logprob,
                entropy: p.entropy,
                byte_offset: start,
                entropy_source: Some(EntropySource::Topk),
            }),
        }
    }
    for i in 0..tokens.len() {
        let end = tokens.get(i + 1).map_or(text.len(), |t| t.byte_offset);
        tokens[i].text = text[tokens[i].byte_offset..end].to_string();
    }
    Ok(Generation { text, tokens })
}

fn entropy_from(top: Vec<(String, f64)>, chosen: (&str, f64)) -> Result<f64, BackendError> {
    if top.is_empty() {
        estimate_entropy_topk(&[(chosen.0.to_string(), chosen.1)])
    } else {
        estimate_entropy_topk(&top)
    }
}

/// Parses a `chat/completions` response carrying token logprobs.
pub fn parse_chat_response(body: &Value) -> Result<Generation, BackendError> {
    let choice = body
        .pointer("/choices/0")
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    let content = match choice.pointer("/logprobs/content") {
        Some(Value::Array(items)) => items,
        _ => return Err(BackendError::NeedsLogprobs),
    };
    let mut pieces = Vec::with_capacity(content.len());
    for item in content {
        let t: ChatTokenLogprob = serde_json::from_value(item.clone())
            .map_err(|e| BackendError::InvalidResponse(e.to_string()))?;
        let top = t
            .top_logprobs
            .into_iter()
            .map(|a| (a.token, a.logprob))
            .collect();
        let entropy = entropy_from(top, (&t.token, t.logprob))?;
        pieces.push(RawPiece {
            bytes: t.bytes.unwrap_or_else(|| t.token.into_bytes()),
            logprob: t.logprob,
            entropy,
        });
    }
    let generation = assemble(pieces)?;
    if let Some(text) = choice.pointer("/message/content").and_then(Value::as_str) {
        if !text.is_empty() && generation.tokens.is_empty() {
            return Err(BackendError::NeedsLogprobs);
        }
    }
    Ok(generation)
}

#[derive(Deserialize)]
struct EchoLogprobs {
    tokens: Vec<String>,
    token_logprobs: Vec<Option<f64>>,
    #[serde(default)]
    top_logprobs: Option<Vec<Option<serde_json::Map<String, Value>>>>,
    text_offset: Vec<usize>,
}

/// Extracts target token scores from an echoed `completions` response.
/// `text_offset` values are character offsets into `prompt + target`.
pub fn parse_echo_response(
    body: &Value,
    prompt: &str,
    target: &str,
) -> Result<Vec<TokenScore>, BackendError> {
    let lp: EchoLogprobs = body
        .pointer("/choices/0/logprobs")
        .filter(|v| !v.is_null())
        .ok_or(BackendError::NeedsLogprobs)
        .and_then(|v| {
            serde_json::from_value(v.clone())
                .map_err(|e| BackendError::InvalidResponse(e.to_string()))
        })?;
    let prompt_chars = prompt.chars().count();
    let target_chars = target.chars().count();
    let mut char_to_byte: Vec<usize> = target.char_indices().map(|(b, _)| b).collect();
    char_to_byte.push(target.len());

    let mut out = Vec::new();
    for i in 0..lp.tokens.len() {
        let off = lp.text_offset.get(i).copied().unwrap_or(usize::MAX);
        if off < prompt_chars || off >= prompt_chars + target_chars {
            continue;
        }
        let logprob = lp.token_logprobs.get(i).copied().flatten().ok_or_else(|| {
            BackendError::InvalidResponse(format!("missing logprob for target token {i}"))
        })?;
        let top: Vec<(String, f64)> = lp
            .top_logprobs
            .as_ref()
            .and_then(|all| all.get(i).cloned().flatten())
            .map(|m| {
                m.into_iter()
                    .filter_map(|(k, v)| v.as_f64().map(|v| (k, v)))
                    .collect()
            })
            .unwrap_or_default();
        let entropy = entropy_from(top, (&lp.tokens[i], logprob))?;
        out.push(TokenScore {
            text: lp.tokens[i].clone(),
            logprob,
            entropy,
            byte_offset: char_to_byte[off - prompt_chars],
            entropy_source: Some(EntropySource::Topk),
        });
    }
    // The kept tokens must tile the target exactly.
    let mut rebuilt = String::new();
    for (i, t) in out.iter().enumerate() {
        let end = out.get(i + 1).map_or(target.len(), |n| n.byte_offset);
        rebuilt.push_str(&target[t.byte_offset..end]);
    }
    if out.is_empty() || out[0].byte_offset != 0 || rebuilt != target {
        return Err(BackendError::Tokenization(
            "target tokens straddle the context boundary".into(),
        ));
    }
    for i in 0..out.len() {
        let end = out.get(i + 1).map_or(target.len(), |n| n.byte_offset);
        out[i].text = target[out[i].byte_offset..end].to_string();
    }
    Ok(out)
}

impl Backend for HttpBackend {
    fn identity(&self) -> String {
        let rendering = match self.config.rendering {
            ContextRendering::ChatMl => "chatml",
            ContextRendering::Raw => "raw",
        };
        format!(
            "http:{}@{}#{rendering}",
            self.config.model, self.config.base_url
        )
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            score: true,
            entropy_exact: false,
        }
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": chat_messages(messages),
            "temperature": params.temperature,
            "top_p": params.top_p,
            "max_tokens": params.max_tokens,
            "logprobs": true,
            "top_logprobs": params.top_logprobs,
        });
        if let Some(seed) = params.seed {
            body["seed"] = json!(seed);
        }
        parse_chat_response(&self.post("chat/completions", &body)?)
    }

    fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        let prompt = render_context(context, self.config.rendering);
        let body = json!({
            "model": self.config.model,
            "prompt": format!("{prompt}{target}"),
            "max_tokens": 1,
            "temperature": 0.0,
            "echo": true,
            "logprobs": self.config.score_top_logprobs,
        });
        parse_echo_response(&self.post("completions", &body)?, &prompt, target)
    }
}
