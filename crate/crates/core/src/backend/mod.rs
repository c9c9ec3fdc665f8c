//! Inference access.
//!
//! A [`Backend`] generates completions with per-token scores and scores
//! fixed targets under a context (teacher forcing). Three implementations
//! ship: an OpenAI-compatible HTTP client, an offline replay store, and a
//! toy backend over exact probability tables. [`BackendHandle`] adds the
//! retry policy and a bounded worker pool on top of any of them.

pub mod entropy;
pub mod http;
pub mod prompts;
pub mod refine;
pub mod replay;
pub mod toy;

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::TokenScore;

pub use entropy::estimate_entropy_topk;
pub use prompts::{render_prompt, PromptMethod};
pub use refine::{refine_answer, RefineConfig, RefineOutcome};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("http status {status}: {body}")]
    Http { status: u16, body: String },
    #[error("backend returned no logprobs; enable logprobs on the endpoint")]
    NeedsLogprobs,
    #[error("backend does not support teacher-forced scoring")]
    ScoringUnsupported,
    #[error("backend does not support generation")]
    GenerationUnsupported,
    #[error("no recorded call for key {0}")]
    ReplayMiss(String),
    #[error("tokenization failure: {0}")]
    Tokenization(String),
    #[error("unknown context class `{0}`")]
    UnknownContext(String),
    #[error("invalid response: {0}")]
    InvalidResponse(String),
    #[error("probability mass {0} exceeds 1")]
    ProbabilityMass(f64),
    #[error("template error: {0}")]
    Template(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted {
        attempts: u32,
        last: Box<BackendError>,
    },
}

impl BackendError {
    /// Transient failures worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) => true,
            BackendError::Http { status, .. } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    /// Hidden reasoning preceding the visible assistant reply.
    AssistantThinking,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(Role::System, content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new(Role::User, content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(Role::Assistant, content)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
    /// Alternatives requested per position for the entropy estimate.
    pub top_logprobs: u8,
}

impl Default for GenParams {
    fn default() -> Self {
        Self {
            temperature: 0.6,
            top_p: 0.95,
            max_tokens: 4096,
            seed: None,
            top_logprobs: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub tokens: Vec<TokenScore>,
}

/// Which of the fixed conditioning contexts a scoring request uses. The
/// toy backend keys its tables on this; text backends render `messages`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ContextKind {
    /// Query plus reasoning, answer scored as the reply.
    WithTrace,
    /// Query only, answer scored as the reply.
    WithoutTrace,
    /// Query only, trace scored as hidden reasoning (entropy recovery).
    TraceForcing,
    /// Skeleton step summary given query, tag and answer.
    ProbeWithAnswer { step: usize },
    /// Skeleton step summary given query and tag.
    ProbeWithoutAnswer { step: usize },
}

impl ContextKind {
    /// Symbolic class name, most specific first, used by table backends.
    pub fn class_names(&self) -> Vec<String> {
        match self {
            ContextKind::WithTrace => vec!["with-trace".into()],
            ContextKind::WithoutTrace => vec!["without-trace".into()],
            ContextKind::TraceForcing => vec!["trace".into()],
            ContextKind::ProbeWithAnswer { step } => {
                vec![
                    format!("probe-step-{step}-with-answer"),
                    "probe-with-answer".into(),
                ]
            }
            ContextKind::ProbeWithoutAnswer { step } => {
                vec![
                    format!("probe-step-{step}-without-answer"),
                    "probe-without-answer".into(),
                ]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoringContext {
    pub kind: ContextKind,
    pub messages: Vec<ChatMessage>,
}

/// Teacher-forced log-probability of a target continuation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetScore {
    /// Sum of token log-probabilities, nats.
    pub logprob_sum: f64,
    pub token_count: usize,
}

impl TargetScore {
    pub fn from_tokens(tokens: &[TokenScore]) -> Self {
        Self {
            logprob_sum: tokens.iter().map(|t| t.logprob).sum(),
            token_count: tokens.len(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub generate: bool,
    pub score: bool,
    /// Entropies come from full distributions rather than top-k estimates.
    pub entropy_exact: bool,
}

pub trait Backend: Send + Sync {
    /// Stable description recorded in output metadata (e.g. `http:model@host`).
    fn identity(&self) -> String;
    fn capabilities(&self) -> Capabilities;
    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError>;
    /// Per-token scores of `target` continuing `context`. Offsets are
    /// relative to `target`.
    fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackendMode {
    Http,
    OfflineReplay,
    ToyOracle,
}

impl fmt::Display for BackendMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackendMode::Http => "http",
            BackendMode::OfflineReplay => "replay",
            BackendMode::ToyOracle => "toy",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(8),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            ..Self::default()
        }
    }

    /// Exponential backoff with multiplicative jitter in [0.5, 1.5).
    fn delay(&self, attempt: u32) -> Duration {
        let exp = self
            .base_delay
            .saturating_mul(1u32 << (attempt - 1).min(16));
        let capped = exp.min(self.max_delay);
        capped.mul_f64(rand::rng().random_range(0.5..1.5))
    }
}

/// Counting semaphore bounding in-flight backend calls across threads,
/// including nested fan-outs that share one handle.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().expect("permits poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("permits poisoned");
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("permits poisoned") += 1;
        self.0.cv.notify_one();
    }
}

/// A backend plus the concurrency and retry policy callers share.
#[derive(Clone)]
pub struct BackendHandle {
    inner: Arc<dyn Backend>,
    pub mode: BackendMode,
    parallelism: usize,
    pub retry: RetryPolicy,
    permits: Arc<Permits>,
}

impl fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendHandle")
            .field("identity", &self.inner.identity())
            .field("mode", &self.mode)
            .field("parallelism", &self.parallelism)
            .field("retry", &self.retry)
            .finish()
    }
}

impl BackendHandle {
    pub fn new(inner: Arc<dyn Backend>, mode: BackendMode) -> Self {
        Self {
            inner,
            mode,
            parallelism: 4,
            retry: RetryPolicy::default(),
            permits: Arc::new(Permits::new(4)),
        }
    }

    pub fn with_parallelism(mut self, n: usize) -> Self {
        self.parallelism = n.max(1);
        self.permits = Arc::new(Permits::new(self.parallelism));
        self
    }

    pub fn parallelism(&self) -> usize {
        self.parallelism
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn identity(&self) -> String {
        self.inner.identity()
    }

    pub fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.inner
    }

    fn with_retries<T>(
        &self,
        mut call: impl FnMut() -> Result<T, BackendError>,
    ) -> Result<T, BackendError> {
        let attempts = self.retry.max_attempts.max(1);
        let mut attempt = 1;
        loop {
            let outcome = {
                let _permit = self.permits.acquire();
                call()
            };
            match outcome {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    thread::sleep(self.retry.delay(attempt));
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && attempts > 1 => {
                    return Err(BackendError::RetriesExhausted {
                        attempts,
                        last: Box::new(e),
                    })
                }
                Err(e) => return Err(e),
            }
        }
    }

    pub fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError> {
        if !self.capabilities().generate {
            return Err(BackendError::GenerationUnsupported);
        }
        self.with_retries(|| self.inner.generate(messages, params))
    }

    pub fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        if !self.capabilities().score {
            return Err(BackendError::ScoringUnsupported);
        }
        self.with_retries(|| self.inner.score_tokens(context, target))
    }

    pub fn score_target(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<TargetScore, BackendError> {
        self.score_tokens(context, target)
            .map(|tokens| TargetScore::from_tokens(&tokens))
    }

    /// Applies `f` to every item on at most `parallelism` worker threads and
    /// returns results in input order.
    pub fn map_ordered<T, R, F>(&self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync,
    {
        let workers = self.parallelism.max(1).min(items.len());
        if workers <= 1 {
            return items.iter().map(f).collect();
        }
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= items.len() {
                        break;
                    }
                    let r = f(&items[i]);
                    slots.lock().expect("result slots poisoned")[i] = Some(r);
                });
            }
        });
        slots
            .into_inner()
            .expect("result slots poisoned")
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect()
    }

    pub fn generate_batch(
        &self,
        requests: &[(Vec<ChatMessage>, GenParams)],
    ) -> Vec<Result<Generation, BackendError>> {
        self.map_ordered(requests, |(m, p)| self.generate(m, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    /// Sleeps a pseudo-random time per call and tracks peak concurrency.
    struct SlowBackend {
        in_flight: AtomicUsize,
        peak: AtomicUsize,
    }

    impl Backend for SlowBackend {
        fn identity(&self) -> String {
            "slow".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                generate: true,
                score: false,
                entropy_exact: false,
            }
        }
        fn generate(
            &self,
            messages: &[ChatMessage],
            _: &GenParams,
        ) -> Result<Generation, BackendError> {
            let now = self.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
            self.peak.fetch_max(now, Ordering::SeqCst);
            let n: u64 = messages[0].content.parse().unwrap();
            thread::sleep(Duration::from_millis(5 + (n * 7919) % 13));
            self.in_flight.fetch_sub(1, Ordering::SeqCst);
            Ok(Generation {
                text: messages[0].content.clone(),
                tokens: vec![],
            })
        }
        fn score_tokens(
            &self,
            _: &ScoringContext,
            _: &str,
        ) -> Result<Vec<TokenScore>, BackendError> {
            Err(BackendError::ScoringUnsupported)
        }
    }

    #[test]
    fn batch_is_ordered_and_bounded() {
        let backend = Arc::new(SlowBackend {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let handle = BackendHandle::new(backend.clone(), BackendMode::Http).with_parallelism(2);
        let reqs: Vec<_> = (0..8)
            .map(|i| (vec![ChatMessage::user(i.to_string())], GenParams::default()))
            .collect();
        let out = handle.generate_batch(&reqs);
        let texts: Vec<_> = out.into_iter().map(|g| g.unwrap().text).collect();
        assert_eq!(texts, (0..8).map(|i| i.to_string()).collect::<Vec<_>>());
        assert!(backend.peak.load(Ordering::SeqCst) <= 2);
        assert!(matches!(
            handle.score_target(
                &ScoringContext {
                    kind: ContextKind::WithTrace,
                    messages: vec![]
                },
                "x"
            ),
            Err(BackendError::ScoringUnsupported)
        ));
    }

    #[test]
    fn nested_fan_out_stays_bounded() {
        let backend = Arc::new(SlowBackend {
            in_flight: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let handle = BackendHandle::new(backend.clone(), BackendMode::Http).with_parallelism(3);
        let outer: Vec<usize> = (0..6).collect();
        let out = handle.map_ordered(&outer, |i| {
            let reqs: Vec<_> = (0..4)
                .map(|j| {
                    (
                        vec![ChatMessage::user((i * 4 + j).to_string())],
                        GenParams::default(),
                    )
                })
                .collect();
            handle.generate_batch(&reqs).len()
        });
        assert_eq!(out, vec![4; 6]);
        assert!(backend.peak.load(Ordering::SeqCst) <= 3);
    }

    struct Flaky {
        calls: AtomicU32,
        fail_first: u32,
        status: u16,
    }

    impl Backend for Flaky {
        fn identity(&self) -> String {
            "flaky".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                generate: true,
                score: true,
                entropy_exact: false,
            }
        }
        fn generate(&self, _: &[ChatMessage], _: &GenParams) -> Result<Generation, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n < self.fail_first {
                Err(BackendError::Http {
                    status: self.status,
                    body: String::new(),
                })
            } else {
                Ok(Generation {
                    text: "ok".into(),
                    tokens: vec![],
                })
            }
        }
        fn score_tokens(
            &self,
            _: &ScoringContext,
            _: &str,
        ) -> Result<Vec<TokenScore>, BackendError> {
            Ok(vec![])
        }
    }

    fn fast_retry(n: u32) -> RetryPolicy {
        RetryPolicy {
            max_attempts: n,
            base_delay: Duration::from_millis(1),
            max_delay: Duration::from_millis(2),
        }
    }

    #[test]
    fn retries_transient_failures_within_policy() {
        let b = Arc::new(Flaky {
            calls: AtomicU32::new(0),
            fail_first: 2,
            status: 503,
        });
        let h = BackendHandle::new(b.clone(), BackendMode::Http).with_retry(fast_retry(3));
        assert!(h.generate(&[], &GenParams::default()).is_ok());
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);

        let b = Arc::new(Flaky {
            calls: AtomicU32::new(0),
            fail_first: 10,
            status: 500,
        });
        let h = BackendHandle::new(b.clone(), BackendMode::Http).with_retry(fast_retry(3));
        assert!(matches!(
            h.generate(&[], &GenParams::default()),
            Err(BackendError::RetriesExhausted { attempts: 3, .. })
        ));
        assert_eq!(b.calls.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let b = Arc::new(Flaky {
            calls: AtomicU32::new(0),
            fail_first: 10,
            status: 400,
        });
        let h = BackendHandle::new(b.clone(), BackendMode::Http).with_retry(fast_retry(3));
        assert!(matches!(
            h.generate(&[], &GenParams::default()),
            Err(BackendError::Http { status: 400, .. })
        ));
        assert_eq!(b.calls.load(Ordering::SeqCst), 1);
    }
}
