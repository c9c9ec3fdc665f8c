//! Probabilistic anchoring: how many bits per answer token the trace
//! contributes to the answer's likelihood.
//!
//! `A_prob = (ln P(A | Q, R) - ln P(A | Q)) / (n * ln 2)`, where `n` is
//! the scoring backend's token count of `A`. Negative values mean the
//! trace makes the answer less likely and are kept as is.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::prompts::asset;
use crate::backend::{BackendError, BackendHandle, ChatMessage, ContextKind, Role, ScoringContext};
use crate::trace::QAPair;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PmiError {
    #[error("backend does not support teacher-forced scoring")]
    ScoringUnsupported,
    #[error("answer tokenized to {with} tokens with the trace but {without} without it")]
    TokenCountMismatch { with: usize, without: usize },
    #[error("answer has no tokens")]
    EmptyAnswer,
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PmiResult {
    /// `ln P(A | Q, R)`, nats.
    pub lp_with: f64,
    /// `ln P(A | Q)`, nats.
    pub lp_without: f64,
    pub answer_tokens: usize,
    /// Bits per answer token.
    pub a_prob: f64,
}

impl PmiResult {
    pub fn new(lp_with: f64, lp_without: f64, answer_tokens: usize) -> Result<Self, PmiError> {
        if answer_tokens == 0 {
            return Err(PmiError::EmptyAnswer);
        }
        Ok(Self {
            lp_with,
            lp_without,
            answer_tokens,
            a_prob: (lp_with - lp_without) / (answer_tokens as f64 * std::f64::consts::LN_2),
        })
    }
}

fn base_messages(pair: &QAPair) -> Result<Vec<ChatMessage>, BackendError> {
    Ok(vec![
        ChatMessage::system(asset("scoring_preamble")?.text),
        ChatMessage::user(pair.query.clone()),
    ])
}

/// With-trace context: preamble, query, then the trace as hidden reasoning.
pub fn with_trace_context(pair: &QAPair, trace_text: &str) -> Result<ScoringContext, BackendError> {
    let mut messages = base_messages(pair)?;
    messages.push(ChatMessage::new(Role::AssistantThinking, trace_text));
    Ok(ScoringContext {
        kind: ContextKind::WithTrace,
        messages,
    })
}

/// Without-trace context: identical apart from the missing reasoning turn.
pub fn without_trace_context(pair: &QAPair) -> Result<ScoringContext, BackendError> {
    Ok(ScoringContext {
        kind: ContextKind::WithoutTrace,
        messages: base_messages(pair)?,
    })
}

/// Context for recovering per-token entropies of a trace by teacher forcing.
pub fn trace_forcing_context(pair: &QAPair) -> Result<ScoringContext, BackendError> {
    Ok(ScoringContext {
        kind: ContextKind::TraceForcing,
        messages: base_messages(pair)?,
    })
}

pub fn probabilistic_anchoring(
    handle: &BackendHandle,
    pair: &QAPair,
    trace_text: &str,
) -> Result<PmiResult, PmiError> {
    if !handle.capabilities().score {
        return Err(PmiError::ScoringUnsupported);
    }
    let contexts = [
        with_trace_context(pair, trace_text)?,
        without_trace_context(pair)?,
    ];
    let mut scored = handle.map_ordered(&contexts, |ctx| handle.score_target(ctx, &pair.answer));
    let without = scored.pop().expect("two scorings")?;
    let with = scored.pop().expect("two scorings")?;
    if with.token_count != without.token_count {
        return Err(PmiError::TokenCountMismatch {
            with: with.token_count,
            without: without.token_count,
        });
    }
    PmiResult::new(with.logprob_sum, without.logprob_sum, with.token_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::toy::ToyBackend;
    use crate::backend::{Backend, BackendMode, Capabilities, GenParams, Generation};
    use crate::oracle::{exact_pmi, ToyModel};
    use crate::trace::TokenScore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;
    use std::sync::Arc;

    fn handle(model: ToyModel) -> BackendHandle {
        BackendHandle::new(Arc::new(ToyBackend::new(model, 0)), BackendMode::ToyOracle)
    }

    fn single(with: Vec<f64>, without: Vec<f64>) -> BackendHandle {
        let vocab = (0..with.len()).map(|i| format!("s{i}")).collect();
        handle(
            ToyModel::new(
                vocab,
                BTreeMap::from([
                    ("with-trace".into(), vec![with]),
                    ("without-trace".into(), vec![without]),
                ]),
            )
            .unwrap(),
        )
    }

    fn qa(answer: &str) -> QAPair {
        QAPair::new("p", "q", answer)
    }

    #[test]
    fn spot_values() {
        let h = single(vec![1.0, 0.0, 0.0, 0.0], vec![0.25; 4]);
        assert_eq!(
            probabilistic_anchoring(&h, &qa("s0"), "r").unwrap().a_prob,
            2.0
        );
        let h = single(vec![0.125, 0.875], vec![0.25, 0.75]);
        let r = probabilistic_anchoring(&h, &qa("s0"), "r").unwrap();
        assert!((r.a_prob + 1.0).abs() < 1e-12);
        assert_eq!(r.answer_tokens, 1);
        let h = single(vec![0.3, 0.7], vec![0.3, 0.7]);
        assert!(
            probabilistic_anchoring(&h, &qa("s1 s0"), "r")
                .unwrap()
                .a_prob
                .abs()
                < 1e-9
        );
    }

    #[test]
    fn identical_traces_identical_scores() {
        let h = single(vec![0.6, 0.4], vec![0.5, 0.5]);
        let a = probabilistic_anchoring(&h, &qa("s0 s1"), "same").unwrap();
        let b = probabilistic_anchoring(&h, &qa("s0 s1"), "same").unwrap();
        assert_eq!(a, b);
    }

    struct Mismatched;

    impl Backend for Mismatched {
        fn identity(&self) -> String {
            "mismatch".into()
        }
        fn capabilities(&self) -> Capabilities {
            Capabilities {
                generate: false,
                score: true,
                entropy_exact: false,
            }
        }
        fn generate(&self, _: &[ChatMessage], _: &GenParams) -> Result<Generation, BackendError> {
            Err(BackendError::GenerationUnsupported)
        }
        fn score_tokens(
            &self,
            ctx: &ScoringContext,
            _: &str,
        ) -> Result<Vec<TokenScore>, BackendError> {
            let n = if ctx.kind == ContextKind::WithTrace {
                2
            } else {
                3
            };
            Ok((0..n)
                .map(|i| TokenScore {
                    text: "x".into(),
                    logprob: -1.0,
                    entropy: 0.0,
                    byte_offset: i,
                    entropy_source: None,
                })
                .collect())
        }
    }

    #[test]
    fn token_count_mismatch_errors() {
        let h = BackendHandle::new(Arc::new(Mismatched), BackendMode::Http);
        assert_eq!(
            probabilistic_anchoring(&h, &qa("xyz"), "r"),
            Err(PmiError::TokenCountMismatch {
                with: 2,
                without: 3
            })
        );
    }

    #[test]
    fn additivity_of_independent_segments() {
        // Segment rates are token-weighted in the concatenation.
        let model = ToyModel::new(
            vec!["a".into(), "b".into()],
            BTreeMap::from([
                (
                    "with-trace".into(),
                    vec![vec![0.8, 0.2], vec![0.8, 0.2], vec![0.1, 0.9]],
                ),
                (
                    "without-trace".into(),
                    vec![vec![0.5, 0.5], vec![0.5, 0.5], vec![0.3, 0.7]],
                ),
            ]),
        )
        .unwrap();
        let h = handle(model.clone());
        let whole = probabilistic_anchoring(&h, &qa("a a b"), "r")
            .unwrap()
            .a_prob;
        let first = (0.8f64 / 0.5).log2();
        let second = (0.9f64 / 0.7).log2();
        assert!((whole - (2.0 * first + second) / 3.0).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn matches_exact_enumeration(seed in any::<u64>(), vocab in 1usize..=4, len in 1usize..=3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = ToyModel::random(&mut rng, vocab, len, &["with-trace", "without-trace"]);
            let symbols: Vec<String> = (0..len).map(|i| format!("s{}", (seed as usize + i * 7) % vocab)).collect();
            let refs: Vec<&str> = symbols.iter().map(String::as_str).collect();
            let want = exact_pmi(&model, &refs, "with-trace", "without-trace").unwrap();
            let got = probabilistic_anchoring(&handle(model), &qa(&symbols.join(" ")), "trace").unwrap();
            prop_assert!((got.a_prob - want).abs() < 1e-9);
        }
    }
}
