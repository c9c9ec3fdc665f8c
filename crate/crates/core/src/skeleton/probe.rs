//! Answer-leakage probe for skeleton summaries.
//!
//! For step `i` with tag `f_i` and summary `c_i`, the leak is
//! `ln P(c_i | Q, f_i, A) - ln P(c_i | Q, f_i)` in nats. This is a
//! pointwise log-ratio of the realized summary, a cheap stand-in for the
//! KL divergence between summary distributions, not an estimate of it.

use serde::{Deserialize, Serialize};

use super::{FunctionalTag, Skeleton, SkeletonError};
use crate::backend::prompts::{asset, fill};
use crate::backend::{BackendError, BackendHandle, ChatMessage, ContextKind, ScoringContext};
use crate::trace::QAPair;

pub const PROBE_LABEL: &str = "pointwise log-ratio proxy (not a KL estimate)";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLeak {
    pub index: usize,
    pub tag: FunctionalTag,
    pub lp_with_answer: f64,
    pub lp_without_answer: f64,
    /// Nats.
    pub leak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub leaks: Vec<StepLeak>,
    pub mean: Option<f64>,
    pub label: String,
}

impl ProbeReport {
    /// Largest per-step leak.
    pub fn epsilon_hat(&self) -> Result<f64, SkeletonError> {
        self.leaks
            .iter()
            .map(|l| l.leak)
            .reduce(f64::max)
            .ok_or(SkeletonError::UndefinedEpsilon)
    }
}

pub fn probe_contexts(
    pair: &QAPair,
    step: usize,
    tag: FunctionalTag,
) -> Result<[ScoringContext; 2], BackendError> {
    let system = ChatMessage::system(asset("probe_preamble")?.text);
    let tag = tag.as_str();
    let with = fill(
        asset("probe_user_with_answer")?.text,
        &[
            ("query", &pair.query),
            ("answer", &pair.answer),
            ("tag", tag),
        ],
    )?;
    let without = fill(
        asset("probe_user_without_answer")?.text,
        &[("query", &pair.query), ("tag", tag)],
    )?;
    Ok([
        ScoringContext {
            kind: ContextKind::ProbeWithAnswer { step },
            messages: vec![system.clone(), ChatMessage::user(with)],
        },
        ScoringContext {
            kind: ContextKind::ProbeWithoutAnswer { step },
            messages: vec![system, ChatMessage::user(without)],
        },
    ])
}

pub fn invariance_probe(
    handle: &BackendHandle,
    skeleton: &Skeleton,
    pair: &QAPair,
) -> Result<ProbeReport, BackendError> {
    if !handle.capabilities().score {
        return Err(BackendError::ScoringUnsupported);
    }
    let mut jobs = Vec::with_capacity(skeleton.len() * 2);
    for step in skeleton.steps() {
        for ctx in probe_contexts(pair, step.index, step.tag)? {
            jobs.push((ctx, step.summary.as_str()));
        }
    }
    let scores = handle.map_ordered(&jobs, |(ctx, target)| handle.score_target(ctx, target));
    let mut scores = scores.into_iter();
    let mut leaks = Vec::with_capacity(skeleton.len());
    for step in skeleton.steps() {
        let with = scores.next().expect("paired score")?;
        let without = scores.next().expect("paired score")?;
        leaks.push(StepLeak {
            index: step.index,
            tag: step.tag,
            lp_with_answer: with.logprob_sum,
            lp_without_answer: without.logprob_sum,
            leak: with.logprob_sum - without.logprob_sum,
        });
    }
    let mean =
        (!leaks.is_empty()).then(|| leaks.iter().map(|l| l.leak).sum::<f64>() / leaks.len() as f64);
    Ok(ProbeReport {
        leaks,
        mean,
        label: PROBE_LABEL.to_string(),
    })
}
