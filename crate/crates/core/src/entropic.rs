//! Entropic anchoring from step-level information density.
//!
//! Each step's information density is the mean predictive entropy (nats) of
//! its tokens. The density vector is min-max normalized to `u`, and
//!
//! * global uniformity `G = 1 / (1 + Var(u) / tau_g)`,
//! * local non-uniformity `L = cv / (1 + cv)` with `cv = sigma / mu` of the
//!   absolute step-to-step changes of `u`,
//! * `A_ent = sqrt(G * L)`.
//!
//! All variances and standard deviations are population statistics.
//! Degenerate inputs never silently produce a number: each case is flagged.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{map_tokens_to_steps, segment_steps, StepStats, TraceError, TraceRecord};

#[derive(Debug, Error)]
pub enum EntropicError {
    #[error("record has no token entropies; generate or score it with logprobs enabled")]
    NeedsLogprobs,
    #[error("step has no tokens")]
    EmptyStep,
    #[error("trace has no non-empty steps")]
    NoSteps,
    #[error("non-finite or negative value in entropic input")]
    InvalidValue,
    #[error("tau_g must be a positive finite number, got {0}")]
    InvalidTau(f64),
    #[error(transparent)]
    Trace(#[from] TraceError),
}

/// Why an entropic score is missing or sits at a limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Degeneracy {
    /// All densities equal; the normalized vector is all zeros.
    Flat,
    /// Mean absolute change is zero; `L` is taken as its limit 0.
    SmoothLimit,
    /// Fewer than two steps; `A_ent` is absent.
    TooShort,
    /// Exactly two steps; `Var(u)` is pinned at 0.25.
    NearDegenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropicBreakdown {
    pub tau_g: f64,
    pub id_raw: Vec<f64>,
    pub id_norm: Vec<f64>,
    pub var_norm: f64,
    pub g_unif: f64,
    pub deltas: Vec<f64>,
    pub mu_delta: f64,
    pub sigma_delta: f64,
    pub l_nonunif: f64,
    pub a_ent: Option<f64>,
    pub flags: Vec<Degeneracy>,
}

impl EntropicBreakdown {
    pub fn is_flagged(&self, flag: Degeneracy) -> bool {
        self.flags.contains(&flag)
    }
}

/// Mean entropy (nats) of one step's tokens.
///
/// Computed as a mean shifted by the first value, so a step whose tokens
/// all share one entropy returns exactly that entropy.
pub fn step_information_density(entropies: &[f64]) -> Result<f64, EntropicError> {
    if entropies.is_empty() {
        return Err(EntropicError::EmptyStep);
    }
    if entropies.iter().any(|h| !h.is_finite() || *h < 0.0) {
        return Err(EntropicError::InvalidValue);
    }
    let x0 = entropies[0];
    let dev: f64 = entropies.iter().map(|h| h - x0).sum();
    Ok(x0 + dev / entropies.len() as f64)
}

/// Population mean and variance.
fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

pub fn entropic_breakdown(id_raw: &[f64], tau_g: f64) -> Result<EntropicBreakdown, EntropicError> {
    if !(tau_g.is_finite() && tau_g > 0.0) {
        return Err(EntropicError::InvalidTau(tau_g));
    }
    if id_raw.is_empty() {
        return Err(EntropicError::NoSteps);
    }
    if id_raw.iter().any(|x| !x.is_finite()) {
        return Err(EntropicError::InvalidValue);
    }
    let mut flags = Vec::new();

    let min = id_raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = id_raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    let id_norm: Vec<f64> = if range > 0.0 {
        id_raw
            .iter()
            .map(|x| ((x - min) / range).clamp(0.0, 1.0))
            .collect()
    } else {
        flags.push(Degeneracy::Flat);
        vec![0.0; id_raw.len()]
    };

    let (_, var_norm) = mean_var(&id_norm);
    let g_unif = 1.0 / (1.0 + var_norm / tau_g);

    if id_raw.len() < 2 {
        flags.push(Degeneracy::TooShort);
        return Ok(EntropicBreakdown {
            tau_g,
            id_raw: id_raw.to_vec(),
            id_norm,
            var_norm,
            g_unif,
            deltas: Vec::new(),
            mu_delta: 0.0,
            sigma_delta: 0.0,
            l_nonunif: 0.0,
            a_ent: None,
            flags,
        });
    }
    if id_raw.len() == 2 {
        flags.push(Degeneracy::NearDegenerate);
    }

    let deltas: Vec<f64> = id_norm.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    let (mu_delta, var_delta) = mean_var(&deltas);
    let sigma_delta = var_delta.sqrt();
    let l_nonunif = if mu_delta == 0.0 {
        flags.push(Degeneracy::SmoothLimit);
        0.0
    } else {
        let cv = sigma_delta / mu_delta;
        cv / (1.0 + cv)
    };
    let a_ent = (g_unif * l_nonunif).sqrt();

    Ok(EntropicBreakdown {
        tau_g,
        id_raw: id_raw.to_vec(),
        id_norm,
        var_norm,
        g_unif,
        deltas,
        mu_delta,
        sigma_delta,
        l_nonunif,
        a_ent: Some(a_ent),
        flags,
    })
}

/// Segments the trace, maps tokens onto steps and computes each step's
/// density. Returns the steps plus any segmentation warnings.
pub fn record_step_stats(
    record: &TraceRecord,
) -> Result<(Vec<StepStats>, Vec<String>), EntropicError> {
    let tokens = match &record.tokens {
        Some(t) if !t.is_empty() => t,
        _ => return Err(EntropicError::NeedsLogprobs),
    };
    let spans = segment_steps(&record.trace_text);
    let mapping = map_tokens_to_steps(tokens, &spans, record.trace_text.len())?;
    let mut steps = Vec::with_capacity(mapping.steps.len());
    for range in mapping.steps {
        let entropies: Vec<f64> = tokens[range.tokens.clone()]
            .iter()
            .map(|t| t.entropy)
            .collect();
        steps.push(StepStats {
            index: range.index,
            info_density: step_information_density(&entropies)?,
            token_range: range.tokens,
        });
    }
    if steps.is_empty() {
        return Err(EntropicError::NoSteps);
    }
    Ok((steps, mapping.warnings))
}

pub fn entropic_anchoring(
    record: &TraceRecord,
    tau_g: f64,
) -> Result<EntropicBreakdown, EntropicError> {
    let (steps, _) = record_step_stats(record)?;
    let id_raw: Vec<f64> = steps.iter().map(|s| s.info_density).collect();
    entropic_breakdown(&id_raw, tau_g)
}
