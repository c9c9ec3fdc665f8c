//! Exact toy models and synthetic traces used as ground truth.
//!
//! A [`ToyModel`] is a set of explicit next-symbol tables keyed by a
//! symbolic context class. Row `t` of a class gives the distribution of
//! the symbol at answer position `t`; positions past the last row reuse
//! it. Symbols are whitespace-delimited words.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::entropy::exact_entropy;
use crate::entropic::step_information_density;
use crate::trace::{EntropySource, Method, QAPair, TokenScore, TraceRecord};

pub const MAX_VOCAB: usize = 16;
const ROW_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("vocabulary must hold 1..={MAX_VOCAB} distinct symbols, got {0}")]
    Vocabulary(usize),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("unknown context class `{0}`")]
    UnknownContext(String),
    #[error("class `{class}` row {row}: {message}")]
    BadRow {
        class: String,
        row: usize,
        message: String,
    },
    #[error("impossible profile: {0}")]
    ImpossibleProfile(String),
    #[error("empty answer")]
    EmptyAnswer,
    #[error("{0}")]
    Io(String),
}

/// How symbols outside the vocabulary are handled.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OovPolicy {
    #[default]
    Error,
    /// Map to a vocabulary slot by a stable hash (for free-text fixtures).
    Hash,
}

/// Shape of toy generations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationPlan {
    pub steps: usize,
    pub tokens_per_step: usize,
}

impl Default for GenerationPlan {
    fn default() -> Self {
        Self {
            steps: 3,
            tokens_per_step: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub vocab: Vec<String>,
    #[serde(default)]
    pub oov: OovPolicy,
    pub classes: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub generation: GenerationPlan,
}

/// Class consulted when no listed class matches.
pub const DEFAULT_CLASS: &str = "default";

fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

impl ToyModel {
    pub fn new(
        vocab: Vec<String>,
        classes: BTreeMap<String, Vec<Vec<f64>>>,
    ) -> Result<Self, OracleError> {
        let model = Self {
            vocab,
            oov: OovPolicy::Error,
            classes,
            generation: GenerationPlan::default(),
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let n = self.vocab.len();
        let mut seen = self.vocab.clone();
        seen.sort();
        seen.dedup();
        if n == 0
            || n > MAX_VOCAB
            || seen.len() != n
            || self
                .vocab
                .iter()
                .any(|s| s.is_empty() || s.contains(char::is_whitespace))
        {
            return Err(OracleError::Vocabulary(n));
        }
        for (class, rows) in &self.classes {
            if rows.is_empty() {
                return Err(OracleError::BadRow {
                    class: class.clone(),
                    row: 0,
                    message: "no rows".into(),
                });
            }
            for (i, row) in rows.iter().enumerate() {
                let bad = |message: String| OracleError::BadRow {
                    class: class.clone(),
                    row: i,
                    message,
                };
                if row.len() != n {
                    return Err(bad(format!("{} entries for {n} symbols", row.len())));
                }
                if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                    return Err(bad("probabilities must be finite and non-negative".into()));
                }
                let total: f64 = row.iter().sum();
                if (total - 1.0).abs() > ROW_TOLERANCE {
                    return Err(bad(format!("sums to {total}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, OracleError> {
        let model: Self = serde_json::from_str(text).map_err(|e| OracleError::Io(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn from_file(path: &Path) -> Result<Self, OracleError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| OracleError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("toy model serializes")
    }

    pub fn symbol_index(&self, symbol: &str) -> Result<usize, OracleError> {
        match self.vocab.iter().position(|s| s == symbol) {
            Some(i) => Ok(i),
            None if self.oov == OovPolicy::Hash => {
                Ok((fnv1a(symbol) % self.vocab.len() as u64) as usize)
            }
            None => Err(OracleError::UnknownSymbol(symbol.to_string())),
        }
    }

    /// Rows of the first class in `names` that exists, else the default class.
    pub fn rows_for<S: AsRef<str>>(&self, names: &[S]) -> Result<&[Vec<f64>], OracleError> {
        names
            .iter()
            .find_map(|n| self.classes.get(n.as_ref()))
            .or_else(|| self.classes.get(DEFAULT_CLASS))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                OracleError::UnknownContext(
                    names
                        .first()
                        .map(|n| n.as_ref().to_string())
                        .unwrap_or_default(),
                )
            })
    }

    pub fn row<'a>(rows: &'a [Vec<f64>], position: usize) -> &'a [f64] {
        &rows[position.min(rows.len() - 1)]
    }

    /// Probability of the symbol sequence under one class, by direct product.
    pub fn sequence_probability(&self, class: &str, symbols: &[&str]) -> Result<f64, OracleError> {
        let rows = self
            .classes
            .get(class)
            .ok_or_else(|| OracleError::UnknownContext(class.to_string()))?;
        symbols.iter().enumerate().try_fold(1.0, |acc, (t, s)| {
            Ok(acc * Self::row(rows, t)[self.symbol_index(s)?])
        })
    }

    /// Per-position (logprob, entropy) of a symbol sequence under `names`.
    pub fn score_symbols<S: AsRef<str>>(
        &self,
        names: &[S],
        symbols: &[&str],
    ) -> Result<Vec<(f64, f64)>, OracleError> {
        let rows = self.rows_for(names)?;
        symbols
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let row = Self::row(rows, t);
                Ok((row[self.symbol_index(s)?].ln(), exact_entropy(row)))
            })
            .collect()
    }

    /// Random model with the given classes, `positions` rows each. Some
    /// entries are pushed towards zero so ratios vary in both directions.
    pub fn random<R: Rng>(
        rng: &mut R,
        vocab_size: usize,
        positions: usize,
        classes: &[&str],
    ) -> Self {
        let vocab: Vec<String> = (0..vocab_size).map(|i| format!("s{i}")).collect();
        let classes = classes
            .iter()
            .map(|c| {
                let rows = (0..positions.max(1))
                    .map(|_| {
                        let raw: Vec<f64> = (0..vocab_size)
                            .map(|_| rng.random_range(0.01..1.0f64).powi(2))
                            .collect();
                        let total: f64 = raw.iter().sum();
                        let mut row: Vec<f64> = raw.iter().map(|p| p / total).collect();
                        // Push the rounding residue into the largest entry.
                        let drift = 1.0 - row.iter().sum::<f64>();
                        let top = (0..row.len())
                            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
                            .unwrap();
                        row[top] += drift;
                        row
                    })
                    .collect();
                (c.to_string(), rows)
            })
            .collect();
        let model = Self {
            vocab,
            oov: OovPolicy::Error,
            classes,
            generation: GenerationPlan::default(),
        };
        debug_assert!(model.validate().is_ok());
        model
    }
}

/// Bits per answer symbol gained by moving from `without_class` to
/// `with_class`, computed from the direct table products.
pub fn exact_pmi(
    model: &ToyModel,
    answer: &[&str],
    with_class: &str,
    without_class: &str,
) -> Result<f64, OracleError> {
    if answer.is_empty() {
        return Err(OracleError::EmptyAnswer);
    }
    let with = model.sequence_probability(with_class, answer)?;
    let without = model.sequence_probability(without_class, answer)?;
    Ok((with / without).log2() / answer.len() as f64)
}

/// Requested per-step information densities and token counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthProfile {
    /// Target mean entropy per step, nats.
    pub densities: Vec<f64>,
    /// Tokens per step; a single entry applies to every step.
    pub tokens_per_step: Vec<usize>,
}

impl SynthProfile {
    pub fn uniform_tokens(densities: Vec<f64>, tokens: usize) -> Self {
        Self {
            densities,
            tokens_per_step: vec![tokens],
        }
    }

    fn tokens_for(&self, step: usize) -> usize {
        if self.tokens_per_step.len() == 1 {
            self.tokens_per_step[0]
        } else {
            self.tokens_per_step[step]
        }
    }
}

/// Largest perturbation around `d` that keeps `d + k` and `d - k` exact,
/// with `k` a whole number of ulps inside `d`'s binade.
fn exact_offset(d: f64, wanted: f64) -> f64 {
    if d <= 0.0 || !d.is_normal() {
        return 0.0;
    }
    let lo = 2f64.powi(d.log2().floor() as i32);
    let ulp = d.next_up() - d;
    let room = (d - lo).min(2.0 * lo - d - ulp).min(wanted);
    let k = (room / ulp).floor() * ulp;
    if k > 0.0 && (d + k) - d == k && d - (d - k) == k {
        k
    } else {
        0.0
    }
}

/// A text-only trace with scored tokens whose step densities equal the
/// profile exactly. Deterministic in `seed`.
pub fn synth_trace(profile: &SynthProfile, seed: u64) -> Result<TraceRecord, OracleError> {
    let steps = profile.densities.len();
    if steps == 0 {
        return Err(OracleError::ImpossibleProfile("no steps".into()));
    }
    if profile.tokens_per_step.len() != 1 && profile.tokens_per_step.len() != steps {
        return Err(OracleError::ImpossibleProfile(format!(
            "{} token counts for {steps} steps",
            profile.tokens_per_step.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::new();
    let mut tokens = Vec::new();
    for (s, &density) in profile.densities.iter().enumerate() {
        if !density.is_finite() || density < 0.0 {
            return Err(OracleError::ImpossibleProfile(format!(
                "step {} density {density}",
                s + 1
            )));
        }
        let count = profile.tokens_for(s);
        if count == 0 {
            return Err(OracleError::ImpossibleProfile(format!(
                "step {} has no tokens",
                s + 1
            )));
        }
        // The first token carries the target itself; the rest come in
        // pairs d + k, d - k with exactly cancelling deviations.
        let mut ent: Vec<f64> = vec![density; count];
        for pair in (1..count.saturating_sub(1)).step_by(2) {
            let k = exact_offset(density, density * 0.5 * rng.random_range(0.0..1.0));
            ent[pair] += k;
            ent[pair + 1] -= k;
        }
        if step_information_density(&ent).ok() != Some(density) {
            return Err(OracleError::ImpossibleProfile(format!(
                "cannot realize density {density}"
            )));
        }
        for (k, h) in ent.into_iter().enumerate() {
            let word = format!("w{}", rng.random_range(0..MAX_VOCAB));
            let sep = if k + 1 < count {
                " "
            } else if s + 1 < steps {
                "\n\n"
            } else {
                ""
            };
            tokens.push(TokenScore {
                text: format!("{word}{sep}"),
                logprob: -h.min(30.0),
                entropy: h,
                byte_offset: text.len(),
                entropy_source: Some(EntropySource::Exact),
            });
            text.push_str(&word);
            text.push_str(sep);
        }
    }
    let pair = QAPair::new(
        format!("synth-{seed}"),
        "synthetic query",
        "synthetic answer",
    );
    let mut record = TraceRecord::text_only(pair, Method::Neu, text);
    record.tokens = Some(tokens);
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropic::{entropic_anchoring, entropic_breakdown};
    use proptest::prelude::*;

    fn two_class(with: Vec<Vec<f64>>, without: Vec<Vec<f64>>) -> ToyModel {
        let vocab = (0..with[0].len()).map(|i| format!("s{i}")).collect();
        let classes = BTreeMap::from([
            ("with-trace".to_string(), with),
            ("without-trace".to_string(), without),
        ]);
        ToyModel::new(vocab, classes).unwrap()
    }

    #[test]
    fn spot_pmi() {
        let m = two_class(vec![vec![1.0, 0.0, 0.0, 0.0]], vec![vec![0.25; 4]]);
        assert_eq!(
            exact_pmi(&m, &["s0"], "with-trace", "without-trace").unwrap(),
            2.0
        );
        let m = two_class(vec![vec![0.5, 0.5]], vec![vec![0.5, 0.5]]);
        assert_eq!(
            exact_pmi(&m, &["s0", "s1"], "with-trace", "without-trace").unwrap(),
            0.0
        );
        // Per-symbol ratios 2 and 8.
        let m = two_class(
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
            vec![vec![0.25, 0.75], vec![0.125, 0.875]],
        );
        assert!(
            (exact_pmi(&m, &["s0", "s0"], "with-trace", "without-trace").unwrap() - 2.0).abs()
                < 1e-12
        );
    }

    #[test]
    fn unknown_inputs() {
        let m = two_class(vec![vec![1.0]], vec![vec![1.0]]);
        assert_eq!(
            exact_pmi(&m, &["zz"], "with-trace", "without-trace"),
            Err(OracleError::UnknownSymbol("zz".into()))
        );
        assert!(matches!(
            exact_pmi(&m, &["s0"], "nope", "without-trace"),
            Err(OracleError::UnknownContext(_))
        ));
    }

    #[test]
    fn rows_validated() {
        let bad = ToyModel::new(
            vec!["a".into()],
            BTreeMap::from([("c".to_string(), vec![vec![0.9]])]),
        );
        assert!(matches!(bad, Err(OracleError::BadRow { .. })));
        let neg = ToyModel::new(
            vec!["a".into(), "b".into()],
            BTreeMap::from([("c".to_string(), vec![vec![1.5, -0.5]])]),
        );
        assert!(matches!(neg, Err(OracleError::BadRow { .. })));
        let big = ToyModel::new((0..17).map(|i| i.to_string()).collect(), BTreeMap::new());
        assert_eq!(big, Err(OracleError::Vocabulary(17)));
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = ToyModel::random(&mut rng, 4, 3, &["with-trace", "without-trace"]);
        assert_eq!(ToyModel::from_json(&m.to_json()).unwrap(), m);
    }

    #[test]
    fn synth_is_deterministic() {
        let p = SynthProfile::uniform_tokens(vec![0.3, 1.2, 0.7], 5);
        assert_eq!(synth_trace(&p, 9).unwrap(), synth_trace(&p, 9).unwrap());
        assert_ne!(synth_trace(&p, 9).unwrap(), synth_trace(&p, 10).unwrap());
        assert!(synth_trace(&SynthProfile::uniform_tokens(vec![-1.0], 2), 0).is_err());
        assert!(synth_trace(&SynthProfile::uniform_tokens(vec![], 2), 0).is_err());
    }

    #[test]
    fn synth_flat_and_spot() {
        let flat = synth_trace(&SynthProfile::uniform_tokens(vec![0.8; 4], 3), 1).unwrap();
        assert_eq!(entropic_anchoring(&flat, 0.1).unwrap().g_unif, 1.0);
        let spot = synth_trace(&SynthProfile::uniform_tokens(vec![0.0, 1.0, 1.0], 4), 2).unwrap();
        let a = entropic_anchoring(&spot, 0.1).unwrap().a_ent.unwrap();
        assert!((a - 0.393919).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn synth_realizes_profile_exactly(
            densities in prop::collection::vec(0.0f64..5.0, 1..8),
            tokens in 1usize..7,
            seed in any::<u64>(),
        ) {
            let rec = synth_trace(&SynthProfile::uniform_tokens(densities.clone(), tokens), seed).unwrap();
            rec.validate().unwrap();
            let got = entropic_anchoring(&rec, 0.1).unwrap();
            let want = entropic_breakdown(&densities, 0.1).unwrap();
            prop_assert_eq!(got, want);
        }
    }
}
