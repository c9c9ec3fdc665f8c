//! Backend over a [`ToyModel`]: exact scores keyed by context class and
//! deterministic canned generations shaped like each prompt's format.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::entropy::exact_entropy;
use super::{
    Backend, BackendError, Capabilities, ChatMessage, GenParams, Generation, Role, ScoringContext,
};
use crate::oracle::{OracleError, ToyModel};
use crate::skeleton::FunctionalTag;
use crate::trace::{EntropySource, TokenScore};

const GENERATE_CLASS: &[&str] = &["generate"];

impl From<OracleError> for BackendError {
    fn from(e: OracleError) -> Self {
        match e {
            OracleError::UnknownContext(c) => BackendError::UnknownContext(c),
            OracleError::UnknownSymbol(s) => {
                BackendError::Tokenization(format!("symbol `{s}` not in toy vocabulary"))
            }
            other => BackendError::Config(other.to_string()),
        }
    }
}

pub struct ToyBackend {
    model: ToyModel,
    seed: u64,
    generate_calls: AtomicUsize,
    score_calls: AtomicUsize,
}

/// Output format a generation request asks for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    SummaryAndReason,
    SummaryOnly,
    ReasonOnly,
    SolutionAndExplanation,
    /// Paragraphs ending in an integer line, which also satisfies judges.
    Plain,
}

fn shape_of(messages: &[ChatMessage]) -> Shape {
    let system = messages
        .iter()
        .find(|m| m.role == Role::System)
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let summary = system.contains("<summary>");
    let reason = system.contains("<reason>");
    match (summary, reason) {
        (true, true) => Shape::SummaryAndReason,
        (true, false) => Shape::SummaryOnly,
        (false, true) => Shape::ReasonOnly,
        _ if system.contains("begin_of_explanation") => Shape::SolutionAndExplanation,
        _ => Shape::Plain,
    }
}

/// Accumulates generated text together with its token scores.
struct Emitter {
    text: String,
    tokens: Vec<TokenScore>,
}

impl Emitter {
    fn fixed(&mut self, piece: &str) {
        if piece.is_empty() {
            return;
        }
        self.push(piece, 0.0, 0.0);
    }

    fn push(&mut self, piece: &str, logprob: f64, entropy: f64) {
        self.tokens.push(TokenScore {
            text: piece.to_string(),
            logprob,
            entropy,
            byte_offset: self.text.len(),
            entropy_source: Some(EntropySource::Exact),
        });
        self.text.push_str(piece);
    }
}

impl ToyBackend {
    pub fn new(model: ToyModel, seed: u64) -> Self {
        Self {
            model,
            seed,
            generate_calls: AtomicUsize::new(0),
            score_calls: AtomicUsize::new(0),
        }
    }

    pub fn model(&self) -> &ToyModel {
        &self.model
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    fn rng_for(&self, messages: &[ChatMessage], params: &GenParams) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(messages).expect("messages serialize"));
        h.update(self.seed.to_le_bytes());
        h.update(params.seed.unwrap_or(0).to_le_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    /// `count` sampled symbols with exact scores, space separated. Every
    /// symbol is drawn from row `row` of the generation class.
    fn words(
        &self,
        rng: &mut ChaCha8Rng,
        out: &mut Emitter,
        count: usize,
        row: usize,
        last_sep: &str,
    ) -> Result<(), BackendError> {
        let rows = self.model.rows_for(GENERATE_CLASS).ok();
        for t in 0..count {
            let (idx, lp, h) = match rows {
                Some(rows) => {
                    let row = ToyModel::row(rows, row);
                    let idx = sample_index(rng, row);
                    (idx, row[idx].ln(), exact_entropy(row))
                }
                None => {
                    let n = self.model.vocab.len();
                    let p = 1.0 / n as f64;
                    (rng.random_range(0..n), p.ln(), (n as f64).ln())
                }
            };
            let sep = if t + 1 < count { " " } else { last_sep };
            out.push(&format!("{}{sep}", self.model.vocab[idx]), lp, h);
        }
        Ok(())
    }

    fn paragraphs(
        &self,
        rng: &mut ChaCha8Rng,
        out: &mut Emitter,
        last_sep: &str,
    ) -> Result<(), BackendError> {
        let plan = self.model.generation;
        for s in 0..plan.steps {
            let sep = if s + 1 < plan.steps { "\n\n" } else { last_sep };
            self.words(rng, out, plan.tokens_per_step.max(1), s, sep)?;
        }
        Ok(())
    }

    fn skeleton(&self, rng: &mut ChaCha8Rng, out: &mut Emitter) -> Result<(), BackendError> {
        let plan = self.model.generation;
        for s in 0..plan.steps {
            let tag = FunctionalTag::ALL[rng.random_range(0..FunctionalTag::ALL.len())];
            out.fixed(&format!("{}. [{tag}] ", s + 1));
            self.words(rng, out, plan.tokens_per_step.max(1), s, "\n")?;
        }
        Ok(())
    }
}

fn sample_index(rng: &mut ChaCha8Rng, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

fn symbols_with_offsets(target: &str) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in target.char_indices() {
        match (c.is_whitespace(), start) {
            (false, None) => start = Some(i),
            (true, Some(s)) => {
                out.push((s, &target[s..i]));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, &target[s..]));
    }
    out
}

impl Backend for ToyBackend {
    fn identity(&self) -> String {
        let digest = hex::encode(Sha256::digest(self.model.to_json().as_bytes()));
        format!("toy:{}", &digest[..12])
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities {
            generate: true,
            score: true,
            entropy_exact: true,
        }
    }

    fn generate(
        &self,
        messages: &[ChatMessage],
        params: &GenParams,
    ) -> Result<Generation, BackendError> {
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = self.rng_for(messages, params);
        let mut out = Emitter {
            text: String::new(),
            tokens: Vec::new(),
        };
        match shape_of(messages) {
            Shape::SummaryAndReason => {
                out.fixed("<summary>\n");
                self.skeleton(&mut rng, &mut out)?;
                out.fixed("</summary>\n\n<reason>\n");
                self.paragraphs(&mut rng, &mut out, "\n")?;
                out.fixed("</reason>");
            }
            Shape::SummaryOnly => {
                out.fixed("<summary>\n");
                self.skeleton(&mut rng, &mut out)?;
                out.fixed("</summary>");
            }
            Shape::ReasonOnly => {
                out.fixed("<reason>\n");
                self.paragraphs(&mut rng, &mut out, "\n")?;
                out.fixed("</reason>");
            }
            Shape::SolutionAndExplanation => {
                out.fixed("<|begin_of_solution|> ");
                self.words(&mut rng, &mut out, 2, 0, " ")?;
                out.fixed("<|end_of_solution|>\n\n<|begin_of_explanation|>\n");
                self.paragraphs(&mut rng, &mut out, "\n")?;
                out.fixed("<|end_of_explanation|>");
            }
            Shape::Plain => {
                self.paragraphs(&mut rng, &mut out, "\n\n")?;
                out.fixed(&rng.random_range(0..=100u32).to_string());
            }
        }
        Ok(Generation {
            text: out.text,
            tokens: out.tokens,
        })
    }

    fn score_tokens(
        &self,
        context: &ScoringContext,
        target: &str,
    ) -> Result<Vec<TokenScore>, BackendError> {
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let symbols = symbols_with_offsets(target);
        if symbols.is_empty() {
            return Err(BackendError::Tokenization("empty target".into()));
        }
        let words: Vec<&str> = symbols.iter().map(|(_, s)| *s).collect();
        let scores = self
            .model
            .score_symbols(&context.kind.class_names(), &words)?;
        symbols
            .iter()
            .zip(scores)
            .map(|(&(off, sym), (lp, h))| {
                if lp == f64::NEG_INFINITY {
                    return Err(BackendError::Tokenization(format!(
                        "symbol `{sym}` has zero probability"
                    )));
                }
                Ok(TokenScore {
                    text: sym.to_string(),
                    logprob: lp,
                    entropy: h,
                    byte_offset: off,
                    entropy_source: Some(EntropySource::Exact),
                })
            })
            .collect()
    }
}
