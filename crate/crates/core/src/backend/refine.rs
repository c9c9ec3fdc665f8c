//! Iterative self-refinement of a reference answer.
//!
//! N rollouts are generated; each of T loops scores the current pool, then
//! fills K slots by sampling M scored candidates and synthesizing one
//! improved response from them, and the K syntheses replace the pool. The
//! final pool is re-scored and its best candidate returned. Scores come
//! from a judge prompt whose last line must carry an integer 0 to 100.

use std::sync::OnceLock;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};

use super::prompts::{asset, fill};
use super::{BackendError, BackendHandle, ChatMessage, GenParams};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sampling {
    #[default]
    Uniform,
    /// Sampling weight `score + 1`, so zero-scored candidates stay eligible.
    ScoreWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineConfig {
    pub n_rollouts: usize,
    pub slots: usize,
    pub sample_size: usize,
    pub loops: usize,
    pub judge_template: String,
    pub sampling: Sampling,
    pub seed: u64,
    pub params: GenParams,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            n_rollouts: 4,
            slots: 2,
            sample_size: 2,
            loops: 2,
            judge_template: "judge".into(),
            sampling: Sampling::Uniform,
            seed: 0,
            params: GenParams::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |m: String| Err(BackendError::Config(m));
        if self.n_rollouts == 0 || self.slots == 0 {
            return bad("n_rollouts and slots must be at least 1".into());
        }
        if self.sample_size == 0 {
            return bad("sample_size must be at least 1".into());
        }
        if self.loops >= 1 && self.sample_size > self.n_rollouts {
            return bad(format!(
                "sample_size {} exceeds {} rollouts",
                self.sample_size, self.n_rollouts
            ));
        }
        if self.loops >= 2 && self.sample_size > self.slots {
            return bad(format!(
                "sample_size {} exceeds {} slots",
                self.sample_size, self.slots
            ));
        }
        asset(&self.judge_template)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Origin {
    Rollout,
    Synthesized { parents: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    /// 0 for rollouts, t for candidates synthesized in loop t.
    pub round: usize,
    pub origin: Origin,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "phase", content = "loop")]
pub enum ScorePhase {
    Loop(usize),
    Final,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreEvent {
    pub candidate: usize,
    pub phase: ScorePhase,
    pub score: u32,
    pub reasked: bool,
    /// Judge output stayed unparseable after the re-ask; score forced to 0.
    pub unparseable: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallCounts {
    pub generate: usize,
    pub loop_score: usize,
    pub synthesize: usize,
    pub final_score: usize,
    pub reask: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineAudit {
    pub candidates: Vec<Candidate>,
    pub scores: Vec<ScoreEvent>,
    pub samples: Vec<SampleEvent>,
    pub calls: CallCounts,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEvent {
    pub round: usize,
    pub slot: usize,
    pub sampled: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineOutcome {
    pub answer: String,
    pub audit: RefineAudit,
}

fn last_int_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\d+").unwrap())
}

/// Last integer on the last non-empty line, if within 0..=100.
pub fn parse_judge_score(text: &str) -> Option<u32> {
    let line = text.lines().rev().find(|l| !l.trim().is_empty())?;
    let m = last_int_re().find_iter(line).last()?;
    m.as_str().parse().ok().filter(|s| *s <= 100)
}

struct Judged {
    score: u32,
    reasked: bool,
    unparseable: bool,
}

fn judge(
    handle: &BackendHandle,
    cfg: &RefineConfig,
    query: &str,
    candidate: &str,
) -> Result<Judged, BackendError> {
    let prompt = fill(
        asset(&cfg.judge_template)?.text,
        &[("query", query), ("candidate", candidate)],
    )?;
    let mut messages = vec![ChatMessage::user(prompt)];
    let first = handle.generate(&messages, &cfg.params)?;
    if let Some(score) = parse_judge_score(&first.text) {
        return Ok(Judged {
            score,
            reasked: false,
            unparseable: false,
        });
    }
    messages.push(ChatMessage::assistant(first.text));
    messages.push(ChatMessage::user(asset("judge_reask")?.text));
    let second = handle.generate(&messages, &cfg.params)?;
    Ok(match parse_judge_score(&second.text) {
        Some(score) => Judged {
            score,
            reasked: true,
            unparseable: false,
        },
        None => Judged {
            score: 0,
            reasked: true,
            unparseable: true,
        },
    })
}

fn score_pool(
    handle: &BackendHandle,
    cfg: &RefineConfig,
    query: &str,
    pool: &[usize],
    audit: &mut RefineAudit,
    phase: ScorePhase,
) -> Result<Vec<u32>, BackendError> {
    let texts: Vec<&str> = pool
        .iter()
        .map(|&id| audit.candidates[id].text.as_str())
        .collect();
    let results = handle.map_ordered(&texts, |t| judge(handle, cfg, query, t));
    let mut scores = Vec::with_capacity(pool.len());
    for (&id, r) in pool.iter().zip(results) {
        let j = r?;
        match phase {
            ScorePhase::Loop(_) => audit.calls.loop_score += 1,
            ScorePhase::Final => audit.calls.final_score += 1,
        }
        audit.calls.reask += j.reasked as usize;
        audit.scores.push(ScoreEvent {
            candidate: id,
            phase,
            score: j.score,
            reasked: j.reasked,
            unparseable: j.unparseable,
        });
        scores.push(j.score);
    }
    Ok(scores)
}

fn render_candidates(ids: &[usize], scores: &[u32], audit: &RefineAudit) -> String {
    ids.iter()
        .zip(scores)
        .enumerate()
        .map(|(i, (&id, s))| {
            format!(
                "[Candidate {}] (score {s})\n{}",
                i + 1,
                audit.candidates[id].text
            )
        })
        .collect::<Vec<_>>()
        .join("\n\n")
}

pub fn refine_answer(
    handle: &BackendHandle,
    query: &str,
    cfg: &RefineConfig,
) -> Result<RefineOutcome, BackendError> {
    cfg.validate()?;
    if !handle.capabilities().generate {
        return Err(BackendError::GenerationUnsupported);
    }
    let mut audit = RefineAudit::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let requests: Vec<(Vec<ChatMessage>, GenParams)> = (0..cfg.n_rollouts)
        .map(|i| {
            let params = GenParams {
                seed: Some(cfg.seed.wrapping_add(i as u64)),
                ..cfg.params.clone()
            };
            (vec![ChatMessage::user(query)], params)
        })
        .collect();
    for g in handle.generate_batch(&requests) {
        let text = g?.text;
        audit.calls.generate += 1;
        let id = audit.candidates.len();
        audit.candidates.push(Candidate {
            id,
            round: 0,
            origin: Origin::Rollout,
            text,
        });
    }
    let mut pool: Vec<usize> = (0..cfg.n_rollouts).collect();

    for t in 1..=cfg.loops {
        let scores = score_pool(handle, cfg, query, &pool, &mut audit, ScorePhase::Loop(t))?;
        let mut jobs = Vec::with_capacity(cfg.slots);
        for slot in 0..cfg.slots {
            let picks: Vec<usize> = match cfg.sampling {
                Sampling::Uniform => {
                    index::sample(&mut rng, pool.len(), cfg.sample_size).into_vec()
                }
                Sampling::ScoreWeighted => index::sample_weighted(
                    &mut rng,
                    pool.len(),
                    |i| scores[i] as f64 + 1.0,
                    cfg.sample_size,
                )
                .map_err(|e| BackendError::Config(e.to_string()))?
                .into_vec(),
            };
            let ids: Vec<usize> = picks.iter().map(|&i| pool[i]).collect();
            let picked_scores: Vec<u32> = picks.iter().map(|&i| scores[i]).collect();
            audit.samples.push(SampleEvent {
                round: t,
                slot,
                sampled: ids.clone(),
            });
            let prompt = fill(
                asset("synthesize")?.text,
                &[
                    ("query", query),
                    (
                        "candidates",
                        &render_candidates(&ids, &picked_scores, &audit),
                    ),
                ],
            )?;
            let params = GenParams {
                seed: Some(
                    cfg.seed
                        .wrapping_add((t * cfg.slots + slot) as u64 + 1_000_003),
                ),
                ..cfg.params.clone()
            };
            jobs.push((ids, (vec![ChatMessage::user(prompt)], params)));
        }
        let requests: Vec<_> = jobs.iter().map(|(_, r)| r.clone()).collect();
        let mut next = Vec::with_capacity(cfg.slots);
        for ((parents, _), g) in jobs.into_iter().zip(handle.generate_batch(&requests)) {
            let text = g?.text;
            audit.calls.synthesize += 1;
            let id = audit.candidates.len();
            audit.candidates.push(Candidate {
                id,
                round: t,
                origin: Origin::Synthesized { parents },
                text,
            });
            next.push(id);
        }
        pool = next;
    }

    let finals = score_pool(handle, cfg, query, &pool, &mut audit, ScorePhase::Final)?;
    let best = finals
        .iter()
        .enumerate()
        .fold(0, |best, (i, s)| if *s > finals[best] { i } else { best });
    audit.selected = pool[best];
    Ok(RefineOutcome {
        answer: audit.candidates[audit.selected].text.clone(),
        audit,
    })
}
