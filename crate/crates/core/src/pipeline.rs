//! Scoring pipeline: generate (or load) traces and compute the selected
//! metrics per record.
//!
//! Every (pair, method) job runs independently on the backend's worker
//! pool. A failing job is written out with its errors and the run goes
//! on; output order always follows input order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::http::{HttpBackend, HttpConfig};
use crate::backend::prompts::{
    render_prompt, render_ssr_reason_phase, render_ssr_skeleton_phase, ASSET_VERSION,
};
use crate::backend::replay::{RecordingBackend, ReplayBackend};
use crate::backend::toy::ToyBackend;
use crate::backend::{
    Backend, BackendHandle, BackendMode, GenParams, Generation, PromptMethod, RetryPolicy,
};
use crate::entropic::entropic_anchoring;
use crate::lexical::lexical_anchoring;
use crate::oracle::ToyModel;
use crate::probabilistic::{probabilistic_anchoring, trace_forcing_context, PmiResult};
use crate::skeleton::{extract_block, extract_blocks, parse_skeleton, Skeleton};
use crate::trace::{
    load_pairs, load_trace_records, write_jsonl, AnchoringScores, EntropySource, LoadMode, Method,
    QAPair, ScoreBreakdown, TokenScore, TraceRecord,
};
use crate::zones::{build_condition, ConditionKind, FunctionWords};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Lex,
    Ent,
    Prob,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Lex, Metric::Ent, Metric::Prob];
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Lex => "lex",
            Metric::Ent => "ent",
            Metric::Prob => "prob",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lex" | "a_lex" => Ok(Metric::Lex),
            "ent" | "a_ent" => Ok(Metric::Ent),
            "prob" | "a_prob" => Ok(Metric::Prob),
            _ => Err(Error::Config(format!("unknown metric `{s}`"))),
        }
    }
}

/// Where model calls go.
#[derive(Debug, Clone, PartialEq)]
pub enum BackendSelection {
    None,
    Http {
        config: HttpConfig,
        record: Option<PathBuf>,
    },
    Replay {
        path: PathBuf,
    },
    Toy {
        model: PathBuf,
        record: Option<PathBuf>,
    },
}

impl BackendSelection {
    pub fn build(
        &self,
        parallelism: usize,
        retry: RetryPolicy,
        seed: u64,
    ) -> Result<Option<BackendHandle>> {
        let wrap =
            |inner: Arc<dyn Backend>, record: &Option<PathBuf>| -> Result<Arc<dyn Backend>> {
                Ok(match record {
                    Some(path) => Arc::new(RecordingBackend::create(inner, path)?),
                    None => inner,
                })
            };
        let (inner, mode): (Arc<dyn Backend>, BackendMode) = match self {
            BackendSelection::None => return Ok(None),
            BackendSelection::Http { config, record } => (
                wrap(Arc::new(HttpBackend::new(config.clone())), record)?,
                BackendMode::Http,
            ),
            BackendSelection::Replay { path } => (
                Arc::new(ReplayBackend::load(path)?),
                BackendMode::OfflineReplay,
            ),
            BackendSelection::Toy { model, record } => {
                let toy = ToyBackend::new(ToyModel::from_file(model)?, seed);
                (wrap(Arc::new(toy), record)?, BackendMode::ToyOracle)
            }
        };
        Ok(Some(
            BackendHandle::new(inner, mode)
                .with_parallelism(parallelism)
                .with_retry(retry),
        ))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineInput {
    /// Query/answer pairs; traces are generated for every method.
    Pairs(PathBuf),
    /// Previously produced traces, scored as given.
    Traces(PathBuf),
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub input: PipelineInput,
    pub methods: Vec<Method>,
    pub metrics: BTreeSet<Metric>,
    pub backend: BackendSelection,
    pub tau_g: f64,
    /// Multiplier applied by reports; carried here so one config drives a run.
    pub scale_factor: f64,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub parallelism: usize,
    pub retry: RetryPolicy,
    pub gen_params: GenParams,
    /// Generate SSR skeleton and reasoning in two separate calls.
    pub two_call_ssr: bool,
    pub load_mode: LoadMode,
    pub function_words: Option<PathBuf>,
}

impl PipelineConfig {
    pub fn new(input: PipelineInput, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            input,
            methods: Method::PROMPTED.to_vec(),
            metrics: Metric::ALL.into_iter().collect(),
            backend: BackendSelection::None,
            tau_g: crate::DEFAULT_TAU_G,
            scale_factor: 100.0,
            output_dir: output_dir.into(),
            seed: 0,
            parallelism: 4,
            retry: RetryPolicy::default(),
            gen_params: GenParams::default(),
            two_call_ssr: false,
            load_mode: LoadMode::Strict,
            function_words: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau_g.is_finite() && self.tau_g > 0.0) {
            return bad(format!("tau_g must be positive, got {}", self.tau_g));
        }
        if !(self.scale_factor.is_finite() && self.scale_factor > 0.0) {
            return bad(format!(
                "scale_factor must be positive, got {}",
                self.scale_factor
            ));
        }
        if self.methods.is_empty() {
            return bad("method set is empty".into());
        }
        if self.metrics.is_empty() {
            return bad("metric set is empty".into());
        }
        if self.parallelism == 0 {
            return bad("parallelism must be at least 1".into());
        }
        let no_backend = self.backend == BackendSelection::None;
        if no_backend && matches!(self.input, PipelineInput::Pairs(_)) {
            return bad("generating traces from pairs needs a backend".into());
        }
        if no_backend && self.metrics.contains(&Metric::Prob) {
            return bad("metric prob needs a scoring backend".into());
        }
        Ok(())
    }

    pub fn scores_path(&self) -> PathBuf {
        self.output_dir.join("scores.jsonl")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backend: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scorer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_version: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy_source: Option<EntropySource>,
    pub tau_g: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    #[serde(flatten)]
    pub record: TraceRecord,
    pub scores: AnchoringScores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pmi: Option<PmiResult>,
    pub meta: RecordMeta,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
}

impl ScoredRecord {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSummary {
    pub total: usize,
    pub succeeded: usize,
    pub failed: usize,
    pub per_method: BTreeMap<String, (usize, usize)>,
}

impl PipelineSummary {
    fn of(records: &[ScoredRecord]) -> Self {
        let mut s = Self {
            total: records.len(),
            ..Self::default()
        };
        for r in records {
            let entry = s.per_method.entry(r.record.method.to_string()).or_default();
            if r.is_ok() {
                s.succeeded += 1;
                entry.0 += 1;
            } else {
                s.failed += 1;
                entry.1 += 1;
            }
        }
        s
    }

    /// 0 when every record succeeded, 2 on partial failure, 3 when none did.
    pub fn exit_code(&self) -> i32 {
        match (self.succeeded, self.failed) {
            (_, 0) => 0,
            (0, _) => 3,
            _ => 2,
        }
    }
}

impl fmt::Display for PipelineSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} records: {} ok, {} failed",
            self.total, self.succeeded, self.failed
        )?;
        for (m, (ok, bad)) in &self.per_method {
            write!(f, "\n  {m}: {ok} ok, {bad} failed")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub records: Vec<ScoredRecord>,
    pub summary: PipelineSummary,
    pub output: PathBuf,
}

/// Stable per-job generation seed, independent of scheduling.
fn job_seed(seed: u64, id: &str, method: Method) -> u64 {
    let digest = Sha256::digest(format!("{seed}\u{0}{id}\u{0}{method}").as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Tokens overlapping `span` of `text`, clipped to it and re-based to its start.
pub fn slice_tokens(tokens: &[TokenScore], text: &str, span: Range<usize>) -> Vec<TokenScore> {
    let mut out = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        let end = tokens.get(i + 1).map_or(text.len(), |n| n.byte_offset);
        let (s, e) = (t.byte_offset.max(span.start), end.min(span.end));
        if s >= e || !text.is_char_boundary(s) || !text.is_char_boundary(e) {
            continue;
        }
        out.push(TokenScore {
            text: text[s..e].to_string(),
            byte_offset: s - span.start,
            ..t.clone()
        });
    }
    out
}

/// Trace part of a generation plus its tokens.
struct Extracted {
    text: String,
    tokens: Vec<TokenScore>,
    skeleton: Option<Skeleton>,
    warnings: Vec<String>,
}

fn span_between(text: &str, open: &str, close: &str) -> Option<Range<usize>> {
    let start = text.find(open)? + open.len();
    let end = start + text[start..].find(close)?;
    let body = &text[start..end];
    let lead = body.len() - body.trim_start().len();
    Some(start + lead..start + body.trim_end().len())
}

fn extract(method: Method, g: &Generation) -> Result<Extracted> {
    let mut warnings = Vec::new();
    let mut skeleton = None;
    let span = match method {
        Method::Ssr => {
            let blocks = extract_blocks(&g.text)?;
            warnings.extend(blocks.warnings);
            match parse_skeleton(&blocks.summary) {
                Ok(s) => skeleton = Some(s),
                Err(e) => warnings.push(format!("skeleton: {e}")),
            }
            blocks.reason_span
        }
        _ => match span_between(
            &g.text,
            "<|begin_of_explanation|>",
            "<|end_of_explanation|>",
        ) {
            Some(span) => span,
            None => {
                warnings.push("explanation markers missing; scoring the full completion".into());
                let lead = g.text.len() - g.text.trim_start().len();
                lead..g.text.trim_end().len()
            }
        },
    };
    Ok(Extracted {
        text: g.text[span.clone()].to_string(),
        tokens: slice_tokens(&g.tokens, &g.text, span),
        skeleton,
        warnings,
    })
}

struct Runner<'a> {
    cfg: &'a PipelineConfig,
    handle: Option<&'a BackendHandle>,
    fw: FunctionWords,
}

enum Job {
    Generate {
        pair: QAPair,
        method: Method,
        own_cot: Option<std::result::Result<Generation, String>>,
    },
    Provided(TraceRecord),
}

impl Runner<'_> {
    fn handle(&self) -> Result<&BackendHandle> {
        self.handle
            .ok_or_else(|| Error::Config("no backend configured".into()))
    }

    fn params(&self, id: &str, method: Method) -> GenParams {
        GenParams {
            seed: Some(job_seed(self.cfg.seed, id, method)),
            ..self.cfg.gen_params.clone()
        }
    }

    fn own_cot(&self, pair: &QAPair) -> Result<Generation> {
        let messages = vec![crate::backend::ChatMessage::user(pair.query.clone())];
        Ok(self.handle()?.generate(
            &messages,
            &self.params(&pair.id, Method::Condition(ConditionKind::RealCot)),
        )?)
    }

    fn generate_trace(
        &self,
        pair: &QAPair,
        method: Method,
        own_cot: Option<&Generation>,
    ) -> Result<Extracted> {
        let handle = self.handle()?;
        let params = self.params(&pair.id, method);
        match method {
            Method::Condition(kind) => {
                let cot = own_cot.map(|g| g.text.trim_end());
                let text = build_condition(kind, cot, Some(&pair.answer), &self.fw)?;
                let tokens = match (kind, own_cot) {
                    (ConditionKind::RealCot, Some(g)) => {
                        slice_tokens(&g.tokens, &g.text, 0..text.len())
                    }
                    _ => Vec::new(),
                };
                Ok(Extracted {
                    text,
                    tokens,
                    skeleton: None,
                    warnings: Vec::new(),
                })
            }
            Method::Ssr if self.cfg.two_call_ssr => {
                let plan = handle.generate(&render_ssr_skeleton_phase(pair)?, &params)?;
                let summary = &plan.text[extract_block(&plan.text, "summary")?];
                let skeleton = parse_skeleton(summary)?;
                let g = handle
                    .generate(&render_ssr_reason_phase(pair, &skeleton.render())?, &params)?;
                let span = extract_block(&g.text, "reason")?;
                Ok(Extracted {
                    text: g.text[span.clone()].to_string(),
                    tokens: slice_tokens(&g.tokens, &g.text, span),
                    skeleton: Some(skeleton),
                    warnings: Vec::new(),
                })
            }
            _ => {
                let messages = render_prompt(PromptMethod::try_from(method)?, pair)?;
                extract(method, &handle.generate(&messages, &params)?)
            }
        }
    }

    fn run(&self, job: &Job) -> ScoredRecord {
        let mut meta = RecordMeta {
            backend: self.handle.map(BackendHandle::identity),
            tau_g: self.cfg.tau_g,
            ..RecordMeta::default()
        };
        let mut errors = Vec::new();
        let record = match job {
            Job::Provided(r) => r.clone(),
            Job::Generate {
                pair,
                method,
                own_cot,
            } => {
                meta.prompt_version = Some(ASSET_VERSION.to_string());
                let cot = match own_cot {
                    Some(Ok(g)) => Some(g),
                    Some(Err(e)) => {
                        errors.push(format!("own reasoning: {e}"));
                        None
                    }
                    None => None,
                };
                match self.generate_trace(pair, *method, cot) {
                    Ok(ex) => {
                        meta.warnings.extend(ex.warnings);
                        let mut r = TraceRecord::text_only(pair.clone(), *method, ex.text);
                        r.tokens = (!ex.tokens.is_empty()).then_some(ex.tokens);
                        r.skeleton = ex.skeleton;
                        r
                    }
                    Err(e) => {
                        errors.push(format!("generation: {e}"));
                        TraceRecord::text_only(pair.clone(), *method, String::new())
                    }
                }
            }
        };
        if errors.is_empty() {
            self.score(record, meta)
        } else {
            ScoredRecord {
                record,
                scores: AnchoringScores::default(),
                pmi: None,
                meta,
                errors,
            }
        }
    }

    fn score(&self, mut record: TraceRecord, mut meta: RecordMeta) -> ScoredRecord {
        let mut scores = AnchoringScores::default();
        let mut errors = Vec::new();
        let mut pmi = None;
        let metrics = &self.cfg.metrics;

        if metrics.contains(&Metric::Lex) {
            match lexical_anchoring(&record.trace_text, &record.pair.answer) {
                Ok(r) => scores.a_lex = Some(r.a_lex),
                Err(e) => errors.push(format!("lex: {e}")),
            }
        }
        if metrics.contains(&Metric::Ent) {
            if !record.has_tokens() {
                if let Some(h) = self.handle.filter(|h| h.capabilities().score) {
                    let forced = trace_forcing_context(&record.pair)
                        .and_then(|ctx| h.score_tokens(&ctx, &record.trace_text));
                    match forced {
                        Ok(t) => {
                            record.tokens = Some(t);
                            meta.scorer = Some(h.identity());
                        }
                        Err(e) => errors.push(format!("ent: teacher forcing failed: {e}")),
                    }
                }
            }
            if let Some(tokens) = &record.tokens {
                meta.entropy_source = summarize_source(tokens);
            }
            match record
                .validate()
                .map_err(Error::from)
                .and_then(|_| entropic_anchoring(&record, self.cfg.tau_g).map_err(Error::from))
            {
                Ok(b) => {
                    scores.a_ent = b.a_ent;
                    scores.flags = b.flags.clone();
                    scores.breakdown = Some(ScoreBreakdown {
                        g_unif: b.g_unif,
                        l_nonunif: b.l_nonunif,
                        var_norm: b.var_norm,
                        mu_delta: b.mu_delta,
                        sigma_delta: b.sigma_delta,
                    });
                }
                Err(e) if errors.iter().any(|m| m.starts_with("ent:")) => drop(e),
                Err(e) => errors.push(format!("ent: {e}")),
            }
        }
        if metrics.contains(&Metric::Prob) {
            match self
                .handle
                .map(|h| probabilistic_anchoring(h, &record.pair, &record.trace_text))
            {
                Some(Ok(r)) => {
                    scores.a_prob = Some(r.a_prob);
                    pmi = Some(r);
                    meta.scorer = self.handle.map(BackendHandle::identity);
                }
                Some(Err(e)) => errors.push(format!("prob: {e}")),
                None => errors.push("prob: no scoring backend".into()),
            }
        }
        ScoredRecord {
            record,
            scores,
            pmi,
            meta,
            errors,
        }
    }
}

fn summarize_source(tokens: &[TokenScore]) -> Option<EntropySource> {
    if tokens
        .iter()
        .any(|t| t.entropy_source == Some(EntropySource::Topk))
    {
        Some(EntropySource::Topk)
    } else if tokens
        .iter()
        .all(|t| t.entropy_source == Some(EntropySource::Exact))
    {
        Some(EntropySource::Exact)
    } else {
        None
    }
}

/// Scores jobs on an existing handle without touching the filesystem.
pub fn score_jobs_with(
    cfg: &PipelineConfig,
    handle: Option<&BackendHandle>,
    input: ScoringInput,
) -> Result<Vec<ScoredRecord>> {
    let fw = match &cfg.function_words {
        Some(p) => FunctionWords::from_file(p)?,
        None => FunctionWords::builtin().clone(),
    };
    let runner = Runner { cfg, handle, fw };
    let jobs: Vec<Job> = match input {
        ScoringInput::Traces(records) => records
            .into_iter()
            .filter(|r| cfg.methods.contains(&r.method))
            .map(Job::Provided)
            .collect(),
        ScoringInput::Pairs(pairs) => {
            let needs_cot = cfg.methods.iter().any(|m| {
                matches!(
                    m,
                    Method::Condition(ConditionKind::RealCot | ConditionKind::ProbAnchor)
                )
            });
            let cots: Vec<Option<std::result::Result<Generation, String>>> = if needs_cot {
                let h = runner.handle()?;
                h.map_ordered(&pairs, |p| {
                    Some(runner.own_cot(p).map_err(|e| e.to_string()))
                })
            } else {
                vec![None; pairs.len()]
            };
            let mut jobs = Vec::new();
            for (pair, cot) in pairs.into_iter().zip(cots) {
                for &method in &cfg.methods {
                    let own_cot = match method {
                        Method::Condition(ConditionKind::RealCot | ConditionKind::ProbAnchor) => {
                            cot.clone()
                        }
                        _ => None,
                    };
                    jobs.push(Job::Generate {
                        pair: pair.clone(),
                        method,
                        own_cot,
                    });
                }
            }
            jobs
        }
    };
    Ok(match handle {
        Some(h) => h.map_ordered(&jobs, |j| runner.run(j)),
        None => jobs.iter().map(|j| runner.run(j)).collect(),
    })
}

pub enum ScoringInput {
    Pairs(Vec<QAPair>),
    Traces(Vec<TraceRecord>),
}

/// Loads inputs, scores every job, writes `scores.jsonl` under the output
/// directory and returns the records with a summary.
pub fn run_score_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    cfg.validate()?;
    let input = match &cfg.input {
        PipelineInput::Pairs(p) => ScoringInput::Pairs(load_pairs(p, cfg.load_mode)?.records),
        PipelineInput::Traces(p) => {
            ScoringInput::Traces(load_trace_records(p, cfg.load_mode)?.records)
        }
    };
    let handle = cfg.backend.build(cfg.parallelism, cfg.retry, cfg.seed)?;
    let records = score_jobs_with(cfg, handle.as_ref(), input)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let output = cfg.scores_path();
    write_jsonl(&output, &records)?;
    let summary = PipelineSummary::of(&records);
    if summary.total > 0 && summary.succeeded == 0 {
        return Err(Error::NoSuccess {
            total: summary.total,
        });
    }
    Ok(PipelineOutcome {
        records,
        summary,
        output,
    })
}

/// Generates traces without scoring them; successful ones are written to
/// `traces.jsonl`, loadable as provided traces by a later `score` run.
pub fn run_generate_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    let mut check = cfg.clone();
    check.metrics = [Metric::Lex].into_iter().collect();
    check.validate()?;
    let PipelineInput::Pairs(path) = &cfg.input else {
        return Err(Error::Config(
            "generation needs query/answer pairs as input".into(),
        ));
    };
    let pairs = load_pairs(path, cfg.load_mode)?.records;
    let handle = cfg.backend.build(cfg.parallelism, cfg.retry, cfg.seed)?;
    let mut gen_cfg = cfg.clone();
    gen_cfg.metrics.clear();
    let records = score_jobs_with(&gen_cfg, handle.as_ref(), ScoringInput::Pairs(pairs))?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let output = cfg.output_dir.join("traces.jsonl");
    let traces: Vec<&TraceRecord> = records
        .iter()
        .filter(|r| r.is_ok())
        .map(|r| &r.record)
        .collect();
    write_jsonl(&output, &traces)?;
    let summary = PipelineSummary::of(&records);
    if summary.total > 0 && summary.succeeded == 0 {
        return Err(Error::NoSuccess {
            total: summary.total,
        });
    }
    Ok(PipelineOutcome {
        records,
        summary,
        output,
    })
}

/// Scores of reference-condition records, grouped for zone calibration.
pub fn condition_samples(
    records: &[ScoredRecord],
) -> BTreeMap<ConditionKind, Vec<AnchoringScores>> {
    let mut out: BTreeMap<ConditionKind, Vec<AnchoringScores>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_ok()) {
        if let Method::Condition(kind) = r.record.method {
            out.entry(kind).or_default().push(r.scores.clone());
        }
    }
    out
}

pub fn load_scored(path: &Path) -> Result<Vec<ScoredRecord>> {
    Ok(crate::trace::read_jsonl(path, LoadMode::Strict, |_: &ScoredRecord| Ok(()))?.records)
}
