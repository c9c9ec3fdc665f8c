use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use anchorlens::backend::http::{ContextRendering, HttpConfig, ENV_API_BASE, ENV_API_KEY};
use anchorlens::backend::refine::{refine_answer, RefineConfig, Sampling};
use anchorlens::backend::{BackendHandle, GenParams, RetryPolicy};
use anchorlens::pipeline::{
    condition_samples, load_scored, run_generate_pipeline, run_score_pipeline, BackendSelection,
    Metric, PipelineConfig, PipelineInput,
};
use anchorlens::report::{aggregate_report, scatter_rows, write_scatter_csv};
use anchorlens::skeleton::{
    extract_blocks, invariance_probe, lint_reason_block, lint_skeleton_with, parse_skeleton,
    LintConfig,
};
use anchorlens::trace::{load_pairs, LoadMode};
use anchorlens::zones::{calibrate, classify, write_distribution_csv, zone_distribution};
use anchorlens::{ConditionKind, Error, Method, ZoneModel};

#[derive(Parser)]
#[command(
    name = "anchorlens",
    version,
    about = "Answer-anchoring diagnostics for reasoning traces"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate (or load) traces and compute anchoring metrics.
    Score(ScoreArgs),
    /// Generate traces only.
    Generate(GenerateArgs),
    /// Behavioral zone calibration and classification.
    #[command(subcommand)]
    Zones(ZonesCommand),
    /// Skeleton tooling.
    #[command(subcommand)]
    Skeleton(SkeletonCommand),
    /// Refine an answer by rollout, judge and synthesis loops.
    Refine(RefineArgs),
    /// Aggregate scored records into a per-method table.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendKind {
    None,
    Http,
    Replay,
    Toy,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rendering {
    Chatml,
    Raw,
}

#[derive(Args)]
struct BackendArgs {
    #[arg(long, value_enum, default_value = "none")]
    backend: BackendKind,
    /// Model name sent to the HTTP endpoint.
    #[arg(long)]
    model: Option<String>,
    /// Endpoint base URL; falls back to the environment.
    #[arg(long)]
    api_base: Option<String>,
    /// Replay store (JSONL) for `--backend replay`.
    #[arg(long)]
    replay: Option<PathBuf>,
    /// Toy model JSON for `--backend toy`.
    #[arg(long)]
    toy_model: Option<PathBuf>,
    /// Record every call into a replay store.
    #[arg(long)]
    record: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "chatml")]
    rendering: Rendering,
    #[arg(long, default_value_t = 4)]
    parallelism: usize,
    /// Attempts per request including the first.
    #[arg(long, default_value_t = 3)]
    max_attempts: u32,
    #[arg(long, default_value_t = 300)]
    timeout_secs: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.6)]
    temperature: f64,
    #[arg(long, default_value_t = 0.95)]
    top_p: f64,
    #[arg(long, default_value_t = 4096)]
    max_tokens: u32,
    #[arg(long, default_value_t = 20)]
    top_logprobs: u8,
}

impl BackendArgs {
    fn selection(&self) -> Result<BackendSelection, Error> {
        let need = |v: &Option<PathBuf>, flag: &str| {
            v.clone()
                .ok_or_else(|| Error::Config(format!("{flag} is required for this backend")))
        };
        Ok(match self.backend {
            BackendKind::None => BackendSelection::None,
            BackendKind::Replay => BackendSelection::Replay {
                path: need(&self.replay, "--replay")?,
            },
            BackendKind::Toy => BackendSelection::Toy {
                model: need(&self.toy_model, "--toy-model")?,
                record: self.record.clone(),
            },
            BackendKind::Http => {
                let model = self
                    .model
                    .clone()
                    .ok_or_else(|| Error::Config("--model is required for http".into()))?;
                let mut config = match &self.api_base {
                    Some(base) => {
                        let mut c = HttpConfig::new(base, model);
                        c.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
                        c
                    }
                    None => HttpConfig::from_env(model)?,
                };
                config.timeout = Duration::from_secs(self.timeout_secs);
                config.rendering = match self.rendering {
                    Rendering::Chatml => ContextRendering::ChatMl,
                    Rendering::Raw => ContextRendering::Raw,
                };
                BackendSelection::Http {
                    config,
                    record: self.record.clone(),
                }
            }
        })
    }

    fn retry(&self) -> RetryPolicy {
        RetryPolicy {
            max_attempts: self.max_attempts.max(1),
            ..RetryPolicy::default()
        }
    }

    fn params(&self) -> GenParams {
        GenParams {
            temperature: self.temperature,
            top_p: self.top_p,
            max_tokens: self.max_tokens,
            seed: None,
            top_logprobs: self.top_logprobs,
        }
    }

    fn handle(&self) -> Result<BackendHandle, Error> {
        self.selection()?
            .build(self.parallelism, self.retry(), self.seed)?
            .ok_or_else(|| {
                Error::Config(format!(
                    "this command needs a backend; see --backend ({ENV_API_BASE} for http)"
                ))
            })
    }
}

fn parse_list<T: std::str::FromStr>(raw: &str) -> Result<Vec<T>, Error>
where
    T::Err: std::fmt::Display,
{
    raw.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| Error::Config(e.to_string())))
        .collect()
}

#[derive(Args)]
struct CommonRun {
    /// Comma-separated: NEU,SUP,AUG_SUP,SSR or condition names.
    #[arg(long, default_value = "NEU,SUP,AUG_SUP,SSR")]
    methods: String,
    /// Use the four reference conditions instead of --methods.
    #[arg(long)]
    conditions: bool,
    #[arg(long, short)]
    out: PathBuf,
    /// SSR skeleton and reasoning in two calls.
    #[arg(long)]
    two_call_ssr: bool,
    /// Skip malformed input lines instead of failing.
    #[arg(long)]
    lenient: bool,
    #[arg(long)]
    function_words: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

impl CommonRun {
    fn config(&self, input: PipelineInput) -> Result<PipelineConfig, Error> {
        let mut cfg = PipelineConfig::new(input, &self.out);
        cfg.methods = if self.conditions {
            ConditionKind::ALL
                .into_iter()
                .map(Method::Condition)
                .collect()
        } else {
            parse_list(&self.methods)?
        };
        cfg.backend = self.backend.selection()?;
        cfg.seed = self.backend.seed;
        cfg.parallelism = self.backend.parallelism;
        cfg.retry = self.backend.retry();
        cfg.gen_params = self.backend.params();
        cfg.two_call_ssr = self.two_call_ssr;
        cfg.load_mode = if self.lenient {
            LoadMode::Lenient
        } else {
            LoadMode::Strict
        };
        cfg.function_words = self.function_words.clone();
        Ok(cfg)
    }
}

#[derive(Args)]
struct ScoreArgs {
    /// Query/answer pairs; traces are generated.
    #[arg(long, conflicts_with = "traces", required_unless_present = "traces")]
    pairs: Option<PathBuf>,
    /// Existing trace records.
    #[arg(long)]
    traces: Option<PathBuf>,
    #[arg(long, default_value = "lex,ent,prob")]
    metrics: String,
    #[arg(long, default_value_t = anchorlens::DEFAULT_TAU_G)]
    tau_g: f64,
    #[command(flatten)]
    run: CommonRun,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    run: CommonRun,
}

#[derive(Subcommand)]
enum ZonesCommand {
    /// Fit centroids from scored reference-condition records.
    Calibrate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Assign zones and emit the distribution and scatter tables.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum SkeletonCommand {
    /// Lint a skeleton file (and optionally the matching reasoning).
    Lint {
        file: PathBuf,
        #[arg(long)]
        answer: Option<PathBuf>,
        #[arg(long)]
        reason: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        max_words: usize,
    },
    /// Split an SSR completion into its two blocks.
    Extract { file: PathBuf },
    /// Per-step answer-leak estimate for a skeleton.
    Probe {
        skeleton: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        id: String,
        #[command(flatten)]
        backend: BackendArgs,
    },
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    query: String,
    #[arg(long, default_value_t = 4)]
    rollouts: usize,
    #[arg(long, default_value_t = 2)]
    slots: usize,
    #[arg(long, default_value_t = 2)]
    sample_size: usize,
    #[arg(long, default_value_t = 2)]
    loops: usize,
    #[arg(long)]
    score_weighted: bool,
    /// Audit log destination (JSON).
    #[arg(long)]
    audit: Option<PathBuf>,
    #[command(flatten)]
    backend: BackendArgs,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long, default_value = "NEU")]
    baseline: String,
    #[arg(long, default_value_t = 100.0)]
    scale: f64,
    #[arg(long, short)]
    out: PathBuf,
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn json(value: &impl serde::Serialize) -> Result<String, Error> {
    Ok(serde_json::to_string_pretty(value)?)
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::Score(a) => {
            let input = match (&a.pairs, &a.traces) {
                (Some(p), _) => PipelineInput::Pairs(p.clone()),
                (None, Some(t)) => PipelineInput::Traces(t.clone()),
                (None, None) => {
                    return Err(Error::Config("--pairs or --traces is required".into()))
                }
            };
            let mut cfg = a.run.config(input)?;
            cfg.metrics = parse_list::<Metric>(&a.metrics)?
                .into_iter()
                .collect::<BTreeSet<_>>();
            cfg.tau_g = a.tau_g;
            let outcome = run_score_pipeline(&cfg)?;
            eprintln!("{}\nwrote {}", outcome.summary, outcome.output.display());
            Ok(outcome.summary.exit_code() as u8)
        }
        Command::Generate(a) => {
            let cfg = a.run.config(PipelineInput::Pairs(a.pairs.clone()))?;
            let outcome = run_generate_pipeline(&cfg)?;
            eprintln!("{}\nwrote {}", outcome.summary, outcome.output.display());
            Ok(outcome.summary.exit_code() as u8)
        }
        Command::Zones(ZonesCommand::Calibrate { scores, out }) => {
            let model = calibrate(&condition_samples(&load_scored(&scores)?))?;
            model.save(&out)?;
            eprintln!("wrote {}", out.display());
            Ok(0)
        }
        Command::Zones(ZonesCommand::Classify { model, scores, out }) => {
            let model = ZoneModel::load(&model)?;
            let records = load_scored(&scores)?;
            fs::create_dir_all(&out)?;
            let labels: Vec<serde_json::Value> = records
                .iter()
                .map(|r| {
                    let zone = classify(&r.scores, &model).ok();
                    serde_json::json!({ "id": r.record.pair.id, "method": r.record.method, "zone": zone })
                })
                .collect();
            let lines: Vec<String> = labels.iter().map(serde_json::Value::to_string).collect();
            fs::write(out.join("zones.jsonl"), lines.join("\n") + "\n")?;
            let dist = zone_distribution(
                records
                    .iter()
                    .map(|r| (r.record.method, classify(&r.scores, &model).ok())),
            );
            write_distribution_csv(&dist, fs::File::create(out.join("zone_distribution.csv"))?)?;
            write_scatter_csv(
                &scatter_rows(&records, &model),
                fs::File::create(out.join("scatter.csv"))?,
            )?;
            eprintln!(
                "wrote zones.jsonl, zone_distribution.csv, scatter.csv to {}",
                out.display()
            );
            Ok(0)
        }
        Command::Skeleton(SkeletonCommand::Lint {
            file,
            answer,
            reason,
            max_words,
        }) => {
            let skeleton = parse_skeleton(&read(&file)?)?;
            let answer = answer.map(|p| read(&p)).transpose()?.unwrap_or_default();
            let config = LintConfig {
                max_words,
                check_leaks: !answer.is_empty(),
                ..LintConfig::default()
            };
            let mut report = lint_skeleton_with(&skeleton, &answer, &config);
            if let Some(r) = reason {
                report
                    .violations
                    .extend(lint_reason_block(&read(&r)?, &skeleton).violations);
            }
            println!("{}", json(&report)?);
            Ok(if report.has_errors() { 2 } else { 0 })
        }
        Command::Skeleton(SkeletonCommand::Extract { file }) => {
            let blocks = extract_blocks(&read(&file)?)?;
            let value = serde_json::json!({
                "summary": blocks.summary,
                "reason": blocks.reason,
                "outside": blocks.outside,
                "warnings": blocks.warnings,
            });
            println!("{}", json(&value)?);
            Ok(0)
        }
        Command::Skeleton(SkeletonCommand::Probe {
            skeleton,
            pairs,
            id,
            backend,
        }) => {
            let skeleton = parse_skeleton(&read(&skeleton)?)?;
            let pair = load_pairs(&pairs, LoadMode::Strict)?
                .records
                .into_iter()
                .find(|p| p.id == id)
                .ok_or_else(|| Error::Config(format!("pair `{id}` not found")))?;
            let report = invariance_probe(&backend.handle()?, &skeleton, &pair)?;
            println!("{}", json(&report)?);
            Ok(0)
        }
        Command::Refine(a) => {
            let cfg = RefineConfig {
                n_rollouts: a.rollouts,
                slots: a.slots,
                sample_size: a.sample_size,
                loops: a.loops,
                sampling: if a.score_weighted {
                    Sampling::ScoreWeighted
                } else {
                    Sampling::Uniform
                },
                seed: a.backend.seed,
                params: a.backend.params(),
                ..RefineConfig::default()
            };
            cfg.validate()?;
            let outcome = refine_answer(&a.backend.handle()?, &a.query, &cfg)?;
            if let Some(path) = &a.audit {
                fs::write(path, json(&outcome.audit)?)?;
            }
            println!("{}", outcome.answer);
            Ok(0)
        }
        Command::Report(a) => {
            let baseline: Method = a.baseline.parse().map_err(Error::Config)?;
            let records = load_scored(&a.scores)?;
            let report = aggregate_report(&records, a.scale, baseline)?;
            fs::create_dir_all(&a.out)?;
            fs::write(a.out.join("report.md"), report.to_markdown())?;
            report.write_csv(fs::File::create(a.out.join("report.csv"))?)?;
            print!("{}", report.to_markdown());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::NoSuccess { .. } => 3,
                _ => 1,
            })
        }
    }
}
