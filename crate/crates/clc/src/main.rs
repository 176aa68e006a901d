//! The `clc` command line: dialogue-corpus preparation, scoring, and
//! contrastive loss evaluation over embedding files.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use clc::config::{Mode, RunConfig};
use clc::io::{self, jsonl, IoError};
use clc::losses::grad_check::{
    composed_pf_head_check, nbest_grad_check, pf_grad_check, ComposedDims, GradCheckReport,
};
use clc::metrics::{compare_reports, score_records, tokenize, ScoreRecord, ScoreReport};
use clc::pipeline::{build_sessions, detect_repeat_rephrase, inject_errors, TemplateRephraser};
use clc::runner::{
    evaluate_batch_manifest, render_report, run_pipeline, RunError, EXIT_GRAD_CHECK, EXIT_OK,
    EXIT_VALIDATION,
};
use clc::tensor::mean_pool_rows;

const EXIT_CODE_HELP: &str = "\
Exit codes:
  0  success
  1  other failure
  2  parse failure (manifest, config, or embedding header)
  3  shape mismatch (tensor dimensions or batch layout)
  4  missing embeddings
  5  empty input corpus
  6  validation found errors
  7  gradient check failed";

#[derive(Parser)]
#[command(name = "clc", version, about = "Contrastive learning losses and dialogue data tooling for conversational ASR", after_long_help = EXIT_CODE_HELP)]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides both the master seed and the injection seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Numeric strictness.
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Input file (JSONL manifest or batch manifest).
    #[arg(long = "in", global = true)]
    input: Option<PathBuf>,
    /// Output file; stdout when omitted.
    #[arg(long = "out", global = true)]
    output: Option<PathBuf>,
    /// Column chunk size for memory-bounded loss evaluation.
    #[arg(long, global = true)]
    chunk_size: Option<usize>,
    /// Hide future context: the future loss term is dropped.
    #[arg(long, global = true)]
    mask_future: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Verify,
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Group a timestamped event stream into sessions.
    BuildSessions,
    /// Label repeats and rephrases via semantic vector matching.
    Detect,
    /// Inject synthetic repeat/rephrase turns into candidate sessions.
    Inject,
    /// Drop turns whose hypothesis shows excessive deletions.
    Filter,
    /// Score {ref, hyp | nbest} lines: WER, SER, oracle WER.
    Score,
    /// Relative improvements between two score reports.
    Compare { baseline: PathBuf, system: PathBuf },
    /// Evaluate losses over a batch manifest of embedding files.
    LossEval,
    /// Verify analytic gradients against central finite differences.
    GradCheck {
        /// Random instances per suite.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Maximum relative error tolerated.
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Full chain: sessions, injection, detection, losses, metrics.
    RunPipeline,
    /// Schema-check a JSONL manifest and report diagnostics.
    Validate,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CLC_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

/// Assembles the effective config from `--config` plus flag overrides.
fn effective_config(cli: &Cli) -> Result<RunConfig, RunError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.injection.rng_seed = seed;
    }
    if let Some(mode) = cli.mode {
        cfg.mode = match mode {
            ModeArg::Verify => Mode::Verify,
            ModeArg::Fast => Mode::Fast,
        };
    }
    if let Some(input) = &cli.input {
        cfg.paths.input = Some(input.clone());
    }
    if let Some(output) = &cli.output {
        cfg.paths.output = Some(output.clone());
    }
    if cli.chunk_size.is_some() {
        cfg.chunk_size = cli.chunk_size;
    }
    if cli.mask_future {
        cfg.mask_future = true;
    }
    Ok(cfg)
}

fn input_path(cfg: &RunConfig) -> Result<PathBuf, RunError> {
    cfg.paths
        .input
        .clone()
        .ok_or_else(|| RunError::Parse("no input: pass --in or set paths.input".into()))
}

fn emit(cfg: &RunConfig, text: &str) -> Result<(), RunError> {
    match &cfg.paths.output {
        Some(path) => std::fs::write(path, text)
            .map_err(|e| RunError::Other(format!("{}: {e}", path.display()))),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| RunError::Other(e.to_string())),
    }
}

fn emit_records(cfg: &RunConfig, records: &[jsonl::TurnRecord]) -> Result<(), RunError> {
    match &cfg.paths.output {
        Some(path) => Ok(jsonl::write_turns(path, records)?),
        None => {
            let mut out = String::new();
            for r in records {
                out.push_str(&serde_json::to_string(r).expect("records serialize"));
                out.push('\n');
            }
            emit(cfg, &out)
        }
    }
}

/// Reads the per-turn WER for injection: the manifest value when
/// present, else the top-hypothesis alignment, else zero.
fn wer_map(records: &[jsonl::TurnRecord]) -> HashMap<String, f64> {
    let mut map = HashMap::new();
    for (line, record) in records.iter().enumerate() {
        let id = record
            .event_id
            .clone()
            .unwrap_or_else(|| format!("e{:05}", line + 1));
        let wer = record.wer.unwrap_or_else(|| {
            record
                .hyp_transcripts
                .iter()
                .max_by(|a, b| a.score.total_cmp(&b.score))
                .map(|top| {
                    clc::metrics::align(&tokenize(&record.transcript), &tokenize(&top.text)).wer()
                })
                .unwrap_or(0.0)
        });
        map.insert(id, wer);
    }
    map
}

fn run(cli: Cli) -> Result<i32, RunError> {
    let cfg = effective_config(&cli)?;
    match &cli.command {
        Command::BuildSessions => {
            let input = input_path(&cfg)?;
            let records = jsonl::read_turns(&input)?;
            let events = records
                .into_iter()
                .enumerate()
                .map(|(line, r)| r.into_event(line + 1))
                .collect();
            let sessions = build_sessions(events, &cfg.session)?;
            emit_records(&cfg, &jsonl::session_turn_records(&sessions, &[]))?;
            Ok(EXIT_OK)
        }
        Command::Detect => {
            let input = input_path(&cfg)?;
            let records = jsonl::read_turns(&input)?;
            let (sessions, _) = jsonl::records_to_sessions(records);
            let mut labels = Vec::new();
            for session in &sessions {
                let mut embeddings = HashMap::new();
                for turn in session.user_turns() {
                    let reference = turn.embedding_ref.as_deref().ok_or_else(|| {
                        RunError::MissingEmbeddings(format!(
                            "user turn {} has no embedding_ref",
                            turn.event_id
                        ))
                    })?;
                    let frames = io::read_matrix(&io::resolve_ref(&input, reference))
                        .map_err(clce_as_run_error)?;
                    embeddings.insert(turn.event_id.clone(), mean_pool_rows(&frames)?);
                }
                labels.extend(detect_repeat_rephrase(
                    session,
                    &embeddings,
                    cfg.similarity_threshold,
                )?);
            }
            emit_records(&cfg, &jsonl::session_turn_records(&sessions, &labels))?;
            Ok(EXIT_OK)
        }
        Command::Inject => {
            let input = input_path(&cfg)?;
            let records = jsonl::read_turns(&input)?;
            let wer = wer_map(&records);
            let (sessions, existing_labels) = jsonl::records_to_sessions(records);
            let (injected, mut labels) =
                inject_errors(&sessions, &wer, &cfg.injection, &TemplateRephraser::new())?;
            let mut all_labels = existing_labels;
            all_labels.append(&mut labels);
            emit_records(&cfg, &jsonl::session_turn_records(&injected, &all_labels))?;
            Ok(EXIT_OK)
        }
        Command::Filter => {
            let input = input_path(&cfg)?;
            let records = jsonl::read_turns(&input)?;
            let kept: Vec<jsonl::TurnRecord> = records
                .into_iter()
                .enumerate()
                .filter(|(line, r)| {
                    let id = r
                        .event_id
                        .clone()
                        .unwrap_or_else(|| format!("e{:05}", line + 1));
                    match r
                        .hyp_transcripts
                        .iter()
                        .max_by(|a, b| a.score.total_cmp(&b.score))
                    {
                        Some(top) => {
                            let alignment =
                                clc::metrics::align(&tokenize(&r.transcript), &tokenize(&top.text));
                            let drop = alignment.deletion_rate() > cfg.deletion_rate_threshold;
                            if drop {
                                log::info!(
                                    "dropping {id}: deletion rate {:.3}",
                                    alignment.deletion_rate()
                                );
                            }
                            !drop
                        }
                        None => true,
                    }
                })
                .map(|(_, r)| r)
                .collect();
            emit_records(&cfg, &kept)?;
            Ok(EXIT_OK)
        }
        Command::Score => {
            let input = input_path(&cfg)?;
            let records = read_score_records(&input)?;
            let report = score_records(&records).map_err(RunError::from)?;
            emit(&cfg, &render_report(&report))?;
            Ok(EXIT_OK)
        }
        Command::Compare { baseline, system } => {
            let baseline: ScoreReport = read_json(baseline)?;
            let system: ScoreReport = read_json(system)?;
            let report = compare_reports(&baseline, &system).map_err(RunError::from)?;
            emit(&cfg, &render_report(&report))?;
            Ok(EXIT_OK)
        }
        Command::LossEval => {
            let input = input_path(&cfg)?;
            let report = evaluate_batch_manifest(&input, &cfg)?;
            emit(&cfg, &render_report(&report))?;
            Ok(EXIT_OK)
        }
        Command::GradCheck { seeds, tolerance } => {
            let mut suites = Vec::new();
            for seed in 0..*seeds {
                suites.push(("pf", seed, pf_grad_check(seed, 6, 4, &cfg.loss)));
                suites.push(("nbest", seed, nbest_grad_check(seed, 6, 4, &cfg.loss)));
                suites.push((
                    "composed",
                    seed,
                    composed_pf_head_check(seed, ComposedDims::default(), &cfg.loss),
                ));
            }
            let report = GradCheckSummary::new(&suites, *tolerance);
            emit(&cfg, &render_report(&report))?;
            Ok(if report.passed {
                EXIT_OK
            } else {
                EXIT_GRAD_CHECK
            })
        }
        Command::RunPipeline => {
            let report = run_pipeline(&cfg)?;
            emit(&cfg, &render_report(&report))?;
            Ok(EXIT_OK)
        }
        Command::Validate => {
            let input = input_path(&cfg)?;
            let diagnostics = io::validate_manifest(&input)?;
            emit(&cfg, &render_report(&diagnostics))?;
            let failed = diagnostics
                .iter()
                .any(|d| d.severity == io::Severity::Error);
            Ok(if failed { EXIT_VALIDATION } else { EXIT_OK })
        }
    }
}

fn clce_as_run_error(e: IoError) -> RunError {
    match e {
        IoError::File { .. } => RunError::MissingEmbeddings(e.to_string()),
        other => other.into(),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))
}

fn read_score_records(path: &Path) -> Result<Vec<ScoreRecord>, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))?;
    let mut records = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line)
            .map_err(|e| RunError::Parse(format!("{}:{}: {e}", path.display(), idx + 1)))?;
        records.push(record);
    }
    Ok(records)
}

#[derive(serde::Serialize)]
struct GradCheckSummary {
    passed: bool,
    tolerance: f64,
    max_rel_error: f64,
    suites: Vec<GradCheckSuite>,
}

#[derive(serde::Serialize)]
struct GradCheckSuite {
    suite: String,
    seed: u64,
    max_rel_error: f64,
    passed: bool,
}

impl GradCheckSummary {
    fn new(runs: &[(&str, u64, GradCheckReport)], tolerance: f64) -> Self {
        let suites: Vec<GradCheckSuite> = runs
            .iter()
            .map(|(name, seed, report)| GradCheckSuite {
                suite: name.to_string(),
                seed: *seed,
                max_rel_error: report.max_rel_error(),
                passed: report.passes(tolerance),
            })
            .collect();
        let max_rel_error = suites.iter().map(|s| s.max_rel_error).fold(0.0, f64::max);
        GradCheckSummary {
            passed: suites.iter().all(|s| s.passed),
            tolerance,
            max_rel_error,
            suites,
        }
    }
}
