//! End-to-end pipeline execution: manifest in, JSON report out.
//!
//! The chain is session building, error injection, repeat/rephrase
//! detection, context-batch assembly through the three projection
//! heads, loss evaluation, and corpus scoring. Every stochastic step is
//! a pure function of the config and its seeds, so a fixed seed yields
//! a byte-identical report.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{Mode, RunConfig};
use crate::heads::{head_forward, HeadError, HeadMode, HeadParams};
use crate::io::{self, clce, jsonl, IoError};
use crate::losses::chunked::pf_loss_chunked_instrumented;
use crate::losses::{
    nbest_loss, nbest_loss_value, overall_loss, pf_loss, pf_loss_value, LossConfig, LossError,
    NBestBatch, NBestSample, PfBatch, SampleLabel,
};
use crate::metrics::{corpus_score_aligned, tokenize, AlignmentResult, CorpusScore, MetricsError};
use crate::pipeline::{
    build_sessions, detect_repeat_rephrase, inject_errors, EventRecord, PipelineError,
    RephraseLabel, Session, Speaker, TemplateRephraser,
};
use crate::tensor::{mean_pool_rows, Matrix, TensorError, Vector};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PARSE: i32 = 2;
pub const EXIT_SHAPE: i32 = 3;
pub const EXIT_MISSING_EMBEDDINGS: i32 = 4;
pub const EXIT_EMPTY_CORPUS: i32 = 5;
pub const EXIT_VALIDATION: i32 = 6;
pub const EXIT_GRAD_CHECK: i32 = 7;

/// Pipeline failure, classified for the CLI exit-code contract.
#[derive(Debug, Error)]
pub enum RunError {
    #[error("parse failure: {0}")]
    Parse(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("missing embeddings: {0}")]
    MissingEmbeddings(String),
    #[error("empty input manifest")]
    EmptyCorpus,
    #[error("{0}")]
    Other(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Parse(_) => EXIT_PARSE,
            RunError::Shape(_) => EXIT_SHAPE,
            RunError::MissingEmbeddings(_) => EXIT_MISSING_EMBEDDINGS,
            RunError::EmptyCorpus => EXIT_EMPTY_CORPUS,
            RunError::Other(_) => EXIT_FAILURE,
        }
    }
}

/// Classifies an error raised while reading an embedding file.
fn embedding_error(e: IoError) -> RunError {
    match e {
        IoError::File { .. } => RunError::MissingEmbeddings(e.to_string()),
        IoError::PayloadMismatch { .. } | IoError::NotAVector { .. } => {
            RunError::Shape(e.to_string())
        }
        IoError::BadMagic { .. } | IoError::UnsupportedVersion { .. } => {
            RunError::Parse(e.to_string())
        }
        other => RunError::Other(other.to_string()),
    }
}

impl From<IoError> for RunError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Parse { .. } | IoError::Manifest { .. } | IoError::File { .. } => {
                RunError::Parse(e.to_string())
            }
            IoError::PayloadMismatch { .. } | IoError::NotAVector { .. } => {
                RunError::Shape(e.to_string())
            }
            IoError::BadMagic { .. } | IoError::UnsupportedVersion { .. } => {
                RunError::Parse(e.to_string())
            }
            IoError::Tensor(t) => t.into(),
        }
    }
}

impl From<PipelineError> for RunError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::MissingEmbedding { .. } => RunError::MissingEmbeddings(e.to_string()),
            PipelineError::InvalidConfig { .. } | PipelineError::InvalidEvent { .. } => {
                RunError::Parse(e.to_string())
            }
            PipelineError::Tensor(TensorError::ShapeMismatch { .. }) => {
                RunError::Shape(e.to_string())
            }
            other => RunError::Other(other.to_string()),
        }
    }
}

impl From<LossError> for RunError {
    fn from(e: LossError) -> Self {
        match e {
            LossError::Shape { .. }
            | LossError::BatchTooSmall { .. }
            | LossError::BadChunkSize { .. }
            | LossError::Tensor(TensorError::ShapeMismatch { .. }) => {
                RunError::Shape(e.to_string())
            }
            other => RunError::Other(other.to_string()),
        }
    }
}

impl From<HeadError> for RunError {
    fn from(e: HeadError) -> Self {
        RunError::Shape(e.to_string())
    }
}

impl From<TensorError> for RunError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::ShapeMismatch { .. } => RunError::Shape(e.to_string()),
            other => RunError::Other(other.to_string()),
        }
    }
}

impl From<MetricsError> for RunError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::EmptyCorpus => RunError::EmptyCorpus,
            other => RunError::Other(other.to_string()),
        }
    }
}

/// One loss term in a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub loss: f64,
    pub batch_size: usize,
    /// Euclidean norm of the gradient per input tensor group; absent in
    /// fast mode.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_norms: Option<BTreeMap<String, f64>>,
    /// Peak similarity-scratch elements of the chunked evaluator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peak_sim_workspace: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: CorpusScore,
    /// Scores restricted to turns that triggered a repeat/rephrase.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeat_rephrase: Option<CorpusScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub sessions: usize,
    pub turns: usize,
    pub injected_labels: Vec<RephraseLabel>,
    pub detected_labels: Vec<RephraseLabel>,
    /// Distinct turns that triggered a detected repeat/rephrase.
    pub repeat_rephrase_set_size: usize,
    /// Samples of the n-best batch labeled successful.
    pub success_set_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pf: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest: Option<LossReport>,
    pub l_asr: f64,
    pub overall_loss: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricsReport>,
    pub mask_future: bool,
    pub seed: u64,
}

/// Deterministic pretty JSON with a trailing newline.
pub fn render_report<T: Serialize>(report: &T) -> String {
    let mut text = serde_json::to_string_pretty(report).expect("reports serialize");
    text.push('\n');
    text
}

/// Frame matrices and hypothesis vectors, cached per resolved path.
struct EmbeddingStore {
    manifest: PathBuf,
    frames: HashMap<String, Matrix>,
}

impl EmbeddingStore {
    fn new(manifest: &Path) -> Self {
        Self {
            manifest: manifest.to_path_buf(),
            frames: HashMap::new(),
        }
    }

    fn frames(&mut self, reference: &str) -> Result<&Matrix, RunError> {
        if !self.frames.contains_key(reference) {
            let path = io::resolve_ref(&self.manifest, reference);
            let matrix = clce::read_matrix(&path).map_err(embedding_error)?;
            self.frames.insert(reference.to_string(), matrix);
        }
        Ok(&self.frames[reference])
    }

    fn vector(&self, reference: &str) -> Result<Vector, RunError> {
        let path = io::resolve_ref(&self.manifest, reference);
        clce::read_vector(&path).map_err(embedding_error)
    }
}

fn group_norm(vectors: &[Vector]) -> f64 {
    let mut acc = 0.0;
    for v in vectors {
        for x in v.as_slice() {
            acc += x * x;
        }
    }
    acc.sqrt()
}

fn load_heads(cfg: &RunConfig) -> Result<[HeadParams; 3], RunError> {
    if let Some(paths) = &cfg.paths.head_checkpoints {
        Ok([
            io::load_head(&paths.current)?,
            io::load_head(&paths.past)?,
            io::load_head(&paths.future)?,
        ])
    } else {
        let h = &cfg.head;
        Ok([
            HeadParams::seeded(h.k, h.h, h.d, h.dropout_rate, cfg.seed),
            HeadParams::seeded(h.k, h.h, h.d, h.dropout_rate, cfg.seed.wrapping_add(1)),
            HeadParams::seeded(h.k, h.h, h.d, h.dropout_rate, cfg.seed.wrapping_add(2)),
        ])
    }
}

/// Pooled semantic embedding of a turn: the column mean of its frames.
fn pooled_embedding(store: &mut EmbeddingStore, reference: &str) -> Result<Vector, RunError> {
    Ok(mean_pool_rows(store.frames(reference)?)?)
}

/// Row-stack of the frame matrices of several turns, in turn order.
fn stack_frames(store: &mut EmbeddingStore, turns: &[&EventRecord]) -> Result<Matrix, RunError> {
    let mut mats = Vec::with_capacity(turns.len());
    for t in turns {
        mats.push(
            store
                .frames(t.embedding_ref.as_deref().expect("filtered on Some"))?
                .clone(),
        );
    }
    let refs: Vec<&Matrix> = mats.iter().collect();
    Ok(Matrix::vstack(&refs)?)
}

struct AssembledBatches {
    pf: PfBatch,
    nbest: NBestBatch,
}

/// Builds the loss batches. Past context is the row-stack of all prior
/// embedding-bearing turns in the session, future context the stack of
/// all subsequent ones; turns lacking either side are left out (future
/// is not required when masked). The n-best batch takes every user turn
/// whose hypotheses all carry semantic-embedding references.
fn assemble_batches(
    cfg: &RunConfig,
    sessions: &[Session],
    rephrase_sources: &BTreeSet<String>,
    heads: &[HeadParams; 3],
    store: &mut EmbeddingStore,
) -> Result<AssembledBatches, RunError> {
    let [current_head, past_head, future_head] = heads;
    let mut current = Vec::new();
    let mut past = Vec::new();
    let mut future = Vec::new();
    let mut nbest = NBestBatch::default();

    for session in sessions {
        let with_frames: Vec<&EventRecord> = session
            .turns
            .iter()
            .filter(|t| t.speaker == Speaker::User && t.embedding_ref.is_some())
            .collect();
        for (pos, turn) in with_frames.iter().enumerate() {
            let reference = turn.embedding_ref.as_deref().expect("filtered on Some");
            let has_past = pos > 0;
            let has_future = pos + 1 < with_frames.len();
            if has_past && (cfg.mask_future || has_future) {
                let current_frames = store.frames(reference)?.clone();
                let (current_vec, _) = head_forward(current_head, &current_frames, HeadMode::Eval)?;
                let (past_vec, _) = head_forward(
                    past_head,
                    &stack_frames(store, &with_frames[..pos])?,
                    HeadMode::Eval,
                )?;
                let future_vec = if cfg.mask_future {
                    // Placeholder: the future term is dropped, so this
                    // vector is never normalized or read.
                    Vector::new(vec![1.0; past_vec.dim()]).expect("finite placeholder")
                } else {
                    head_forward(
                        future_head,
                        &stack_frames(store, &with_frames[pos + 1..])?,
                        HeadMode::Eval,
                    )?
                    .0
                };
                current.push(current_vec);
                past.push(past_vec);
                future.push(future_vec);
            }

            if !turn.hypotheses.is_empty()
                && turn.hypotheses.iter().all(|h| h.embedding_ref.is_some())
            {
                let current_frames = store.frames(reference)?.clone();
                let (current_vec, _) = head_forward(current_head, &current_frames, HeadMode::Eval)?;
                let mut hypotheses = Vec::with_capacity(turn.hypotheses.len());
                for h in &turn.hypotheses {
                    hypotheses.push(store.vector(h.embedding_ref.as_deref().expect("checked"))?);
                }
                let label = if rephrase_sources.contains(&turn.event_id) {
                    SampleLabel::Rephrase
                } else {
                    SampleLabel::Success
                };
                nbest.samples.push(NBestSample {
                    current: current_vec,
                    hypotheses,
                    label,
                });
            }
        }
    }
    let pf = PfBatch::new(current, past, future)?;
    Ok(AssembledBatches { pf, nbest })
}

fn evaluate_pf(cfg: &RunConfig, batch: &PfBatch) -> Result<Option<LossReport>, RunError> {
    if batch.len() < 2 {
        return Ok(None);
    }
    let loss_cfg = LossConfig {
        alpha: if cfg.mask_future { 0.0 } else { cfg.loss.alpha },
        ..cfg.loss
    };
    let report = match (cfg.mode, cfg.chunk_size) {
        (Mode::Fast, _) => LossReport {
            loss: pf_loss_value(batch, &loss_cfg)?,
            batch_size: batch.len(),
            grad_norms: None,
            peak_sim_workspace: None,
        },
        (Mode::Verify, Some(chunk)) => {
            let (loss, grads, stats) = pf_loss_chunked_instrumented(batch, &loss_cfg, chunk)?;
            LossReport {
                loss,
                batch_size: batch.len(),
                grad_norms: Some(BTreeMap::from([
                    ("current".to_string(), group_norm(&grads.current)),
                    ("past".to_string(), group_norm(&grads.past)),
                    ("future".to_string(), group_norm(&grads.future)),
                ])),
                peak_sim_workspace: Some(stats.peak_sim_workspace),
            }
        }
        (Mode::Verify, None) => {
            let (loss, grads) = pf_loss(batch, &loss_cfg)?;
            LossReport {
                loss,
                batch_size: batch.len(),
                grad_norms: Some(BTreeMap::from([
                    ("current".to_string(), group_norm(&grads.current)),
                    ("past".to_string(), group_norm(&grads.past)),
                    ("future".to_string(), group_norm(&grads.future)),
                ])),
                peak_sim_workspace: None,
            }
        }
    };
    Ok(Some(report))
}

fn evaluate_nbest(cfg: &RunConfig, batch: &NBestBatch) -> Result<Option<LossReport>, RunError> {
    if batch.samples.is_empty() {
        return Ok(None);
    }
    let report = match cfg.mode {
        Mode::Fast => LossReport {
            loss: nbest_loss_value(batch, &cfg.loss)?,
            batch_size: batch.samples.len(),
            grad_norms: None,
            peak_sim_workspace: None,
        },
        Mode::Verify => {
            let (loss, grads) = nbest_loss(batch, &cfg.loss)?;
            let hyp_norm = {
                let mut acc = 0.0;
                for sample in &grads.hypotheses {
                    for v in sample {
                        for x in v.as_slice() {
                            acc += x * x;
                        }
                    }
                }
                acc.sqrt()
            };
            LossReport {
                loss,
                batch_size: batch.samples.len(),
                grad_norms: Some(BTreeMap::from([
                    ("current".to_string(), group_norm(&grads.current)),
                    ("hypotheses".to_string(), hyp_norm),
                ])),
                peak_sim_workspace: None,
            }
        }
    };
    Ok(Some(report))
}

/// Reference/top-hypothesis alignments for scoring, keyed by turn id.
fn scoring_alignments(sessions: &[Session]) -> Vec<(String, AlignmentResult)> {
    let mut alignments = Vec::new();
    for session in sessions {
        for turn in session.user_turns() {
            if let Some(top) = turn.top_hypothesis() {
                let alignment =
                    crate::metrics::align(&tokenize(&turn.transcript), &tokenize(&top.text));
                alignments.push((turn.event_id.clone(), alignment));
            }
        }
    }
    alignments
}

/// Runs the whole chain on `cfg.paths.input`.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineReport, RunError> {
    cfg.validate()?;
    let input = cfg
        .paths
        .input
        .clone()
        .ok_or_else(|| RunError::Parse("config has no input path".into()))?;
    let records = jsonl::read_turns(&input)?;
    if records.is_empty() {
        return Err(RunError::EmptyCorpus);
    }

    let events: Vec<EventRecord> = records
        .iter()
        .enumerate()
        .map(|(line, r)| r.clone().into_event(line + 1))
        .collect();
    let provided_wer: HashMap<String, f64> = records
        .iter()
        .enumerate()
        .filter_map(|(line, r)| {
            r.wer.map(|w| {
                (
                    r.event_id
                        .clone()
                        .unwrap_or_else(|| format!("e{:05}", line + 1)),
                    w,
                )
            })
        })
        .collect();

    let sessions = build_sessions(events, &cfg.session)?;

    // WER per user turn: the manifest value when present, else aligned
    // against the top hypothesis, else zero (undecoded turns cannot be
    // injection candidates).
    let mut per_turn_wer = HashMap::new();
    for session in &sessions {
        for turn in session.user_turns() {
            let wer = provided_wer
                .get(&turn.event_id)
                .copied()
                .unwrap_or_else(|| {
                    turn.top_hypothesis()
                        .map(|top| {
                            crate::metrics::align(&tokenize(&turn.transcript), &tokenize(&top.text))
                                .wer()
                        })
                        .unwrap_or(0.0)
                });
            per_turn_wer.insert(turn.event_id.clone(), wer);
        }
    }

    let (sessions, injected_labels) = inject_errors(
        &sessions,
        &per_turn_wer,
        &cfg.injection,
        &TemplateRephraser::new(),
    )?;

    // Detection runs over pooled frame embeddings of every user turn.
    let mut store = EmbeddingStore::new(&input);
    let mut detected_labels = Vec::new();
    for session in &sessions {
        let mut embeddings = HashMap::new();
        for turn in session.user_turns() {
            let reference = turn.embedding_ref.as_deref().ok_or_else(|| {
                RunError::MissingEmbeddings(format!(
                    "user turn {} has no embedding_ref",
                    turn.event_id
                ))
            })?;
            embeddings.insert(
                turn.event_id.clone(),
                pooled_embedding(&mut store, reference)?,
            );
        }
        detected_labels.extend(detect_repeat_rephrase(
            session,
            &embeddings,
            cfg.similarity_threshold,
        )?);
    }
    let rephrase_sources: BTreeSet<String> = detected_labels
        .iter()
        .map(|l| l.source_turn_id.clone())
        .collect();

    let heads = load_heads(cfg)?;
    let batches = assemble_batches(cfg, &sessions, &rephrase_sources, &heads, &mut store)?;

    let pf = evaluate_pf(cfg, &batches.pf)?;
    let nbest = evaluate_nbest(cfg, &batches.nbest)?;
    let success_set_size = batches
        .nbest
        .samples
        .iter()
        .filter(|s| s.label == SampleLabel::Success)
        .count();

    let alignments = scoring_alignments(&sessions);
    let metrics = if alignments.is_empty() {
        None
    } else {
        let overall =
            corpus_score_aligned(&alignments.iter().map(|(_, a)| *a).collect::<Vec<_>>())?;
        let slice: Vec<AlignmentResult> = alignments
            .iter()
            .filter(|(id, _)| rephrase_sources.contains(id))
            .map(|(_, a)| *a)
            .collect();
        let repeat_rephrase = if slice.is_empty() {
            None
        } else {
            Some(corpus_score_aligned(&slice)?)
        };
        Some(MetricsReport {
            overall,
            repeat_rephrase,
        })
    };

    let overall = overall_loss(
        cfg.l_asr,
        pf.as_ref().map_or(0.0, |r| r.loss),
        nbest.as_ref().map_or(0.0, |r| r.loss),
        &cfg.loss,
    )?;

    Ok(PipelineReport {
        sessions: sessions.len(),
        turns: sessions.iter().map(|s| s.turns.len()).sum(),
        injected_labels,
        detected_labels,
        repeat_rephrase_set_size: rephrase_sources.len(),
        success_set_size,
        pf,
        nbest,
        l_asr: cfg.l_asr,
        overall_loss: overall,
        metrics,
        mask_future: cfg.mask_future,
        seed: cfg.seed,
    })
}

/// Manifest for `loss-eval`: embedding-vector files making up a
/// past/future batch and/or an n-best batch. Paths resolve relative to
/// the manifest.
#[derive(Debug, Deserialize)]
pub struct BatchManifest {
    #[serde(default)]
    pub pf: Option<PfManifest>,
    #[serde(default)]
    pub nbest: Option<Vec<NBestSampleManifest>>,
}

#[derive(Debug, Deserialize)]
pub struct PfManifest {
    pub current: Vec<String>,
    pub past: Vec<String>,
    pub future: Vec<String>,
}

#[derive(Debug, Deserialize)]
pub struct NBestSampleManifest {
    pub current: String,
    pub hypotheses: Vec<String>,
    pub label: SampleLabel,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossEvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pf: Option<LossReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest: Option<LossReport>,
    pub l_asr: f64,
    pub overall_loss: f64,
}

/// Evaluates the batches named by a manifest file.
pub fn evaluate_batch_manifest(path: &Path, cfg: &RunConfig) -> Result<LossEvalReport, RunError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))?;
    let manifest: BatchManifest = serde_json::from_str(&text)
        .map_err(|e| RunError::Parse(format!("{}: {e}", path.display())))?;
    let store = EmbeddingStore::new(path);

    let pf = match &manifest.pf {
        Some(pf_manifest) => {
            let load = |refs: &[String]| -> Result<Vec<Vector>, RunError> {
                refs.iter().map(|r| store.vector(r)).collect()
            };
            let batch = PfBatch::new(
                load(&pf_manifest.current)?,
                load(&pf_manifest.past)?,
                load(&pf_manifest.future)?,
            )?;
            evaluate_pf(cfg, &batch)?
        }
        None => None,
    };

    let nbest = match &manifest.nbest {
        Some(samples) => {
            let mut batch = NBestBatch::default();
            for s in samples {
                batch.samples.push(NBestSample {
                    current: store.vector(&s.current)?,
                    hypotheses: s
                        .hypotheses
                        .iter()
                        .map(|h| store.vector(h))
                        .collect::<Result<_, _>>()?,
                    label: s.label,
                });
            }
            evaluate_nbest(cfg, &batch)?
        }
        None => None,
    };

    let overall = overall_loss(
        cfg.l_asr,
        pf.as_ref().map_or(0.0, |r| r.loss),
        nbest.as_ref().map_or(0.0, |r| r.loss),
        &cfg.loss,
    )?;
    Ok(LossEvalReport {
        pf,
        nbest,
        l_asr: cfg.l_asr,
        overall_loss: overall,
    })
}
