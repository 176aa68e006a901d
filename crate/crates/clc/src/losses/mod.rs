//! Contrastive fine-tuning losses with hand-derived analytic gradients.
//!
//! Two loss families share one similarity convention (dot product of
//! L2-normalized vectors, scaled by a temperature):
//!
//! * the past/future loss: per-sample InfoNCE rows against the batch of
//!   future (resp. past) context embeddings, weighted `alpha`/`beta`
//!   and averaged over the batch;
//! * the n-best loss: per-sample contrast of a current embedding
//!   against that sample's own hypothesis embeddings, pulling toward
//!   the top hypothesis for successful turns and pushing toward the
//!   best alternative for turns that triggered a repeat or rephrase.
//!
//! Both return gradients with respect to the raw (pre-normalization)
//! input vectors; the chain rule through the normalization is applied
//! here, so head outputs can be fed in directly. A memory-bounded
//! evaluation path for the past/future loss lives in [`chunked`], and
//! finite-difference verification harnesses in [`grad_check`].

pub mod chunked;
pub mod grad_check;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{dot_slices, l2_normalize, log_sum_exp, Matrix, TensorError, Vector};

/// Inputs to [`info_nce_row`] must be unit-norm within this tolerance.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("input {index} is not L2-normalized (norm {norm})")]
    NotNormalized { index: usize, norm: f64 },
    #[error("contrastive batch needs at least 2 samples, got {n}")]
    BatchTooSmall { n: usize },
    #[error("sample {sample} triggered a repeat/rephrase but has no alternative hypothesis")]
    NoAlternativeHypothesis { sample: usize },
    #[error("chunk size {chunk_size} invalid for batch of {n}")]
    BadChunkSize { chunk_size: usize, n: usize },
    #[error("non-finite loss component")]
    NonFinite,
    #[error("shape mismatch: {context}")]
    Shape { context: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Every scalar weight of the loss family.
///
/// Defaults are the most effective values found for each family:
/// `alpha = 1.0`, `beta = 0.7`, `tau = 0.1` for the past/future loss and
/// `gamma = 0.1`, `kappa = 1.0` for the n-best loss, with both terms
/// added at full weight (`lambda = delta = 1.0`) to the overall loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the future InfoNCE term.
    pub alpha: f64,
    /// Weight of the past InfoNCE term.
    pub beta: f64,
    /// Softmax temperature.
    pub tau: f64,
    /// Weight of the negative (repeat/rephrase) n-best term.
    pub gamma: f64,
    /// Weight of the positive (success) n-best term.
    pub kappa: f64,
    /// Weight of the past/future loss in the overall loss.
    pub lambda: f64,
    /// Weight of the n-best loss in the overall loss.
    pub delta: f64,
    /// Replace the hard max over alternative hypotheses with a smooth
    /// log-sum-exp. Off by default; the hard max is the reference
    /// behavior and the smooth variant trades fidelity for lower
    /// gradient variance.
    pub smoothed_negatives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 0.7,
            tau: 0.1,
            gamma: 0.1,
            kappa: 1.0,
            lambda: 1.0,
            delta: 1.0,
            smoothed_negatives: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let weights = [
            self.alpha,
            self.beta,
            self.gamma,
            self.kappa,
            self.lambda,
            self.delta,
        ];
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(LossError::Shape {
                context: format!("tau must be > 0, got {}", self.tau),
            });
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(LossError::Shape {
                context: "weights must be finite and >= 0".into(),
            });
        }
        Ok(())
    }
}

/// A batch of current/past/future context embeddings (raw head outputs,
/// one triple per sample).
#[derive(Debug, Clone)]
pub struct PfBatch {
    pub current: Vec<Vector>,
    pub past: Vec<Vector>,
    pub future: Vec<Vector>,
}

impl PfBatch {
    /// Validates equal counts and a consistent embedding dimension.
    pub fn new(
        current: Vec<Vector>,
        past: Vec<Vector>,
        future: Vec<Vector>,
    ) -> Result<Self, LossError> {
        if current.len() != past.len() || current.len() != future.len() {
            return Err(LossError::Shape {
                context: format!(
                    "counts differ: current={}, past={}, future={}",
                    current.len(),
                    past.len(),
                    future.len()
                ),
            });
        }
        let dim = current.first().map(Vector::dim);
        for v in current.iter().chain(&past).chain(&future) {
            if Some(v.dim()) != dim {
                return Err(LossError::Shape {
                    context: format!("embedding dims differ: {} vs {:?}", v.dim(), dim),
                });
            }
        }
        Ok(Self {
            current,
            past,
            future,
        })
    }

    pub fn len(&self) -> usize {
        self.current.len()
    }

    pub fn is_empty(&self) -> bool {
        self.current.is_empty()
    }
}

/// Gradients of the past/future loss with respect to each raw input.
#[derive(Debug, Clone)]
pub struct PfGrads {
    pub current: Vec<Vector>,
    pub past: Vec<Vector>,
    pub future: Vec<Vector>,
}

impl PfGrads {
    fn zeros(n: usize, dim: usize) -> Self {
        Self {
            current: vec![Vector::zeros(dim); n],
            past: vec![Vector::zeros(dim); n],
            future: vec![Vector::zeros(dim); n],
        }
    }
}

/// Whether an utterance triggered a repeat/rephrase or was successful.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleLabel {
    /// Member of the repeat/rephrase set; contributes the negative term.
    Rephrase,
    /// Member of the success set; contributes the positive term.
    Success,
}

/// One utterance: its current embedding and the semantic embeddings of
/// its top-K decoded hypotheses, best first.
#[derive(Debug, Clone)]
pub struct NBestSample {
    pub current: Vector,
    pub hypotheses: Vec<Vector>,
    pub label: SampleLabel,
}

#[derive(Debug, Clone, Default)]
pub struct NBestBatch {
    pub samples: Vec<NBestSample>,
}

/// Gradients of the n-best loss, parallel to the batch layout.
#[derive(Debug, Clone)]
pub struct NBestGrads {
    pub current: Vec<Vector>,
    pub hypotheses: Vec<Vec<Vector>>,
}

pub(crate) struct NormalizedSet {
    pub unit: Vec<Vector>,
    pub norms: Vec<f64>,
}

pub(crate) fn normalize_set(vectors: &[Vector]) -> Result<NormalizedSet, LossError> {
    let mut unit = Vec::with_capacity(vectors.len());
    let mut norms = Vec::with_capacity(vectors.len());
    for v in vectors {
        let norm = v.norm();
        unit.push(l2_normalize(v)?);
        norms.push(norm);
    }
    Ok(NormalizedSet { unit, norms })
}

/// Chain rule through `x -> x / |x|`: projects out the radial component
/// and rescales by the input norm.
pub(crate) fn chain_through_normalization(norm: f64, unit: &Vector, grad_unit: &Vector) -> Vector {
    let radial = dot_slices(grad_unit.as_slice(), unit.as_slice());
    let data = grad_unit
        .as_slice()
        .iter()
        .zip(unit.as_slice())
        .map(|(g, u)| (g - radial * u) / norm)
        .collect();
    Vector::new(data).expect("finite chain-rule output")
}

fn check_unit(v: &Vector, index: usize) -> Result<(), LossError> {
    let norm = v.norm();
    if (norm - 1.0).abs() > NORMALIZATION_TOLERANCE {
        return Err(LossError::NotNormalized { index, norm });
    }
    Ok(())
}

/// One InfoNCE row: `-log(exp(s_pos / tau) / sum_k exp(s_k / tau))` over
/// already-normalized inputs. Always non-negative.
pub fn info_nce_row(
    anchor: &Vector,
    candidates: &[Vector],
    positive_index: usize,
    tau: f64,
) -> Result<f64, LossError> {
    if candidates.is_empty() {
        return Err(LossError::Shape {
            context: "no candidates".into(),
        });
    }
    if positive_index >= candidates.len() {
        return Err(LossError::Shape {
            context: format!(
                "positive index {positive_index} out of {}",
                candidates.len()
            ),
        });
    }
    check_unit(anchor, 0)?;
    for (i, c) in candidates.iter().enumerate() {
        check_unit(c, i)?;
        if c.dim() != anchor.dim() {
            return Err(LossError::Shape {
                context: format!("candidate {i} dim {} vs anchor {}", c.dim(), anchor.dim()),
            });
        }
    }
    let sims: Vec<f64> = candidates
        .iter()
        .map(|c| dot_slices(anchor.as_slice(), c.as_slice()) / tau)
        .collect();
    let lse = log_sum_exp(&sims)?;
    Ok(lse - sims[positive_index])
}

/// The full pairwise InfoNCE matrix: entry `(i, j)` treats candidate `j`
/// as the positive for anchor `i`. The past/future loss consumes only
/// the diagonal; the full form is exposed for analysis.
pub fn pairwise_info_nce(
    anchors: &[Vector],
    candidates: &[Vector],
    tau: f64,
) -> Result<Matrix, LossError> {
    let n = anchors.len();
    let m = candidates.len();
    for (i, c) in candidates.iter().enumerate() {
        check_unit(c, i)?;
    }
    let mut out = Matrix::zeros(n, m);
    for (i, anchor) in anchors.iter().enumerate() {
        check_unit(anchor, i)?;
        let sims: Vec<f64> = candidates
            .iter()
            .map(|c| dot_slices(anchor.as_slice(), c.as_slice()) / tau)
            .collect();
        let lse = log_sum_exp(&sims)?;
        for (j, s) in sims.iter().enumerate() {
            out.set(i, j, lse - s);
        }
    }
    Ok(out)
}

/// Accumulates one direction (current against `candidates`) of the
/// past/future loss. `coef = weight / (N * tau)` scales the gradient
/// contributions; the raw per-row losses are summed into the return
/// value for the caller to weight.
///
/// Gradient accumulation order is significant: the chunked evaluator
/// reproduces exactly this sequence so a single full-width chunk is
/// bit-identical to this path.
fn accumulate_direction(
    current: &NormalizedSet,
    candidates: &NormalizedSet,
    tau: f64,
    coef: f64,
    g_current: &mut [Vector],
    g_candidates: &mut [Vector],
) -> f64 {
    let n = current.unit.len();
    let mut loss_sum = 0.0;
    let mut sims = vec![0.0; n];
    for i in 0..n {
        let anchor = &current.unit[i];
        for (k, s) in sims.iter_mut().enumerate() {
            *s = dot_slices(anchor.as_slice(), candidates.unit[k].as_slice()) / tau;
        }
        let lse = log_sum_exp(&sims).expect("finite similarities");
        loss_sum += lse - sims[i];
        for k in 0..n {
            let w = (sims[k] - lse).exp();
            g_current[i].axpy(coef * w, &candidates.unit[k]);
            g_candidates[k].axpy(coef * w, anchor);
        }
        g_current[i].axpy(-coef, &candidates.unit[i]);
        g_candidates[i].axpy(-coef, anchor);
    }
    loss_sum
}

fn chain_set(set: &NormalizedSet, grads_unit: &[Vector]) -> Vec<Vector> {
    set.unit
        .iter()
        .zip(&set.norms)
        .zip(grads_unit)
        .map(|((unit, norm), g)| chain_through_normalization(*norm, unit, g))
        .collect()
}

/// Past/future contrastive loss over a batch, with gradients for every
/// raw input vector. Dense reference path: materializes each full
/// similarity row; the memory-bounded equivalent is
/// [`chunked::pf_loss_chunked`].
pub fn pf_loss(batch: &PfBatch, cfg: &LossConfig) -> Result<(f64, PfGrads), LossError> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall { n });
    }
    let dim = batch.current[0].dim();
    let mut grads = PfGrads::zeros(n, dim);
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        return Ok((0.0, grads));
    }

    // Only the directions with live weights get normalized; a masked or
    // disabled side may hold placeholder vectors.
    let current = normalize_set(&batch.current)?;
    let past = if cfg.beta > 0.0 {
        Some(normalize_set(&batch.past)?)
    } else {
        None
    };
    let future = if cfg.alpha > 0.0 {
        Some(normalize_set(&batch.future)?)
    } else {
        None
    };

    let mut g_current_unit = vec![Vector::zeros(dim); n];
    let mut g_past_unit = vec![Vector::zeros(dim); n];
    let mut g_future_unit = vec![Vector::zeros(dim); n];

    let mut loss_future = 0.0;
    let mut loss_past = 0.0;
    if let Some(future) = &future {
        let coef = cfg.alpha / (n as f64 * cfg.tau);
        loss_future = accumulate_direction(
            &current,
            future,
            cfg.tau,
            coef,
            &mut g_current_unit,
            &mut g_future_unit,
        );
    }
    if let Some(past) = &past {
        let coef = cfg.beta / (n as f64 * cfg.tau);
        loss_past = accumulate_direction(
            &current,
            past,
            cfg.tau,
            coef,
            &mut g_current_unit,
            &mut g_past_unit,
        );
    }

    let loss = (cfg.alpha * loss_future + cfg.beta * loss_past) / n as f64;
    grads.current = chain_set(&current, &g_current_unit);
    if let Some(past) = &past {
        grads.past = chain_set(past, &g_past_unit);
    }
    if let Some(future) = &future {
        grads.future = chain_set(future, &g_future_unit);
    }
    Ok((loss, grads))
}

/// Value of one direction without gradient work.
fn direction_loss_value(current: &NormalizedSet, candidates: &NormalizedSet, tau: f64) -> f64 {
    let n = current.unit.len();
    let mut loss_sum = 0.0;
    let mut sims = vec![0.0; n];
    for i in 0..n {
        let anchor = &current.unit[i];
        for (k, s) in sims.iter_mut().enumerate() {
            *s = dot_slices(anchor.as_slice(), candidates.unit[k].as_slice()) / tau;
        }
        let lse = log_sum_exp(&sims).expect("finite similarities");
        loss_sum += lse - sims[i];
    }
    loss_sum
}

/// Forward-only past/future loss, for callers that do not need
/// gradients (fast-mode evaluation and monitoring).
pub fn pf_loss_value(batch: &PfBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall { n });
    }
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        return Ok(0.0);
    }
    let current = normalize_set(&batch.current)?;
    let mut loss_future = 0.0;
    let mut loss_past = 0.0;
    if cfg.alpha > 0.0 {
        loss_future = direction_loss_value(&current, &normalize_set(&batch.future)?, cfg.tau);
    }
    if cfg.beta > 0.0 {
        loss_past = direction_loss_value(&current, &normalize_set(&batch.past)?, cfg.tau);
    }
    Ok((cfg.alpha * loss_future + cfg.beta * loss_past) / n as f64)
}

/// Forward-only n-best loss.
pub fn nbest_loss_value(batch: &NBestBatch, cfg: &LossConfig) -> Result<f64, LossError> {
    cfg.validate()?;
    let n_rephrase = batch
        .samples
        .iter()
        .filter(|s| s.label == SampleLabel::Rephrase)
        .count();
    let n_success = batch.samples.len() - n_rephrase;
    let mut sum_neg = 0.0;
    let mut sum_pos = 0.0;
    for (i, sample) in batch.samples.iter().enumerate() {
        let k = sample.hypotheses.len();
        if k == 0 {
            return Err(LossError::Shape {
                context: format!("sample {i} has no hypotheses"),
            });
        }
        if sample.label == SampleLabel::Rephrase && k < 2 {
            return Err(LossError::NoAlternativeHypothesis { sample: i });
        }
        let anchor = l2_normalize(&sample.current)?;
        let hyp_set = normalize_set(&sample.hypotheses)?;
        let sims: Vec<f64> = hyp_set
            .unit
            .iter()
            .map(|h| dot_slices(anchor.as_slice(), h.as_slice()) / cfg.tau)
            .collect();
        let lse = log_sum_exp(&sims)?;
        match sample.label {
            SampleLabel::Success => sum_pos += lse - sims[0],
            SampleLabel::Rephrase if cfg.smoothed_negatives => {
                sum_neg += lse - log_sum_exp(&sims[1..])?;
            }
            SampleLabel::Rephrase => {
                let best = sims[1..].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                sum_neg += lse - best;
            }
        }
    }
    let neg_term = if n_rephrase == 0 {
        0.0
    } else {
        cfg.gamma / n_rephrase as f64 * sum_neg
    };
    let pos_term = if n_success == 0 {
        0.0
    } else {
        cfg.kappa / n_success as f64 * sum_pos
    };
    Ok(neg_term + pos_term)
}

/// N-best loss: negative (repeat/rephrase) and positive (success) terms,
/// each normalized by its set size; an empty set contributes zero.
///
/// At a tie in the max over alternative hypotheses, the lowest-index
/// maximizer receives the full subgradient.
pub fn nbest_loss(batch: &NBestBatch, cfg: &LossConfig) -> Result<(f64, NBestGrads), LossError> {
    cfg.validate()?;
    let n_rephrase = batch
        .samples
        .iter()
        .filter(|s| s.label == SampleLabel::Rephrase)
        .count();
    let n_success = batch.samples.len() - n_rephrase;

    let mut grads = NBestGrads {
        current: batch
            .samples
            .iter()
            .map(|s| Vector::zeros(s.current.dim()))
            .collect(),
        hypotheses: batch
            .samples
            .iter()
            .map(|s| {
                s.hypotheses
                    .iter()
                    .map(|h| Vector::zeros(h.dim()))
                    .collect()
            })
            .collect(),
    };

    let mut sum_neg = 0.0;
    let mut sum_pos = 0.0;
    for (i, sample) in batch.samples.iter().enumerate() {
        let k = sample.hypotheses.len();
        if k == 0 {
            return Err(LossError::Shape {
                context: format!("sample {i} has no hypotheses"),
            });
        }
        if sample.label == SampleLabel::Rephrase && k < 2 {
            return Err(LossError::NoAlternativeHypothesis { sample: i });
        }
        for (j, h) in sample.hypotheses.iter().enumerate() {
            if h.dim() != sample.current.dim() {
                return Err(LossError::Shape {
                    context: format!(
                        "sample {i} hypothesis {j} dim {} vs current {}",
                        h.dim(),
                        sample.current.dim()
                    ),
                });
            }
        }

        let weight = match sample.label {
            SampleLabel::Rephrase => cfg.gamma / n_rephrase as f64,
            SampleLabel::Success => cfg.kappa / n_success as f64,
        };
        let current_norm = sample.current.norm();
        let anchor = l2_normalize(&sample.current)?;
        let hyp_set = normalize_set(&sample.hypotheses)?;

        let sims: Vec<f64> = hyp_set
            .unit
            .iter()
            .map(|h| dot_slices(anchor.as_slice(), h.as_slice()) / cfg.tau)
            .collect();
        let lse = log_sum_exp(&sims)?;
        let weights: Vec<f64> = sims.iter().map(|s| (s - lse).exp()).collect();

        let mut g_anchor_unit = Vector::zeros(anchor.dim());
        let mut g_hyp_unit = vec![Vector::zeros(anchor.dim()); k];

        match sample.label {
            SampleLabel::Success => {
                sum_pos += lse - sims[0];
                for j in 0..k {
                    let delta = if j == 0 { 1.0 } else { 0.0 };
                    let c = weight / cfg.tau * (weights[j] - delta);
                    g_anchor_unit.axpy(c, &hyp_set.unit[j]);
                    g_hyp_unit[j].axpy(c, &anchor);
                }
            }
            SampleLabel::Rephrase if cfg.smoothed_negatives => {
                // Smooth variant: the max over alternatives becomes a
                // log-sum-exp over hypotheses 2..K.
                let alt_lse = log_sum_exp(&sims[1..])?;
                sum_neg += lse - alt_lse;
                for j in 0..k {
                    let alt = if j == 0 {
                        0.0
                    } else {
                        (sims[j] - alt_lse).exp()
                    };
                    let c = weight / cfg.tau * (weights[j] - alt);
                    g_anchor_unit.axpy(c, &hyp_set.unit[j]);
                    g_hyp_unit[j].axpy(c, &anchor);
                }
            }
            SampleLabel::Rephrase => {
                let mut best = 1;
                for j in 2..k {
                    if sims[j] > sims[best] {
                        best = j;
                    }
                }
                sum_neg += lse - sims[best];
                for j in 0..k {
                    let delta = if j == best { 1.0 } else { 0.0 };
                    let c = weight / cfg.tau * (weights[j] - delta);
                    g_anchor_unit.axpy(c, &hyp_set.unit[j]);
                    g_hyp_unit[j].axpy(c, &anchor);
                }
            }
        }

        grads.current[i] = chain_through_normalization(current_norm, &anchor, &g_anchor_unit);
        grads.hypotheses[i] = chain_set(&hyp_set, &g_hyp_unit);
    }

    let neg_term = if n_rephrase == 0 {
        0.0
    } else {
        cfg.gamma / n_rephrase as f64 * sum_neg
    };
    let pos_term = if n_success == 0 {
        0.0
    } else {
        cfg.kappa / n_success as f64 * sum_pos
    };
    Ok((neg_term + pos_term, grads))
}

/// Combines the externally supplied task loss with the two auxiliary
/// terms: `l_asr + lambda * l_pf + delta * l_nbest`.
pub fn overall_loss(
    l_asr: f64,
    l_pf: f64,
    l_nbest: f64,
    cfg: &LossConfig,
) -> Result<f64, LossError> {
    cfg.validate()?;
    let total = l_asr + cfg.lambda * l_pf + cfg.delta * l_nbest;
    if !(l_asr.is_finite() && l_pf.is_finite() && l_nbest.is_finite() && total.is_finite()) {
        return Err(LossError::NonFinite);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::grad_check::{random_nbest_batch, random_pf_batch};
    use super::*;

    /// ln(1 + 1/e), the InfoNCE row value for sims (1, 0) at tau = 1.
    const NCE_SIMS_10_TAU1: f64 = 0.3132616875182228;

    fn unit(data: Vec<f64>) -> Vector {
        l2_normalize(&Vector::new(data).unwrap()).unwrap()
    }

    /// Basis-vector batch: current/past/future all equal to e_i, so the
    /// diagonal similarities are 1 and everything else is 0.
    fn orthogonal_pf_batch(n: usize) -> PfBatch {
        let basis = |i: usize| {
            let mut data = vec![0.0; n];
            data[i] = 1.0;
            Vector::new(data).unwrap()
        };
        PfBatch::new(
            (0..n).map(basis).collect(),
            (0..n).map(basis).collect(),
            (0..n).map(basis).collect(),
        )
        .unwrap()
    }

    #[test]
    fn info_nce_single_candidate_is_zero() {
        let anchor = unit(vec![0.3, -0.8]);
        let got = info_nce_row(&anchor, std::slice::from_ref(&anchor), 0, 0.37).unwrap();
        assert_eq!(got, 0.0);
    }

    #[test]
    fn info_nce_two_candidates_tau_one() {
        let anchor = unit(vec![1.0, 0.0]);
        let cands = [unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let got = info_nce_row(&anchor, &cands, 0, 1.0).unwrap();
        assert!((got - NCE_SIMS_10_TAU1).abs() < 1e-12);
    }

    #[test]
    fn info_nce_temperature_sharpening() {
        // Same sims (1, 0) at tau = 0.1: ln(1 + e^-10).
        let anchor = unit(vec![1.0, 0.0]);
        let cands = [unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let got = info_nce_row(&anchor, &cands, 0, 0.1).unwrap();
        assert!((got - 4.539889921686465e-5).abs() < 1e-15);
    }

    #[test]
    fn info_nce_monotone_in_temperature() {
        let anchor = unit(vec![1.0, 0.0]);
        let cands = [unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])];
        let mut prev = f64::INFINITY;
        for tau in [1.0, 0.7, 0.4, 0.2, 0.1, 0.05] {
            let got = info_nce_row(&anchor, &cands, 0, tau).unwrap();
            assert!(
                got < prev,
                "loss should fall as tau falls on a positive-dominant row"
            );
            prev = got;
        }
    }

    #[test]
    fn info_nce_rejects_unnormalized_inputs() {
        let anchor = Vector::new(vec![2.0, 0.0]).unwrap();
        let cands = [unit(vec![1.0, 0.0])];
        assert!(matches!(
            info_nce_row(&anchor, &cands, 0, 1.0),
            Err(LossError::NotNormalized { .. })
        ));
    }

    #[test]
    fn pf_loss_zero_weights() {
        let batch = random_pf_batch(3, 4, 3);
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 0.0,
            ..LossConfig::default()
        };
        let (loss, grads) = pf_loss(&batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads
            .current
            .iter()
            .all(|g| g.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn pf_loss_orthogonal_two_sample_batch() {
        let cfg = LossConfig {
            alpha: 1.0,
            beta: 1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let (loss, _) = pf_loss(&orthogonal_pf_batch(2), &cfg).unwrap();
        assert!((loss - 2.0 * NCE_SIMS_10_TAU1).abs() < 1e-12);
    }

    #[test]
    fn pf_loss_rejects_single_sample() {
        let batch = PfBatch::new(
            vec![unit(vec![1.0, 0.0])],
            vec![unit(vec![1.0, 0.0])],
            vec![unit(vec![1.0, 0.0])],
        )
        .unwrap();
        assert_eq!(
            pf_loss(&batch, &LossConfig::default()).unwrap_err(),
            LossError::BatchTooSmall { n: 1 }
        );
    }

    #[test]
    fn pf_loss_permutation_invariant() {
        let batch = random_pf_batch(11, 6, 4);
        let cfg = LossConfig::default();
        let (base, _) = pf_loss(&batch, &cfg).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let permuted = PfBatch::new(
            perm.iter().map(|&i| batch.current[i].clone()).collect(),
            perm.iter().map(|&i| batch.past[i].clone()).collect(),
            perm.iter().map(|&i| batch.future[i].clone()).collect(),
        )
        .unwrap();
        let (shuffled, _) = pf_loss(&permuted, &cfg).unwrap();
        assert!((base - shuffled).abs() < 1e-10);
    }

    #[test]
    fn nbest_all_success_matches_info_nce_example() {
        let cfg = LossConfig {
            kappa: 1.0,
            gamma: 1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let batch = NBestBatch {
            samples: vec![NBestSample {
                current: Vector::new(vec![3.0, 0.0]).unwrap(),
                hypotheses: vec![
                    Vector::new(vec![2.0, 0.0]).unwrap(),
                    Vector::new(vec![0.0, 0.5]).unwrap(),
                ],
                label: SampleLabel::Success,
            }],
        };
        let (loss, _) = nbest_loss(&batch, &cfg).unwrap();
        assert!((loss - NCE_SIMS_10_TAU1).abs() < 1e-12);
    }

    #[test]
    fn nbest_single_rephrase_sample() {
        // sims (1, 0): the only alternative sits at similarity 0, so
        // L_neg = ln(e + 1).
        let cfg = LossConfig {
            gamma: 1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let batch = NBestBatch {
            samples: vec![NBestSample {
                current: Vector::new(vec![1.0, 0.0]).unwrap(),
                hypotheses: vec![
                    Vector::new(vec![1.0, 0.0]).unwrap(),
                    Vector::new(vec![0.0, 1.0]).unwrap(),
                ],
                label: SampleLabel::Rephrase,
            }],
        };
        let (loss, _) = nbest_loss(&batch, &cfg).unwrap();
        assert!((loss - 1.3132616875182228).abs() < 1e-12);
    }

    #[test]
    fn nbest_zero_weights() {
        let cfg = LossConfig {
            gamma: 0.0,
            kappa: 0.0,
            ..LossConfig::default()
        };
        let batch = random_nbest_batch(5, 4, 3);
        let (loss, _) = nbest_loss(&batch, &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn nbest_rephrase_needs_alternative() {
        let batch = NBestBatch {
            samples: vec![NBestSample {
                current: Vector::new(vec![1.0, 0.0]).unwrap(),
                hypotheses: vec![Vector::new(vec![1.0, 0.0]).unwrap()],
                label: SampleLabel::Rephrase,
            }],
        };
        assert_eq!(
            nbest_loss(&batch, &LossConfig::default()).unwrap_err(),
            LossError::NoAlternativeHypothesis { sample: 0 }
        );
    }

    #[test]
    fn nbest_tie_gradient_goes_to_lowest_index() {
        // Hypotheses 2 and 3 tie exactly; only hypothesis 2 (index 1)
        // should receive the maximizer's gradient.
        let cfg = LossConfig {
            gamma: 1.0,
            kappa: 1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let batch = NBestBatch {
            samples: vec![NBestSample {
                current: Vector::new(vec![1.0, 0.0, 0.0]).unwrap(),
                hypotheses: vec![
                    Vector::new(vec![1.0, 0.0, 0.0]).unwrap(),
                    Vector::new(vec![0.0, 1.0, 0.0]).unwrap(),
                    Vector::new(vec![0.0, 0.0, 1.0]).unwrap(),
                ],
                label: SampleLabel::Rephrase,
            }],
        };
        let (_, grads) = nbest_loss(&batch, &cfg).unwrap();
        // Both ties have softmax weight w; the winner's gradient carries
        // the extra -1 and so must differ from the loser's.
        let g1 = grads.hypotheses[0][1].norm();
        let g2 = grads.hypotheses[0][2].norm();
        assert!(
            g1 > g2 + 0.1,
            "winner grad {g1} should dominate loser grad {g2}"
        );
    }

    #[test]
    fn nbest_empty_batch_is_zero() {
        let (loss, grads) = nbest_loss(&NBestBatch::default(), &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.current.is_empty());
    }

    #[test]
    fn overall_loss_examples() {
        let unit_cfg = LossConfig {
            lambda: 1.0,
            delta: 1.0,
            ..LossConfig::default()
        };
        assert_eq!(overall_loss(1.0, 0.5, 0.25, &unit_cfg).unwrap(), 1.75);

        let off = LossConfig {
            lambda: 0.0,
            delta: 0.0,
            ..LossConfig::default()
        };
        assert_eq!(overall_loss(2.5, 9.0, 9.0, &off).unwrap(), 2.5);

        let got = overall_loss(2.0, 0.626524, 0.313262, &unit_cfg).unwrap();
        assert!((got - 2.939786).abs() < 1e-12);
    }

    #[test]
    fn overall_loss_rejects_non_finite() {
        let cfg = LossConfig::default();
        assert_eq!(
            overall_loss(f64::NAN, 0.0, 0.0, &cfg).unwrap_err(),
            LossError::NonFinite
        );
        assert_eq!(
            overall_loss(f64::INFINITY, 0.0, 0.0, &cfg).unwrap_err(),
            LossError::NonFinite
        );
    }

    #[test]
    fn pairwise_matrix_diagonal_matches_rows() {
        let batch = random_pf_batch(9, 4, 3);
        let current = normalize_set(&batch.current).unwrap();
        let future = normalize_set(&batch.future).unwrap();
        let m = pairwise_info_nce(&current.unit, &future.unit, 0.5).unwrap();
        for i in 0..4 {
            let row = info_nce_row(&current.unit[i], &future.unit, i, 0.5).unwrap();
            assert!((m.get(i, i) - row).abs() < 1e-12);
        }
    }

    #[test]
    fn value_paths_agree_with_gradient_paths() {
        for seed in 0..10 {
            let cfg = LossConfig::default();
            let pf = random_pf_batch(seed, 5, 4);
            assert_eq!(
                pf_loss_value(&pf, &cfg).unwrap(),
                pf_loss(&pf, &cfg).unwrap().0
            );
            let nb = random_nbest_batch(seed, 5, 4);
            assert_eq!(
                nbest_loss_value(&nb, &cfg).unwrap(),
                nbest_loss(&nb, &cfg).unwrap().0
            );
        }
    }

    #[test]
    fn masked_future_ignores_placeholder_vectors() {
        // alpha = 0 means the future side is never normalized, so even
        // all-zero placeholders pass through.
        let cfg = LossConfig {
            alpha: 0.0,
            beta: 1.0,
            tau: 1.0,
            ..LossConfig::default()
        };
        let batch = PfBatch::new(
            vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
            vec![unit(vec![1.0, 0.0]), unit(vec![0.0, 1.0])],
            vec![Vector::zeros(2), Vector::zeros(2)],
        )
        .unwrap();
        let (loss, grads) = pf_loss(&batch, &cfg).unwrap();
        assert!(loss > 0.0);
        assert!(grads
            .future
            .iter()
            .all(|g| g.as_slice().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn losses_are_non_negative_and_scale_invariant() {
        for seed in 0..20 {
            let cfg = LossConfig::default();
            let batch = random_pf_batch(seed, 5, 4);
            let (loss, _) = pf_loss(&batch, &cfg).unwrap();
            assert!(loss >= 0.0);

            // Rescaling any raw input leaves the loss unchanged.
            let mut scaled = batch.clone();
            for (i, v) in scaled.current.iter_mut().enumerate() {
                v.scale(0.5 + i as f64);
            }
            for v in scaled.future.iter_mut() {
                v.scale(7.0);
            }
            let (scaled_loss, _) = pf_loss(&scaled, &cfg).unwrap();
            assert!((loss - scaled_loss).abs() < 1e-10);
        }
    }
}
