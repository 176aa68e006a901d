//! Memory-bounded evaluation of the past/future loss.
//!
//! Contrastive batches want every sample in one denominator, which
//! naively means an `N x N` similarity matrix. This path never builds
//! it. Two passes over column chunks suffice:
//!
//! 1. per-row log-sum-exp denominators, folded chunk by chunk through a
//!    streaming max + rescaled sum ([`OnlineLogSumExp`]);
//! 2. per-chunk softmax weights, accumulated straight into the gradient
//!    buffers.
//!
//! The only similarity scratch is one `chunk_size` buffer, reused for
//! every row, chunk, and direction. A [`WorkspaceMeter`] counts those
//! scratch elements so tests can assert the peak stays within the
//! `chunk_size * d` budget. Values and gradients match [`pf_loss`]
//! entry for entry; with a single full-width chunk the arithmetic is
//! identical operation for operation, so the results are bit-equal.
//!
//! [`pf_loss`]: super::pf_loss

use crate::tensor::{dot_slices, OnlineLogSumExp, Vector};

use super::{chain_set, normalize_set, LossConfig, LossError, NormalizedSet, PfBatch, PfGrads};

/// Counts elements of similarity scratch currently allocated, and the
/// peak ever allocated, for one evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct WorkspaceMeter {
    current: usize,
    peak: usize,
}

impl WorkspaceMeter {
    fn allocate(&mut self, elements: usize) {
        self.current += elements;
        self.peak = self.peak.max(self.current);
    }

    fn release(&mut self, elements: usize) {
        self.current -= elements;
    }

    pub fn peak_elements(&self) -> usize {
        self.peak
    }
}

/// Instrumentation gathered by [`pf_loss_chunked_instrumented`].
#[derive(Debug, Clone, Copy)]
pub struct ChunkStats {
    pub chunk_size: usize,
    /// Peak similarity-scratch footprint in `f64` elements.
    pub peak_sim_workspace: usize,
}

impl ChunkStats {
    /// The budget the evaluator promises: scratch never exceeds
    /// `chunk_size * d` elements.
    pub fn within_budget(&self, dim: usize) -> bool {
        self.peak_sim_workspace <= self.chunk_size * dim
    }
}

/// One direction of the loss, streamed over column chunks. Mirrors the
/// accumulation order of the dense path exactly.
#[allow(clippy::too_many_arguments)]
fn accumulate_direction_chunked(
    current: &NormalizedSet,
    candidates: &NormalizedSet,
    tau: f64,
    coef: f64,
    chunk_size: usize,
    sims: &mut [f64],
    g_current: &mut [Vector],
    g_candidates: &mut [Vector],
) -> f64 {
    let n = current.unit.len();
    let mut row_lse = vec![0.0; n];
    let mut row_diag = vec![0.0; n];
    let mut loss_sum = 0.0;

    // Pass 1: denominators and the diagonal (positive) similarity.
    for i in 0..n {
        let anchor = &current.unit[i];
        let mut acc = OnlineLogSumExp::new();
        let mut start = 0;
        while start < n {
            let end = (start + chunk_size).min(n);
            let buf = &mut sims[..end - start];
            for (off, s) in buf.iter_mut().enumerate() {
                *s = dot_slices(anchor.as_slice(), candidates.unit[start + off].as_slice()) / tau;
            }
            acc.merge(&OnlineLogSumExp::summarize(buf));
            if (start..end).contains(&i) {
                row_diag[i] = buf[i - start];
            }
            start = end;
        }
        row_lse[i] = acc.finish();
        loss_sum += row_lse[i] - row_diag[i];
    }

    // Pass 2: softmax weights, straight into the gradient buffers.
    for i in 0..n {
        let anchor = &current.unit[i];
        let lse = row_lse[i];
        let mut start = 0;
        while start < n {
            let end = (start + chunk_size).min(n);
            let buf = &mut sims[..end - start];
            for (off, s) in buf.iter_mut().enumerate() {
                *s = dot_slices(anchor.as_slice(), candidates.unit[start + off].as_slice()) / tau;
            }
            for (off, s) in buf.iter().enumerate() {
                let k = start + off;
                let w = (s - lse).exp();
                g_current[i].axpy(coef * w, &candidates.unit[k]);
                g_candidates[k].axpy(coef * w, anchor);
            }
            start = end;
        }
        g_current[i].axpy(-coef, &candidates.unit[i]);
        g_candidates[i].axpy(-coef, anchor);
    }

    loss_sum
}

/// Chunked past/future loss with workspace instrumentation.
pub fn pf_loss_chunked_instrumented(
    batch: &PfBatch,
    cfg: &LossConfig,
    chunk_size: usize,
) -> Result<(f64, PfGrads, ChunkStats), LossError> {
    cfg.validate()?;
    let n = batch.len();
    if n < 2 {
        return Err(LossError::BatchTooSmall { n });
    }
    if chunk_size == 0 || chunk_size > n {
        return Err(LossError::BadChunkSize { chunk_size, n });
    }
    let dim = batch.current[0].dim();
    let mut grads = PfGrads::zeros(n, dim);
    let mut meter = WorkspaceMeter::default();
    if cfg.alpha == 0.0 && cfg.beta == 0.0 {
        let stats = ChunkStats {
            chunk_size,
            peak_sim_workspace: meter.peak_elements(),
        };
        return Ok((0.0, grads, stats));
    }

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

    meter.allocate(chunk_size);
    let mut sims = vec![0.0; chunk_size];

    let mut loss_future = 0.0;
    let mut loss_past = 0.0;
    if let Some(future) = &future {
        let coef = cfg.alpha / (n as f64 * cfg.tau);
        loss_future = accumulate_direction_chunked(
            &current,
            future,
            cfg.tau,
            coef,
            chunk_size,
            &mut sims,
            &mut g_current_unit,
            &mut g_future_unit,
        );
    }
    if let Some(past) = &past {
        let coef = cfg.beta / (n as f64 * cfg.tau);
        loss_past = accumulate_direction_chunked(
            &current,
            past,
            cfg.tau,
            coef,
            chunk_size,
            &mut sims,
            &mut g_current_unit,
            &mut g_past_unit,
        );
    }
    drop(sims);
    meter.release(chunk_size);

    let loss = (cfg.alpha * loss_future + cfg.beta * loss_past) / n as f64;
    grads.current = chain_set(&current, &g_current_unit);
    if let Some(past) = &past {
        grads.past = chain_set(past, &g_past_unit);
    }
    if let Some(future) = &future {
        grads.future = chain_set(future, &g_future_unit);
    }
    let stats = ChunkStats {
        chunk_size,
        peak_sim_workspace: meter.peak_elements(),
    };
    Ok((loss, grads, stats))
}

/// Chunked past/future loss. Same value and gradients as
/// [`super::pf_loss`], computed without materializing the similarity
/// matrix.
pub fn pf_loss_chunked(
    batch: &PfBatch,
    cfg: &LossConfig,
    chunk_size: usize,
) -> Result<(f64, PfGrads), LossError> {
    pf_loss_chunked_instrumented(batch, cfg, chunk_size).map(|(loss, grads, _)| (loss, grads))
}
