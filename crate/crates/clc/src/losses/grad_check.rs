//! Finite-difference verification of every analytic gradient.
//!
//! Central differences (`step = 1e-5`, all in `f64`) are the oracle;
//! the analytic paths under test are [`pf_loss`], [`nbest_loss`], the
//! head backward pass, and the composed chain of heads feeding the
//! past/future loss. Checks are deterministic per seed and keep random
//! instances away from the two genuine non-smooth points (ReLU kinks
//! and ties in the n-best max) so the oracle stays valid.
//!
//! [`pf_loss`]: super::pf_loss
//! [`nbest_loss`]: super::nbest_loss

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::heads::{head_backward, head_forward, HeadMode, HeadParams};
use crate::tensor::{dot, Matrix, Vector};

use super::{nbest_loss, pf_loss, LossConfig, NBestBatch, NBestSample, PfBatch, SampleLabel};

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Comparison of one tensor's analytic gradient against the numeric one.
#[derive(Debug, Clone, Serialize)]
pub struct TensorCheck {
    pub name: String,
    pub max_abs_error: f64,
    /// Gap scaled by `max(|analytic|, |numeric|, 1)`. The losses are
    /// O(1), so the unit floor keeps finite-difference noise on near-zero
    /// components from dominating the report.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct GradCheckReport {
    pub entries: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    fn push(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        assert_eq!(analytic.len(), numeric.len(), "tensor {name}");
        let mut max_abs: f64 = 0.0;
        let mut max_rel: f64 = 0.0;
        for (a, n) in analytic.iter().zip(numeric) {
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(1.0);
            max_abs = max_abs.max(abs);
            max_rel = max_rel.max(rel);
        }
        self.entries.push(TensorCheck {
            name: name.to_string(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
}

/// Central-difference gradient of `f` at `x`.
pub fn central_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let plus = f(&probe);
        probe[i] = x[i] - step;
        let minus = f(&probe);
        probe[i] = x[i];
        grad[i] = (plus - minus) / (2.0 * step);
    }
    grad
}

fn random_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vector {
    loop {
        let v = Vector::new((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .expect("finite samples");
        if v.norm() > 0.3 {
            return v;
        }
    }
}

/// Deterministic random batch for the past/future loss.
pub fn random_pf_batch(seed: u64, n: usize, dim: usize) -> PfBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PfBatch::new(
        (0..n).map(|_| random_vector(&mut rng, dim)).collect(),
        (0..n).map(|_| random_vector(&mut rng, dim)).collect(),
        (0..n).map(|_| random_vector(&mut rng, dim)).collect(),
    )
    .expect("equal counts by construction")
}

/// Smallest gap, across repeat/rephrase samples, between the two best
/// alternative-hypothesis similarities. Finite differences are only
/// valid when the max cannot change winner under the probe step.
fn min_alternative_gap(batch: &NBestBatch, tau: f64) -> f64 {
    let mut min_gap = f64::INFINITY;
    for sample in &batch.samples {
        if sample.label != SampleLabel::Rephrase {
            continue;
        }
        let anchor = crate::tensor::l2_normalize(&sample.current).expect("nonzero");
        let mut sims: Vec<f64> = sample.hypotheses[1..]
            .iter()
            .map(|h| {
                let unit = crate::tensor::l2_normalize(h).expect("nonzero");
                dot(&anchor, &unit).expect("dims match") / tau
            })
            .collect();
        if sims.len() < 2 {
            continue;
        }
        sims.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
        min_gap = min_gap.min(sims[0] - sims[1]);
    }
    min_gap
}

/// Deterministic random n-best batch alternating success and
/// repeat/rephrase labels, resampled until every max has a clear winner.
pub fn random_nbest_batch(seed: u64, n: usize, dim: usize) -> NBestBatch {
    for attempt in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1009).wrapping_add(attempt));
        let samples = (0..n)
            .map(|i| {
                let k = rng.gen_range(2..=4);
                NBestSample {
                    current: random_vector(&mut rng, dim),
                    hypotheses: (0..k).map(|_| random_vector(&mut rng, dim)).collect(),
                    label: if i % 2 == 0 {
                        SampleLabel::Success
                    } else {
                        SampleLabel::Rephrase
                    },
                }
            })
            .collect();
        let batch = NBestBatch { samples };
        if min_alternative_gap(&batch, 1.0) > 1e-2 {
            return batch;
        }
    }
    unreachable!("random similarities essentially never tie 100 times in a row")
}

fn flatten_vectors(vs: &[Vector]) -> Vec<f64> {
    vs.iter()
        .flat_map(|v| v.as_slice().iter().copied())
        .collect()
}

fn unflatten_vectors(flat: &[f64], n: usize, dim: usize) -> Vec<Vector> {
    (0..n)
        .map(|i| Vector::new(flat[i * dim..(i + 1) * dim].to_vec()).expect("finite probe"))
        .collect()
}

/// Finite-difference check of [`pf_loss`] gradients on a seeded batch.
pub fn pf_grad_check(seed: u64, n: usize, dim: usize, cfg: &LossConfig) -> GradCheckReport {
    assert!(n >= 2, "contrastive batch needs at least two samples");
    let batch = random_pf_batch(seed, n, dim);
    let (_, grads) = pf_loss(&batch, cfg).expect("valid batch");

    let mut flat = flatten_vectors(&batch.current);
    flat.extend(flatten_vectors(&batch.past));
    flat.extend(flatten_vectors(&batch.future));

    let objective = |x: &[f64]| {
        let nd = n * dim;
        let rebuilt = PfBatch::new(
            unflatten_vectors(&x[..nd], n, dim),
            unflatten_vectors(&x[nd..2 * nd], n, dim),
            unflatten_vectors(&x[2 * nd..], n, dim),
        )
        .expect("shapes preserved");
        pf_loss(&rebuilt, cfg).expect("valid batch").0
    };
    let numeric = central_gradient(objective, &flat, FD_STEP);

    let nd = n * dim;
    let mut report = GradCheckReport::default();
    report.push("current", &flatten_vectors(&grads.current), &numeric[..nd]);
    report.push("past", &flatten_vectors(&grads.past), &numeric[nd..2 * nd]);
    report.push(
        "future",
        &flatten_vectors(&grads.future),
        &numeric[2 * nd..],
    );
    report
}

/// Finite-difference check of [`nbest_loss`] gradients on a seeded batch.
pub fn nbest_grad_check(seed: u64, n: usize, dim: usize, cfg: &LossConfig) -> GradCheckReport {
    let batch = random_nbest_batch(seed, n, dim);
    nbest_grad_check_on(&batch, cfg)
}

/// Same check on a caller-supplied batch (used to probe near-tie cases).
pub fn nbest_grad_check_on(batch: &NBestBatch, cfg: &LossConfig) -> GradCheckReport {
    let (_, grads) = nbest_loss(batch, cfg).expect("valid batch");
    let hyp_counts: Vec<usize> = batch.samples.iter().map(|s| s.hypotheses.len()).collect();
    let labels: Vec<SampleLabel> = batch.samples.iter().map(|s| s.label).collect();
    let dim = batch.samples[0].current.dim();
    let n = batch.samples.len();

    let mut flat = Vec::new();
    for s in &batch.samples {
        flat.extend_from_slice(s.current.as_slice());
        for h in &s.hypotheses {
            flat.extend_from_slice(h.as_slice());
        }
    }

    let rebuild = |x: &[f64]| {
        let mut offset = 0;
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let current = Vector::new(x[offset..offset + dim].to_vec()).expect("finite probe");
            offset += dim;
            let hypotheses = (0..hyp_counts[i])
                .map(|_| {
                    let h = Vector::new(x[offset..offset + dim].to_vec()).expect("finite probe");
                    offset += dim;
                    h
                })
                .collect();
            samples.push(NBestSample {
                current,
                hypotheses,
                label: labels[i],
            });
        }
        NBestBatch { samples }
    };
    let objective = |x: &[f64]| nbest_loss(&rebuild(x), cfg).expect("valid batch").0;
    let numeric = central_gradient(objective, &flat, FD_STEP);

    let mut analytic_current = Vec::new();
    let mut numeric_current = Vec::new();
    let mut analytic_hyps = Vec::new();
    let mut numeric_hyps = Vec::new();
    let mut offset = 0;
    for i in 0..n {
        analytic_current.extend_from_slice(grads.current[i].as_slice());
        numeric_current.extend_from_slice(&numeric[offset..offset + dim]);
        offset += dim;
        for h in &grads.hypotheses[i] {
            analytic_hyps.extend_from_slice(h.as_slice());
            numeric_hyps.extend_from_slice(&numeric[offset..offset + dim]);
            offset += dim;
        }
    }

    let mut report = GradCheckReport::default();
    report.push("current", &analytic_current, &numeric_current);
    report.push("hypotheses", &analytic_hyps, &numeric_hyps);
    report
}

/// Shapes for the composed heads-into-loss check.
#[derive(Debug, Clone, Copy)]
pub struct ComposedDims {
    /// Batch size.
    pub n: usize,
    /// Frame rows per utterance.
    pub frames: usize,
    /// Frame-embedding width.
    pub k: usize,
    /// Head hidden width.
    pub h: usize,
    /// Head output width.
    pub d: usize,
}

impl Default for ComposedDims {
    fn default() -> Self {
        Self {
            n: 4,
            frames: 2,
            k: 3,
            h: 4,
            d: 3,
        }
    }
}

fn flatten_params(p: &HeadParams) -> Vec<f64> {
    let mut out = Vec::new();
    out.extend_from_slice(p.w1.as_slice());
    out.extend_from_slice(p.b1.as_slice());
    out.extend_from_slice(p.ln_gamma.as_slice());
    out.extend_from_slice(p.ln_beta.as_slice());
    out.extend_from_slice(p.w2.as_slice());
    out.extend_from_slice(p.b2.as_slice());
    out
}

fn unflatten_params(flat: &[f64], dims: ComposedDims) -> HeadParams {
    let ComposedDims { k, h, d, .. } = dims;
    let mut at = 0;
    let mut take = |len: usize| {
        let slice = flat[at..at + len].to_vec();
        at += len;
        slice
    };
    HeadParams::new(
        Matrix::new(h, k, take(h * k)).expect("finite probe"),
        Vector::new(take(h)).expect("finite probe"),
        Vector::new(take(h)).expect("finite probe"),
        Vector::new(take(h)).expect("finite probe"),
        Matrix::new(d, h, take(d * h)).expect("finite probe"),
        Vector::new(take(d)).expect("finite probe"),
        0.0,
        0,
    )
    .expect("consistent shapes")
}

const PARAM_TENSOR_NAMES: [&str; 6] = ["w1", "b1", "ln_gamma", "ln_beta", "w2", "b2"];

fn param_tensor_spans(dims: ComposedDims) -> [usize; 6] {
    let ComposedDims { k, h, d, .. } = dims;
    [h * k, h, h, h, d * h, d]
}

/// Random head parameters conditioned for finite-difference probing:
/// positive first-layer biases keep most ReLU units alive (healthy
/// LayerNorm variance), non-trivial affine and output biases keep the
/// output norm away from zero. Every tensor still varies with the seed.
fn random_head_for_check(k: usize, h: usize, d: usize, seed: u64) -> HeadParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |lo: f64, hi: f64, len: usize| -> Vec<f64> {
        (0..len).map(|_| rng.gen_range(lo..hi)).collect()
    };
    let w_bound = (6.0 / (k + h) as f64).sqrt();
    let w1 = Matrix::new(h, k, uniform(-w_bound, w_bound, h * k)).expect("finite samples");
    let b1 = Vector::new(uniform(0.5, 1.5, h)).expect("finite samples");
    let ln_gamma = Vector::new(uniform(0.7, 1.3, h)).expect("finite samples");
    let ln_beta = Vector::new(uniform(-0.3, 0.3, h)).expect("finite samples");
    let w2 = Matrix::new(d, h, uniform(-w_bound, w_bound, d * h)).expect("finite samples");
    let b2 = Vector::new(uniform(0.3, 0.9, d)).expect("finite samples");
    HeadParams::new(w1, b1, ln_gamma, ln_beta, w2, b2, 0.0, seed)
        .expect("consistent shapes by construction")
}

/// Margin test keeping the composed instance where the central
/// difference is trustworthy: away from ReLU kinks, and with LayerNorm
/// variance and output norms large enough that third derivatives stay
/// small; truncation error grows with `1/(var + eps)^(3/2)` and
/// `1/|out|`, and must sit well below the check tolerance at the 1e-5
/// step.
fn composed_instance_is_smooth(heads: &[HeadParams; 3], frames: &[Vec<Matrix>; 3]) -> bool {
    for (head, ctx_frames) in heads.iter().zip(frames) {
        for f in ctx_frames {
            let (_, trace) = match head_forward(head, f, HeadMode::Eval) {
                Ok(ok) => ok,
                Err(_) => return false,
            };
            if trace
                .pre_activation
                .as_slice()
                .iter()
                .any(|z| z.abs() < 1e-2)
            {
                return false;
            }
            if trace.ln_stats.1 < 0.05 {
                return false;
            }
            if trace.output.norm() < 0.5 {
                return false;
            }
        }
    }
    true
}

/// Checks the full chain: three heads embed per-context frames, the
/// outputs feed [`pf_loss`], and gradients flow back through
/// [`head_backward`] into every parameter tensor and every frame matrix.
pub fn composed_pf_head_check(seed: u64, dims: ComposedDims, cfg: &LossConfig) -> GradCheckReport {
    composed_check_with_step(seed, dims, cfg, FD_STEP)
}

fn composed_check_with_step(
    seed: u64,
    dims: ComposedDims,
    cfg: &LossConfig,
    step: f64,
) -> GradCheckReport {
    let ComposedDims {
        n, frames: t, k, ..
    } = dims;
    assert!(n >= 2, "contrastive batch needs at least two samples");

    let (heads, frames) = (0..100)
        .find_map(|attempt| {
            let base = seed.wrapping_mul(2027).wrapping_add(attempt);
            let heads = [
                random_head_for_check(k, dims.h, dims.d, base),
                random_head_for_check(k, dims.h, dims.d, base + 1),
                random_head_for_check(k, dims.h, dims.d, base + 2),
            ];
            let mut rng = ChaCha8Rng::seed_from_u64(base + 3);
            let frames: [Vec<Matrix>; 3] = std::array::from_fn(|_| {
                (0..n)
                    .map(|_| {
                        Matrix::new(t, k, (0..t * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                            .expect("finite samples")
                    })
                    .collect()
            });
            composed_instance_is_smooth(&heads, &frames).then_some((heads, frames))
        })
        .expect("random instances essentially never sit on a kink 100 times in a row");

    // Layout: params of the three heads, then all frame matrices.
    let mut flat = Vec::new();
    for head in &heads {
        flat.extend(flatten_params(head));
    }
    for ctx_frames in &frames {
        for f in ctx_frames {
            flat.extend_from_slice(f.as_slice());
        }
    }
    let params_len = flatten_params(&heads[0]).len();

    let evaluate = |x: &[f64]| -> f64 {
        let rebuilt_heads: Vec<HeadParams> = (0..3)
            .map(|c| unflatten_params(&x[c * params_len..(c + 1) * params_len], dims))
            .collect();
        let mut at = 3 * params_len;
        let mut outputs: [Vec<Vector>; 3] = Default::default();
        for (c, head) in rebuilt_heads.iter().enumerate() {
            for _ in 0..n {
                let f = Matrix::new(t, k, x[at..at + t * k].to_vec()).expect("finite probe");
                at += t * k;
                let (out, _) = head_forward(head, &f, HeadMode::Eval).expect("valid shapes");
                outputs[c].push(out);
            }
        }
        let [current, past, future] = outputs;
        let batch = PfBatch::new(current, past, future).expect("equal counts");
        pf_loss(&batch, cfg).expect("valid batch").0
    };
    let numeric = central_gradient(evaluate, &flat, step);

    // Analytic gradients: loss grads w.r.t. head outputs, then one
    // backward pass per sample and context, summed per parameter.
    let mut traces: [Vec<crate::heads::HeadForwardTrace>; 3] = Default::default();
    let mut outputs: [Vec<Vector>; 3] = Default::default();
    for c in 0..3 {
        for f in &frames[c] {
            let (out, trace) = head_forward(&heads[c], f, HeadMode::Eval).expect("valid shapes");
            outputs[c].push(out);
            traces[c].push(trace);
        }
    }
    let batch = PfBatch::new(outputs[0].clone(), outputs[1].clone(), outputs[2].clone())
        .expect("equal counts");
    let (_, loss_grads) = pf_loss(&batch, cfg).expect("valid batch");
    let per_context_grads = [&loss_grads.current, &loss_grads.past, &loss_grads.future];

    let mut report = GradCheckReport::default();
    let spans = param_tensor_spans(dims);
    let context_names = ["current", "past", "future"];
    let mut frame_analytic = Vec::new();
    let mut analytic_params = Vec::new();
    for c in 0..3 {
        let mut acc = crate::heads::HeadParamGrads::zeros_like(&heads[c]);
        for i in 0..n {
            let (param_grads, frame_grads) =
                head_backward(&heads[c], &traces[c][i], &per_context_grads[c][i])
                    .expect("matching trace");
            acc.accumulate(&param_grads);
            frame_analytic.extend_from_slice(frame_grads.as_slice());
        }
        analytic_params.extend(flatten_params(&HeadParams {
            w1: acc.w1,
            b1: acc.b1,
            ln_gamma: acc.ln_gamma,
            ln_beta: acc.ln_beta,
            w2: acc.w2,
            b2: acc.b2,
            dropout_rate: 0.0,
            rng_seed: 0,
        }));
    }

    let mut at = 0;
    for context in context_names {
        for (name, span) in PARAM_TENSOR_NAMES.iter().zip(spans) {
            report.push(
                &format!("{context}.{name}"),
                &analytic_params[at..at + span],
                &numeric[at..at + span],
            );
            at += span;
        }
    }
    report.push("frames", &frame_analytic, &numeric[at..]);
    report
}

/// Finite-difference check of one head in isolation: the objective is a
/// fixed random linear probe of the output.
pub fn head_grad_check(seed: u64, k: usize, h: usize, d: usize, mode: HeadMode) -> GradCheckReport {
    let dims = ComposedDims {
        n: 2,
        frames: 3,
        k,
        h,
        d,
    };
    let (params, frames, probe) = (0..100)
        .find_map(|attempt| {
            let base = seed.wrapping_mul(4099).wrapping_add(attempt);
            let mut params = random_head_for_check(k, h, d, base);
            if mode == HeadMode::Train {
                params.dropout_rate = 0.4;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(base + 7);
            let frames = Matrix::new(3, k, (0..3 * k).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .expect("finite samples");
            let probe = random_vector(&mut rng, d);
            let (_, trace) = head_forward(&params, &frames, mode).ok()?;
            let smooth = trace
                .pre_activation
                .as_slice()
                .iter()
                .all(|z| z.abs() > 1e-2)
                && trace.ln_stats.1 > 0.05;
            smooth.then_some((params, frames, probe))
        })
        .expect("random instances essentially never sit on a kink 100 times in a row");

    let mut flat = flatten_params(&params);
    flat.extend_from_slice(frames.as_slice());
    let params_len = flat.len() - frames.as_slice().len();

    let evaluate = |x: &[f64]| {
        let mut p = unflatten_params(&x[..params_len], dims);
        p.dropout_rate = params.dropout_rate;
        p.rng_seed = params.rng_seed;
        let f = Matrix::new(3, k, x[params_len..].to_vec()).expect("finite probe");
        let (out, _) = head_forward(&p, &f, mode).expect("valid shapes");
        dot(&out, &probe).expect("dims match")
    };
    let numeric = central_gradient(evaluate, &flat, FD_STEP);

    let (_, trace) = head_forward(&params, &frames, mode).expect("valid shapes");
    let (grads, frame_grads) = head_backward(&params, &trace, &probe).expect("matching trace");
    let analytic = {
        let mut a = flatten_params(&HeadParams {
            w1: grads.w1,
            b1: grads.b1,
            ln_gamma: grads.ln_gamma,
            ln_beta: grads.ln_beta,
            w2: grads.w2,
            b2: grads.b2,
            dropout_rate: 0.0,
            rng_seed: 0,
        });
        a.extend_from_slice(frame_grads.as_slice());
        a
    };

    let mut report = GradCheckReport::default();
    let spans = param_tensor_spans(dims);
    let mut at = 0;
    for (name, span) in PARAM_TENSOR_NAMES.iter().zip(spans) {
        report.push(name, &analytic[at..at + span], &numeric[at..at + span]);
        at += span;
    }
    report.push("frames", &analytic[at..], &numeric[at..]);
    report
}
