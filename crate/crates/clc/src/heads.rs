//! Projection heads: pool -> Linear -> ReLU -> LayerNorm -> Dropout -> Linear.
//!
//! A head maps a `T x k` frame-embedding matrix to a single `d` vector.
//! Three independent heads (current, past, future) feed the contrastive
//! losses in [`crate::losses`]. The forward pass records a trace so the
//! backward pass can produce gradients for every parameter tensor and
//! for the input frames. Outputs are deliberately not L2-normalized;
//! normalization happens inside the losses at similarity time.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{matvec, matvec_transposed, mean_pool_rows, Matrix, Vector};

/// Epsilon inside the LayerNorm variance denominator.
pub const LAYER_NORM_EPSILON: f64 = 1e-5;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("trace does not match these parameters: {context}")]
    TraceMismatch { context: String },
}

/// Dropout behavior for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    /// Dropout applies a seeded mask with inverted scaling.
    Train,
    /// Dropout is the identity.
    Eval,
}

/// Parameters of one projection head.
///
/// Widths: `k` input (frame-embedding), `h` hidden, `d` output.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w1: Matrix,
    pub b1: Vector,
    pub ln_gamma: Vector,
    pub ln_beta: Vector,
    pub w2: Matrix,
    pub b2: Vector,
    pub dropout_rate: f64,
    pub rng_seed: u64,
}

impl HeadParams {
    /// Validates shape consistency across all parameter tensors.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w1: Matrix,
        b1: Vector,
        ln_gamma: Vector,
        ln_beta: Vector,
        w2: Matrix,
        b2: Vector,
        dropout_rate: f64,
        rng_seed: u64,
    ) -> Result<Self, HeadError> {
        let h = w1.rows();
        let d = w2.rows();
        if b1.dim() != h || ln_gamma.dim() != h || ln_beta.dim() != h || w2.cols() != h {
            return Err(HeadError::ShapeMismatch {
                context: format!(
                    "hidden width {h}: b1={}, gamma={}, beta={}, w2 cols={}",
                    b1.dim(),
                    ln_gamma.dim(),
                    ln_beta.dim(),
                    w2.cols()
                ),
            });
        }
        if b2.dim() != d {
            return Err(HeadError::ShapeMismatch {
                context: format!("output width {d}: b2={}", b2.dim()),
            });
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(HeadError::ShapeMismatch {
                context: format!("dropout_rate {dropout_rate} outside [0, 1)"),
            });
        }
        Ok(Self {
            w1,
            b1,
            ln_gamma,
            ln_beta,
            w2,
            b2,
            dropout_rate,
            rng_seed,
        })
    }

    /// Xavier-uniform initialization, deterministic in `seed`.
    ///
    /// Output biases are drawn with magnitudes bounded away from zero:
    /// an input that drives every ReLU unit negative then still yields
    /// the nonzero `b2`, so downstream cosine similarities stay
    /// defined.
    pub fn seeded(k: usize, h: usize, d: usize, dropout_rate: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut uniform = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f64> {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = Matrix::new(h, k, uniform(k, h, h * k)).expect("finite init");
        let w2 = Matrix::new(d, h, uniform(h, d, d * h)).expect("finite init");
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x6232)); // "b2"
        let b2: Vec<f64> = (0..d)
            .map(|_| {
                let magnitude = rng.gen_range(0.02..0.08);
                if rng.gen::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            })
            .collect();
        Self::new(
            w1,
            Vector::zeros(h),
            Vector::new(vec![1.0; h]).expect("finite init"),
            Vector::zeros(h),
            w2,
            Vector::new(b2).expect("finite init"),
            dropout_rate,
            seed,
        )
        .expect("consistent shapes by construction")
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.w2.rows()
    }
}

/// Intermediate values recorded by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct HeadForwardTrace {
    pub pooled: Vector,
    pub pre_activation: Vector,
    pub post_relu: Vector,
    /// `(mean, variance)` of `post_relu` over the hidden dimension.
    pub ln_stats: (f64, f64),
    pub dropout_mask: Vec<bool>,
    pub output: Vector,
    pub mode: HeadMode,
    /// Frame count of the forward input; the pooling backward spreads
    /// gradient uniformly over this many rows.
    pub frame_rows: usize,
}

/// Gradients for every field of [`HeadParams`].
#[derive(Debug, Clone)]
pub struct HeadParamGrads {
    pub w1: Matrix,
    pub b1: Vector,
    pub ln_gamma: Vector,
    pub ln_beta: Vector,
    pub w2: Matrix,
    pub b2: Vector,
}

impl HeadParamGrads {
    pub fn zeros_like(params: &HeadParams) -> Self {
        Self {
            w1: Matrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: Vector::zeros(params.b1.dim()),
            ln_gamma: Vector::zeros(params.ln_gamma.dim()),
            ln_beta: Vector::zeros(params.ln_beta.dim()),
            w2: Matrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: Vector::zeros(params.b2.dim()),
        }
    }

    /// Element-wise `self += other`, used when summing per-sample grads.
    pub fn accumulate(&mut self, other: &HeadParamGrads) {
        let pairs = [
            (self.w1.as_mut_slice(), other.w1.as_slice()),
            (self.w2.as_mut_slice(), other.w2.as_slice()),
        ];
        for (dst, src) in pairs {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += b;
            }
        }
        self.b1.axpy(1.0, &other.b1);
        self.ln_gamma.axpy(1.0, &other.ln_gamma);
        self.ln_beta.axpy(1.0, &other.ln_beta);
        self.b2.axpy(1.0, &other.b2);
    }
}

fn dropout_mask(params: &HeadParams) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    (0..params.hidden_dim())
        .map(|_| rng.gen::<f64>() >= params.dropout_rate)
        .collect()
}

/// Runs the head: `Linear2(Dropout(LayerNorm(ReLU(Linear1(mean_pool(frames))))))`.
///
/// In `Eval` mode dropout is the identity. In `Train` mode the mask is a
/// pure function of `params.rng_seed` (inverted scaling, so eval needs no
/// rescaling); callers wanting a fresh mask rotate the seed themselves.
pub fn head_forward(
    params: &HeadParams,
    frames: &Matrix,
    mode: HeadMode,
) -> Result<(Vector, HeadForwardTrace), HeadError> {
    if frames.rows() == 0 || frames.cols() != params.input_dim() {
        return Err(HeadError::ShapeMismatch {
            context: format!(
                "frames {}x{} vs input width {}",
                frames.rows(),
                frames.cols(),
                params.input_dim()
            ),
        });
    }
    let pooled = mean_pool_rows(frames).expect("frames checked non-empty");

    let mut pre_activation = matvec(&params.w1, &pooled).expect("shapes validated");
    pre_activation.axpy(1.0, &params.b1);

    let post_relu = Vector::new(
        pre_activation
            .as_slice()
            .iter()
            .map(|v| v.max(0.0))
            .collect(),
    )
    .expect("relu of finite values");

    let h = params.hidden_dim();
    let mean = post_relu.as_slice().iter().sum::<f64>() / h as f64;
    let variance = post_relu
        .as_slice()
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / h as f64;
    let inv_std = 1.0 / (variance + LAYER_NORM_EPSILON).sqrt();

    let mask = match mode {
        HeadMode::Train => dropout_mask(params),
        HeadMode::Eval => vec![true; h],
    };
    let keep_scale = match mode {
        HeadMode::Train => 1.0 / (1.0 - params.dropout_rate),
        HeadMode::Eval => 1.0,
    };

    let mut dropped = Vec::with_capacity(h);
    #[allow(clippy::needless_range_loop)]
    for j in 0..h {
        let normalized = (post_relu.as_slice()[j] - mean) * inv_std;
        let affine = params.ln_gamma.as_slice()[j] * normalized + params.ln_beta.as_slice()[j];
        dropped.push(if mask[j] { affine * keep_scale } else { 0.0 });
    }
    let dropped = Vector::new(dropped).expect("finite dropout output");

    let mut output = matvec(&params.w2, &dropped).expect("shapes validated");
    output.axpy(1.0, &params.b2);

    let trace = HeadForwardTrace {
        pooled,
        pre_activation,
        post_relu,
        ln_stats: (mean, variance),
        dropout_mask: mask,
        output: output.clone(),
        mode,
        frame_rows: frames.rows(),
    };
    Ok((output, trace))
}

/// Backpropagates `grad_output` through a recorded forward pass.
///
/// Returns gradients for all parameter tensors and for the input frames
/// (the pooling backward distributes `1/T` of the pooled gradient to
/// each frame row).
pub fn head_backward(
    params: &HeadParams,
    trace: &HeadForwardTrace,
    grad_output: &Vector,
) -> Result<(HeadParamGrads, Matrix), HeadError> {
    let k = params.input_dim();
    let h = params.hidden_dim();
    let d = params.output_dim();
    if trace.pooled.dim() != k
        || trace.pre_activation.dim() != h
        || trace.post_relu.dim() != h
        || trace.dropout_mask.len() != h
        || trace.output.dim() != d
        || trace.frame_rows == 0
    {
        return Err(HeadError::TraceMismatch {
            context: format!(
                "trace dims (pooled={}, hidden={}, output={}, frames={}) vs params (k={k}, h={h}, d={d})",
                trace.pooled.dim(),
                trace.pre_activation.dim(),
                trace.output.dim(),
                trace.frame_rows
            ),
        });
    }
    if grad_output.dim() != d {
        return Err(HeadError::TraceMismatch {
            context: format!("grad_output dim {} vs output width {d}", grad_output.dim()),
        });
    }

    let (mean, variance) = trace.ln_stats;
    let inv_std = 1.0 / (variance + LAYER_NORM_EPSILON).sqrt();
    let keep_scale = match trace.mode {
        HeadMode::Train => 1.0 / (1.0 - params.dropout_rate),
        HeadMode::Eval => 1.0,
    };

    // Recompute the dropout output (input to the second linear layer).
    let mut normalized = Vec::with_capacity(h);
    let mut dropped = Vec::with_capacity(h);
    #[allow(clippy::needless_range_loop)]
    for j in 0..h {
        let n = (trace.post_relu.as_slice()[j] - mean) * inv_std;
        normalized.push(n);
        let affine = params.ln_gamma.as_slice()[j] * n + params.ln_beta.as_slice()[j];
        dropped.push(if trace.dropout_mask[j] {
            affine * keep_scale
        } else {
            0.0
        });
    }

    // Linear2: out = w2 * dropped + b2.
    let mut g_w2 = Matrix::zeros(d, h);
    for i in 0..d {
        for (j, dropped_j) in dropped.iter().enumerate() {
            g_w2.set(i, j, grad_output.as_slice()[i] * dropped_j);
        }
    }
    let g_b2 = grad_output.clone();
    let g_dropped = matvec_transposed(&params.w2, grad_output).expect("shapes validated");

    // Dropout.
    let g_affine: Vec<f64> = (0..h)
        .map(|j| {
            if trace.dropout_mask[j] {
                g_dropped.as_slice()[j] * keep_scale
            } else {
                0.0
            }
        })
        .collect();

    // LayerNorm affine.
    let g_ln_gamma =
        Vector::new((0..h).map(|j| g_affine[j] * normalized[j]).collect()).expect("finite");
    let g_ln_beta = Vector::new(g_affine.clone()).expect("finite");
    let g_normalized: Vec<f64> = (0..h)
        .map(|j| g_affine[j] * params.ln_gamma.as_slice()[j])
        .collect();

    // LayerNorm statistics.
    let mean_g = g_normalized.iter().sum::<f64>() / h as f64;
    let mean_g_times_n = (0..h).map(|j| g_normalized[j] * normalized[j]).sum::<f64>() / h as f64;
    let g_post_relu: Vec<f64> = (0..h)
        .map(|j| inv_std * (g_normalized[j] - mean_g - normalized[j] * mean_g_times_n))
        .collect();

    // ReLU: pass-through where the pre-activation was positive.
    let g_pre: Vec<f64> = (0..h)
        .map(|j| {
            if trace.pre_activation.as_slice()[j] > 0.0 {
                g_post_relu[j]
            } else {
                0.0
            }
        })
        .collect();
    let g_pre = Vector::new(g_pre).expect("finite");

    // Linear1: pre = w1 * pooled + b1.
    let mut g_w1 = Matrix::zeros(h, k);
    for i in 0..h {
        for j in 0..k {
            g_w1.set(i, j, g_pre.as_slice()[i] * trace.pooled.as_slice()[j]);
        }
    }
    let g_b1 = g_pre.clone();
    let g_pooled = matvec_transposed(&params.w1, &g_pre).expect("shapes validated");

    // Mean pooling spreads the gradient uniformly over the T frame rows.
    let t = trace.frame_rows;
    let inv_t = 1.0 / t as f64;
    let mut g_frames = Matrix::zeros(t, k);
    for r in 0..t {
        for c in 0..k {
            g_frames.set(r, c, g_pooled.as_slice()[c] * inv_t);
        }
    }

    let grads = HeadParamGrads {
        w1: g_w1,
        b1: g_b1,
        ln_gamma: g_ln_gamma,
        ln_beta: g_ln_beta,
        w2: g_w2,
        b2: g_b2,
    };
    Ok((grads, g_frames))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frames_2x3() -> Matrix {
        Matrix::new(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -0.4]).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let params = HeadParams::new(
            Matrix::zeros(4, 3),
            Vector::zeros(4),
            Vector::zeros(4),
            Vector::zeros(4),
            Matrix::zeros(2, 4),
            Vector::zeros(2),
            0.0,
            7,
        )
        .unwrap();
        let (out, _) = head_forward(&params, &frames_2x3(), HeadMode::Eval).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn identity_configuration_reproduces_layer_norm() {
        // w1 = I, b1 = 0, gamma = 1, beta = 0, w2 = I, b2 = 0, and a
        // non-negative single-frame input, so the head reduces to
        // LayerNorm(input).
        let k = 2;
        let params = HeadParams::new(
            Matrix::identity(k),
            Vector::zeros(k),
            Vector::new(vec![1.0; k]).unwrap(),
            Vector::zeros(k),
            Matrix::identity(k),
            Vector::zeros(k),
            0.0,
            0,
        )
        .unwrap();
        // Input (0, 2): mean 1, variance 1.
        let frames = Matrix::new(1, 2, vec![0.0, 2.0]).unwrap();
        let (out, _) = head_forward(&params, &frames, HeadMode::Eval).unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPSILON).sqrt();
        assert!((out.as_slice()[0] + expected).abs() < 1e-15);
        assert!((out.as_slice()[1] - expected).abs() < 1e-15);
    }

    #[test]
    fn train_mode_is_deterministic_per_seed() {
        let params = HeadParams::seeded(3, 8, 4, 0.5, 42);
        let (a, _) = head_forward(&params, &frames_2x3(), HeadMode::Train).unwrap();
        let (b, _) = head_forward(&params, &frames_2x3(), HeadMode::Train).unwrap();
        assert_eq!(a, b);
        // A different seed flips at least one mask bit for rate 0.5.
        let other = HeadParams {
            rng_seed: 43,
            ..params
        };
        let (c, _) = head_forward(&other, &frames_2x3(), HeadMode::Train).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn eval_mode_ignores_dropout() {
        let mut params = HeadParams::seeded(3, 8, 4, 0.9, 42);
        let (with_rate, _) = head_forward(&params, &frames_2x3(), HeadMode::Eval).unwrap();
        params.dropout_rate = 0.0;
        let (without, _) = head_forward(&params, &frames_2x3(), HeadMode::Eval).unwrap();
        assert_eq!(with_rate, without);
    }

    #[test]
    fn layer_norm_stats_are_standardized_before_affine() {
        let params = HeadParams::seeded(3, 16, 4, 0.0, 9);
        let (_, trace) = head_forward(&params, &frames_2x3(), HeadMode::Eval).unwrap();
        let (mean, variance) = trace.ln_stats;
        let inv_std = 1.0 / (variance + LAYER_NORM_EPSILON).sqrt();
        let normalized: Vec<f64> = trace
            .post_relu
            .as_slice()
            .iter()
            .map(|v| (v - mean) * inv_std)
            .collect();
        let h = normalized.len() as f64;
        let n_mean = normalized.iter().sum::<f64>() / h;
        let n_var = normalized
            .iter()
            .map(|v| (v - n_mean) * (v - n_mean))
            .sum::<f64>()
            / h;
        assert!(n_mean.abs() < 1e-8);
        // Variance shrinks by var/(var + eps) relative to exactly 1.
        assert!((n_var - variance / (variance + LAYER_NORM_EPSILON)).abs() < 1e-8);
    }

    #[test]
    fn zero_grad_output_gives_zero_grads() {
        let params = HeadParams::seeded(3, 4, 2, 0.1, 1);
        let (_, trace) = head_forward(&params, &frames_2x3(), HeadMode::Train).unwrap();
        let (grads, g_frames) = head_backward(&params, &trace, &Vector::zeros(2)).unwrap();
        assert!(grads.w1.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.w2.as_slice().iter().all(|v| *v == 0.0));
        assert!(grads.ln_gamma.as_slice().iter().all(|v| *v == 0.0));
        assert!(g_frames.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_frame_input_gets_full_chain_gradient() {
        let params = HeadParams::seeded(3, 4, 2, 0.0, 5);
        let single = Matrix::new(1, 3, vec![0.4, -0.2, 0.9]).unwrap();
        let stacked = Matrix::new(2, 3, vec![0.4, -0.2, 0.9, 0.4, -0.2, 0.9]).unwrap();
        let g_out = Vector::new(vec![0.3, -0.7]).unwrap();

        let (_, trace1) = head_forward(&params, &single, HeadMode::Eval).unwrap();
        let (_, g1) = head_backward(&params, &trace1, &g_out).unwrap();
        let (_, trace2) = head_forward(&params, &stacked, HeadMode::Eval).unwrap();
        let (_, g2) = head_backward(&params, &trace2, &g_out).unwrap();

        // With T = 1 the frame row receives the whole pooled gradient;
        // with T = 2 each duplicate row receives half of it.
        for c in 0..3 {
            assert!((g1.get(0, c) - 2.0 * g2.get(0, c)).abs() < 1e-14);
            assert!((g2.get(0, c) - g2.get(1, c)).abs() < 1e-14);
        }
    }

    #[test]
    fn mismatched_trace_is_rejected() {
        let params = HeadParams::seeded(3, 4, 2, 0.0, 5);
        let other = HeadParams::seeded(3, 6, 2, 0.0, 5);
        let (_, trace) = head_forward(&other, &frames_2x3(), HeadMode::Eval).unwrap();
        let err = head_backward(&params, &trace, &Vector::zeros(2)).unwrap_err();
        assert!(matches!(err, HeadError::TraceMismatch { .. }));
    }

    #[test]
    fn seeded_heads_survive_axis_aligned_inputs() {
        // A one-hot pooled input can drive every ReLU unit negative;
        // the output bias keeps such outputs normalizable.
        for seed in 0..200 {
            let params = HeadParams::seeded(4, 4, 4, 0.0, seed);
            for axis in 0..4 {
                let mut row = vec![0.0; 4];
                row[axis] = 1.0;
                let frames = Matrix::new(1, 4, row).unwrap();
                let (out, _) = head_forward(&params, &frames, HeadMode::Eval).unwrap();
                assert!(
                    out.norm() > 1e-6,
                    "seed {seed} axis {axis} emitted a dead output"
                );
            }
        }
    }

    #[test]
    fn params_and_traces_are_shareable_across_threads() {
        fn assert_send_sync<T: Send + Sync>() {}
        assert_send_sync::<HeadParams>();
        assert_send_sync::<HeadForwardTrace>();
        assert_send_sync::<HeadParamGrads>();
    }

    #[test]
    fn wrong_frame_width_is_rejected() {
        let params = HeadParams::seeded(4, 4, 2, 0.0, 5);
        let err = head_forward(&params, &frames_2x3(), HeadMode::Eval).unwrap_err();
        assert!(matches!(err, HeadError::ShapeMismatch { .. }));
    }
}
