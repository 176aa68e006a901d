//! Minimal dense linear algebra and numerically stable reductions.
//!
//! Everything downstream (projection heads, contrastive losses, the
//! dialogue pipeline) builds on [`Matrix`] and [`Vector`]. Values are
//! stored as `f64`; reductions run in a fixed left-to-right order so
//! results are reproducible bit-for-bit. The on-disk embedding format
//! ([`crate::io::clce`]) is 32-bit and up-cast on read.

use thiserror::Error;

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPSILON: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum TensorError {
    #[error("vector norm {norm:e} is at or below {NORM_EPSILON:e}")]
    ZeroNorm { norm: f64 },
    #[error("empty input")]
    EmptyInput,
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },
}

fn check_finite(data: &[f64]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, validating shape and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::ShapeMismatch {
                context: format!(
                    "{rows}x{cols} needs {} values, got {}",
                    rows * cols,
                    data.len()
                ),
            });
        }
        check_finite(&data)?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// Row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Stacks the rows of `mats` on top of each other. All inputs must
    /// share a column count.
    pub fn vstack(mats: &[&Matrix]) -> Result<Self, TensorError> {
        let first = mats.first().ok_or(TensorError::EmptyInput)?;
        let cols = first.cols;
        let mut data = Vec::new();
        for m in mats {
            if m.cols != cols {
                return Err(TensorError::ShapeMismatch {
                    context: format!("vstack: {} columns vs {}", m.cols, cols),
                });
            }
            data.extend_from_slice(&m.data);
        }
        let rows = data.len() / cols;
        Ok(Self { rows, cols, data })
    }
}

/// Dense vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    /// Builds a vector, validating finiteness.
    pub fn new(data: Vec<f64>) -> Result<Self, TensorError> {
        check_finite(&data)?;
        Ok(Self { data })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Euclidean norm, accumulated left to right.
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for v in &self.data {
            acc += v * v;
        }
        acc.sqrt()
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &Vector) {
        debug_assert_eq!(self.dim(), other.dim());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, scale: f64) {
        for a in &mut self.data {
            *a *= scale;
        }
    }
}

/// Dot product of two equal-length vectors.
pub fn dot(a: &Vector, b: &Vector) -> Result<f64, TensorError> {
    if a.dim() != b.dim() {
        return Err(TensorError::ShapeMismatch {
            context: format!("dot: {} vs {}", a.dim(), b.dim()),
        });
    }
    Ok(dot_slices(a.as_slice(), b.as_slice()))
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Scales `v` to unit Euclidean norm. Direction is preserved.
pub fn l2_normalize(v: &Vector) -> Result<Vector, TensorError> {
    let norm = v.norm();
    if norm <= NORM_EPSILON {
        return Err(TensorError::ZeroNorm { norm });
    }
    let data = v.as_slice().iter().map(|x| x / norm).collect();
    Ok(Vector { data })
}

/// `log(sum(exp(v_i)))` computed with a max shift so large inputs do
/// not overflow. Exact for constant vectors: `lse(c, .., c) = c + ln n`.
pub fn log_sum_exp(values: &[f64]) -> Result<f64, TensorError> {
    if values.is_empty() {
        return Err(TensorError::EmptyInput);
    }
    check_finite(values)?;
    let mut max = values[0];
    for &v in &values[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in values {
        sum += (v - max).exp();
    }
    Ok(max + sum.ln())
}

/// Streaming log-sum-exp accumulator: tracks the running max and a sum
/// rescaled to it, so column chunks can be folded in one at a time.
#[derive(Debug, Clone, Copy)]
pub struct OnlineLogSumExp {
    max: f64,
    scaled_sum: f64,
}

impl OnlineLogSumExp {
    pub fn new() -> Self {
        Self {
            max: f64::NEG_INFINITY,
            scaled_sum: 0.0,
        }
    }

    /// Batch-style summary of one chunk: max first, then a left-to-right
    /// rescaled sum, the same operation order as [`log_sum_exp`], so a
    /// single-chunk summary finishes to the identical bits.
    pub fn summarize(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::new();
        }
        let mut max = values[0];
        for &v in &values[1..] {
            if v > max {
                max = v;
            }
        }
        let mut scaled_sum = 0.0;
        for &v in values {
            scaled_sum += (v - max).exp();
        }
        Self { max, scaled_sum }
    }

    pub fn push(&mut self, value: f64) {
        if value <= self.max {
            self.scaled_sum += (value - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - value).exp() + 1.0;
            self.max = value;
        }
    }

    pub fn merge(&mut self, other: &OnlineLogSumExp) {
        if other.is_empty() {
            return;
        }
        if other.max <= self.max {
            self.scaled_sum += other.scaled_sum * (other.max - self.max).exp();
        } else {
            self.scaled_sum = self.scaled_sum * (self.max - other.max).exp() + other.scaled_sum;
            self.max = other.max;
        }
    }

    pub fn is_empty(&self) -> bool {
        self.max == f64::NEG_INFINITY
    }

    /// `log(sum(exp(..)))` over everything pushed so far.
    pub fn finish(&self) -> f64 {
        if self.is_empty() {
            return f64::NEG_INFINITY;
        }
        self.max + self.scaled_sum.ln()
    }
}

impl Default for OnlineLogSumExp {
    fn default() -> Self {
        Self::new()
    }
}

/// Row-major matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix, TensorError> {
    if a.cols != b.rows {
        return Err(TensorError::ShapeMismatch {
            context: format!("matmul: {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols),
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = 0.0;
            for l in 0..a.cols {
                acc += a.get(i, l) * b.get(l, j);
            }
            out.set(i, j, acc);
        }
    }
    Ok(out)
}

/// `m * v` for a `rows x cols` matrix and a `cols` vector.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector, TensorError> {
    if m.cols != v.dim() {
        return Err(TensorError::ShapeMismatch {
            context: format!("matvec: {}x{} by {}", m.rows, m.cols, v.dim()),
        });
    }
    let mut out = vec![0.0; m.rows];
    for (i, o) in out.iter_mut().enumerate() {
        *o = dot_slices(m.row(i), v.as_slice());
    }
    Ok(Vector { data: out })
}

/// `m^T * v` for a `rows x cols` matrix and a `rows` vector.
pub fn matvec_transposed(m: &Matrix, v: &Vector) -> Result<Vector, TensorError> {
    if m.rows != v.dim() {
        return Err(TensorError::ShapeMismatch {
            context: format!("matvec_transposed: {}x{} by {}", m.rows, m.cols, v.dim()),
        });
    }
    let mut out = vec![0.0; m.cols];
    for i in 0..m.rows {
        let row = m.row(i);
        let scale = v.as_slice()[i];
        for (o, x) in out.iter_mut().zip(row) {
            *o += scale * x;
        }
    }
    Ok(Vector { data: out })
}

/// Column-wise mean over the rows of `m`.
pub fn mean_pool_rows(m: &Matrix) -> Result<Vector, TensorError> {
    if m.rows == 0 {
        return Err(TensorError::EmptyInput);
    }
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, x) in out.iter_mut().zip(m.row(r)) {
            *o += x;
        }
    }
    let inv = 1.0 / m.rows as f64;
    for o in &mut out {
        *o *= inv;
    }
    Ok(Vector { data: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_345_triangle() {
        let v = Vector::new(vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert!((n.as_slice()[0] - 0.6).abs() < 1e-15);
        assert!((n.as_slice()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_already_unit() {
        let v = Vector::new(vec![1.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert_eq!(n.as_slice(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_zero_vector_errors() {
        let v = Vector::new(vec![0.0, 0.0]).unwrap();
        assert!(matches!(
            l2_normalize(&v),
            Err(TensorError::ZeroNorm { .. })
        ));
    }

    #[test]
    fn normalize_unit_within_1e12() {
        let v = Vector::new(vec![0.3, -1.7, 2.9, 0.04]).unwrap();
        let n = l2_normalize(&v).unwrap();
        assert!((n.norm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lse_two_zeros_is_ln2() {
        let got = log_sum_exp(&[0.0, 0.0]).unwrap();
        assert!((got - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn lse_overflow_safe() {
        let got = log_sum_exp(&[1000.0, 1000.0]).unwrap();
        assert!((got - (1000.0 + std::f64::consts::LN_2)).abs() < 1e-12);
    }

    #[test]
    fn lse_one_two_three() {
        // ln(e + e^2 + e^3), frozen from an extended-precision evaluation.
        let got = log_sum_exp(&[1.0, 2.0, 3.0]).unwrap();
        assert!((got - 3.40760596444438).abs() < 1e-12);
    }

    #[test]
    fn lse_empty_errors() {
        assert_eq!(log_sum_exp(&[]), Err(TensorError::EmptyInput));
    }

    #[test]
    fn online_lse_matches_batch_under_merge() {
        let values = [0.4, -2.0, 3.3, 1.1, -0.7, 2.2];
        let whole = log_sum_exp(&values).unwrap();
        let mut left = OnlineLogSumExp::new();
        let mut right = OnlineLogSumExp::new();
        for &v in &values[..3] {
            left.push(v);
        }
        for &v in &values[3..] {
            right.push(v);
        }
        left.merge(&right);
        assert!((left.finish() - whole).abs() < 1e-13);
    }

    #[test]
    fn mean_pool_example() {
        let m = Matrix::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let p = mean_pool_rows(&m).unwrap();
        assert_eq!(p.as_slice(), &[2.0, 3.0]);
    }

    #[test]
    fn mean_pool_empty_errors() {
        let m = Matrix::new(0, 3, vec![]).unwrap();
        assert_eq!(mean_pool_rows(&m), Err(TensorError::EmptyInput));
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let got = matmul(&Matrix::identity(2), &m).unwrap();
        assert_eq!(got, m);
    }

    #[test]
    fn matmul_ones_gives_row_sums() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let ones = Matrix::new(3, 1, vec![1.0; 3]).unwrap();
        let got = matmul(&m, &ones).unwrap();
        assert_eq!(got.as_slice(), &[6.0, 15.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(2, 3);
        assert!(matches!(
            matmul(&a, &b),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn constructors_reject_non_finite() {
        assert!(matches!(
            Vector::new(vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1 })
        ));
        assert!(matches!(
            Matrix::new(1, 2, vec![f64::INFINITY, 0.0]),
            Err(TensorError::NonFinite { index: 0 })
        ));
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-1e3..1e3f64, len)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(data in finite_vec(5)) {
            let v = Vector::new(data).unwrap();
            prop_assume!(v.norm() > 1e-6);
            let once = l2_normalize(&v).unwrap();
            let twice = l2_normalize(&once).unwrap();
            for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn lse_shift_invariance(data in finite_vec(6), c in -500.0..500.0f64) {
            let base = log_sum_exp(&data).unwrap();
            let shifted: Vec<f64> = data.iter().map(|v| v + c).collect();
            let got = log_sum_exp(&shifted).unwrap();
            prop_assert!((got - (base + c)).abs() < 1e-10);
        }

        #[test]
        fn matmul_associativity(
            a in finite_vec(6), b in finite_vec(6), c in finite_vec(6),
        ) {
            let a = Matrix::new(2, 3, a.iter().map(|v| v / 1e3).collect()).unwrap();
            let b = Matrix::new(3, 2, b.iter().map(|v| v / 1e3).collect()).unwrap();
            let c = Matrix::new(2, 3, c.iter().map(|v| v / 1e3).collect()).unwrap();
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            for (x, y) in left.as_slice().iter().zip(right.as_slice()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
