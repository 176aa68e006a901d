//! Deletion-based filtering of low-quality reference/hypothesis pairs.
//!
//! Synthesized audio sometimes drops content, which shows up as runs of
//! deletions in the recognizer output; such turns get filtered out.

use crate::metrics::align;

/// Default cut for the deletion rate (deletions over reference length).
pub const DEFAULT_DELETION_RATE_THRESHOLD: f64 = 0.5;

/// Index partition of a filtered corpus.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Partition {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Splits pairs by whether their deletion rate exceeds the threshold
/// (strictly). Indices refer to positions in `pairs`.
pub fn filter_high_deletion<R: AsRef<str>, H: AsRef<str>>(
    pairs: &[(Vec<R>, Vec<H>)],
    deletion_rate_threshold: f64,
) -> Partition {
    let mut partition = Partition::default();
    for (idx, (reference, hypothesis)) in pairs.iter().enumerate() {
        let rate = align(reference, hypothesis).deletion_rate();
        if rate > deletion_rate_threshold {
            partition.dropped.push(idx);
        } else {
            partition.kept.push(idx);
        }
    }
    partition
}
