//! Word-level alignment and the scores derived from it: WER, SER,
//! relative improvements, and oracle WER over n-best lists.
//!
//! Corpus WER is pooled (total errors over total reference words), the
//! standard ASR convention, rather than averaged per utterance. Text is
//! normalized before alignment by default (lowercase, punctuation
//! stripped, whitespace collapsed); pass pre-split words to [`align`]
//! directly to control tokenization yourself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("baseline must be > 0, got {baseline}")]
    ZeroBaseline { baseline: f64 },
    #[error("empty n-best list")]
    EmptyNBest,
}

/// Edit-operation decomposition of one reference/hypothesis pair.
///
/// Invariant: `hits + substitutions + deletions == ref_len`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub hits: usize,
    pub ref_len: usize,
}

impl AlignmentResult {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// Errors over reference length. An empty reference scores 0.0 when
    /// the hypothesis is empty too, infinity otherwise.
    pub fn wer(&self) -> f64 {
        if self.ref_len == 0 {
            return if self.errors() == 0 {
                0.0
            } else {
                f64::INFINITY
            };
        }
        self.errors() as f64 / self.ref_len as f64
    }

    /// Deletions over reference length; the filter for TTS-induced
    /// dropouts keys off this.
    pub fn deletion_rate(&self) -> f64 {
        if self.ref_len == 0 {
            return 0.0;
        }
        self.deletions as f64 / self.ref_len as f64
    }
}

/// Minimal-edit alignment with unit costs. Among cost-equal backtrace
/// steps the preference is substitution (or hit), then deletion, then
/// insertion.
pub fn align<R: AsRef<str>, H: AsRef<str>>(ref_words: &[R], hyp_words: &[H]) -> AlignmentResult {
    let n = ref_words.len();
    let m = hyp_words.len();
    let mut dp = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in dp.iter_mut().enumerate() {
        row[0] = i;
    }
    for (j, cell) in dp[0].iter_mut().enumerate() {
        *cell = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let cost = usize::from(ref_words[i - 1].as_ref() != hyp_words[j - 1].as_ref());
            dp[i][j] = (dp[i - 1][j - 1] + cost)
                .min(dp[i - 1][j] + 1)
                .min(dp[i][j - 1] + 1);
        }
    }

    let mut result = AlignmentResult {
        ref_len: n,
        ..Default::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let equal = ref_words[i - 1].as_ref() == hyp_words[j - 1].as_ref();
            if dp[i][j] == dp[i - 1][j - 1] + usize::from(!equal) {
                if equal {
                    result.hits += 1;
                } else {
                    result.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && dp[i][j] == dp[i - 1][j] + 1 {
            result.deletions += 1;
            i -= 1;
        } else {
            result.insertions += 1;
            j -= 1;
        }
    }
    debug_assert_eq!(
        result.hits + result.substitutions + result.deletions,
        result.ref_len
    );
    result
}

/// Lowercases, strips punctuation (apostrophes survive inside words),
/// and collapses whitespace.
pub fn normalize_text(text: &str) -> String {
    let mapped: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect();
    mapped
        .split_whitespace()
        .map(|w| w.trim_matches('\''))
        .filter(|w| !w.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Splits into words after [`normalize_text`].
pub fn tokenize(text: &str) -> Vec<String> {
    normalize_text(text)
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Splits on whitespace with no normalization.
pub fn tokenize_verbatim(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Pooled corpus-level scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusScore {
    /// Total errors over total reference words.
    pub wer: f64,
    /// Fraction of utterances with at least one error.
    pub ser: f64,
    pub n_utterances: usize,
    pub n_ref_words: usize,
}

/// Scores a corpus of pre-tokenized pairs.
pub fn corpus_score<R: AsRef<str>, H: AsRef<str>>(
    pairs: &[(Vec<R>, Vec<H>)],
) -> Result<CorpusScore, MetricsError> {
    corpus_score_aligned(&pairs.iter().map(|(r, h)| align(r, h)).collect::<Vec<_>>())
}

/// Same pooling over already-computed alignments.
pub fn corpus_score_aligned(alignments: &[AlignmentResult]) -> Result<CorpusScore, MetricsError> {
    if alignments.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let total_errors: usize = alignments.iter().map(AlignmentResult::errors).sum();
    let total_ref: usize = alignments.iter().map(|a| a.ref_len).sum();
    let with_errors = alignments.iter().filter(|a| a.errors() > 0).count();
    let wer = if total_ref == 0 {
        if total_errors == 0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        total_errors as f64 / total_ref as f64
    };
    Ok(CorpusScore {
        wer,
        ser: with_errors as f64 / alignments.len() as f64,
        n_utterances: alignments.len(),
        n_ref_words: total_ref,
    })
}

/// Percent relative improvement: `100 * (baseline - system) / baseline`.
/// Positive means the system improved. Serves WER and SER alike.
pub fn relative_improvement(baseline: f64, system: f64) -> Result<f64, MetricsError> {
    if baseline.is_nan() || baseline <= 0.0 {
        return Err(MetricsError::ZeroBaseline { baseline });
    }
    Ok(100.0 * (baseline - system) / baseline)
}

/// Minimum WER over an n-best list; ties resolve to the lowest-index
/// hypothesis (the same value either way).
pub fn oracle_wer<R: AsRef<str>, H: AsRef<str>>(
    ref_words: &[R],
    nbest: &[Vec<H>],
) -> Result<f64, MetricsError> {
    if nbest.is_empty() {
        return Err(MetricsError::EmptyNBest);
    }
    let mut best = f64::INFINITY;
    for hyp in nbest {
        let wer = align(ref_words, hyp).wer();
        if wer < best {
            best = wer;
        }
    }
    Ok(best)
}

/// One scoring input line: a reference plus either a single hypothesis
/// or an n-best list (whose first entry is treated as the system
/// output). An optional label buckets the line into a report slice.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(rename = "ref")]
    pub reference: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hyp: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nbest: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerUtterance {
    pub wer: f64,
    #[serde(flatten)]
    pub alignment: AlignmentResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_wer: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub wer: f64,
    pub ser: f64,
    pub n_utterances: usize,
    pub n_ref_words: usize,
    /// Pooled WER using the best hypothesis per n-best list; absent
    /// when no line carried one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_wer: Option<f64>,
    pub per_utt: Vec<PerUtterance>,
    /// Pooled scores per label.
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub slices: std::collections::BTreeMap<String, CorpusScore>,
}

/// Scores a batch of records with the standard text normalization.
pub fn score_records(records: &[ScoreRecord]) -> Result<ScoreReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyCorpus);
    }
    let mut alignments = Vec::with_capacity(records.len());
    let mut per_utt = Vec::with_capacity(records.len());
    let mut oracle_errors = 0usize;
    let mut any_nbest = false;
    let mut sliced: std::collections::BTreeMap<String, Vec<AlignmentResult>> = Default::default();

    for record in records {
        let reference = tokenize(&record.reference);
        let top = match (&record.hyp, &record.nbest) {
            (Some(h), _) => h.clone(),
            (None, Some(nbest)) => nbest.first().cloned().unwrap_or_default(),
            (None, None) => String::new(),
        };
        let alignment = align(&reference, &tokenize(&top));
        let oracle = match &record.nbest {
            Some(nbest) if !nbest.is_empty() => {
                any_nbest = true;
                let best_errors = nbest
                    .iter()
                    .map(|h| align(&reference, &tokenize(h)).errors())
                    .min()
                    .expect("nbest checked non-empty");
                oracle_errors += best_errors;
                let hyps: Vec<Vec<String>> = nbest.iter().map(|h| tokenize(h)).collect();
                Some(oracle_wer(&reference, &hyps)?)
            }
            _ => {
                // Without alternatives the lone hypothesis is also the
                // best attainable one.
                oracle_errors += alignment.errors();
                None
            }
        };
        per_utt.push(PerUtterance {
            wer: alignment.wer(),
            alignment,
            oracle_wer: oracle,
        });
        if let Some(label) = &record.label {
            sliced.entry(label.clone()).or_default().push(alignment);
        }
        alignments.push(alignment);
    }

    let pooled = corpus_score_aligned(&alignments)?;
    let slices = sliced
        .into_iter()
        .map(|(label, group)| corpus_score_aligned(&group).map(|s| (label, s)))
        .collect::<Result<_, _>>()?;
    Ok(ScoreReport {
        wer: pooled.wer,
        ser: pooled.ser,
        n_utterances: pooled.n_utterances,
        n_ref_words: pooled.n_ref_words,
        oracle_wer: (any_nbest && pooled.n_ref_words > 0)
            .then(|| oracle_errors as f64 / pooled.n_ref_words as f64),
        per_utt,
        slices,
    })
}

/// Relative improvements of one report over another.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// Percent relative WER improvement.
    pub werr: f64,
    /// Percent relative SER improvement; absent when the baseline SER
    /// is zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serr: Option<f64>,
    #[serde(default, skip_serializing_if = "std::collections::BTreeMap::is_empty")]
    pub slices: std::collections::BTreeMap<String, ComparisonSlice>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonSlice {
    pub werr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub serr: Option<f64>,
}

/// Compares whole reports and any slices present in both.
pub fn compare_reports(
    baseline: &ScoreReport,
    system: &ScoreReport,
) -> Result<ComparisonReport, MetricsError> {
    let serr = |b: f64, s: f64| (b > 0.0).then(|| relative_improvement(b, s)).transpose();
    let mut slices = std::collections::BTreeMap::new();
    for (label, base_slice) in &baseline.slices {
        if let Some(system_slice) = system.slices.get(label) {
            slices.insert(
                label.clone(),
                ComparisonSlice {
                    werr: relative_improvement(base_slice.wer, system_slice.wer)?,
                    serr: serr(base_slice.ser, system_slice.ser)?,
                },
            );
        }
    }
    Ok(ComparisonReport {
        werr: relative_improvement(baseline.wer, system.wer)?,
        serr: serr(baseline.ser, system.ser)?,
        slices,
    })
}
