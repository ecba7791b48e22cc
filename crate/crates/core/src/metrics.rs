//! Text-overlap metrics over token-id sequences.
//!
//! BLEU uses clipped n-gram precisions with add-one smoothing for orders
//! above 1 and the standard brevity penalty. ROUGE-L is the F1 built on the
//! longest common subsequence. Accuracy is exact sequence match. All three
//! return values in [0, 1]; reporting layers may rescale.

use std::collections::HashMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// Prediction and reference lists of different lengths.
    LengthMismatch { predictions: usize, references: usize },
    /// An empty list where at least one pair is required.
    Empty,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::LengthMismatch { predictions, references } => write!(
                f,
                "got {predictions} predictions but {references} references"
            ),
            MetricsError::Empty => write!(f, "no prediction/reference pairs"),
        }
    }
}

impl std::error::Error for MetricsError {}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU of a hypothesis against a single reference, geometric mean of orders
/// 1..=max_n. Order 1 is unsmoothed; higher orders get add-one smoothing.
/// An empty hypothesis, or one sharing no unigram with the reference,
/// scores 0. `max_n` must be in 1..=4.
pub fn bleu(hypothesis: &[usize], reference: &[usize], max_n: usize) -> f64 {
    assert!((1..=4).contains(&max_n), "bleu order must be in 1..=4");
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let hyp = ngram_counts(hypothesis, n);
        let reference = ngram_counts(reference, n);
        let total: usize = hyp.values().sum();
        let clipped: usize = hyp
            .iter()
            .map(|(gram, &c)| c.min(reference.get(gram).copied().unwrap_or(0)))
            .sum();
        let precision = if n == 1 {
            if clipped == 0 {
                return 0.0;
            }
            clipped as f64 / total as f64
        } else {
            (clipped + 1) as f64 / (total + 1) as f64
        };
        log_sum += precision.ln();
    }
    let mean = (log_sum / max_n as f64).exp();
    let (c, r) = (hypothesis.len() as f64, reference.len() as f64);
    let brevity = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    brevity * mean
}

/// Longest-common-subsequence length by dynamic programming.
pub fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1: precision and recall of the LCS against hypothesis and
/// reference lengths. Either side empty scores 0.
pub fn rouge_l(hypothesis: &[usize], reference: &[usize]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(hypothesis, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / hypothesis.len() as f64;
    let recall = lcs / reference.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Fraction of predictions exactly equal to their reference.
pub fn accuracy(predictions: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64, MetricsError> {
    if predictions.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            predictions: predictions.len(),
            references: references.len(),
        });
    }
    if predictions.is_empty() {
        return Err(MetricsError::Empty);
    }
    let hits = predictions
        .iter()
        .zip(references)
        .filter(|(p, r)| p == r)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

#[cfg(test)]
pub mod oracle {
    /// Reference LCS by plain recursion, exponential time. Kept only to
    /// cross-check the dynamic program on short sequences.
    pub fn lcs_brute(a: &[usize], b: &[usize]) -> usize {
        match (a.split_last(), b.split_last()) {
            (Some((&x, ra)), Some((&y, rb))) => {
                if x == y {
                    1 + lcs_brute(ra, rb)
                } else {
                    lcs_brute(ra, b).max(lcs_brute(a, rb))
                }
            }
            _ => 0,
        }
    }
}
