use std::collections::HashMap;

use crate::error::{Error, Result};

/// Fraction of aligned positions where `hyp` and `reference` agree, over the
/// longer of the two lengths.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    let denom = hyp.len().max(reference.len());
    if denom == 0 {
        return 1.0;
    }
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / denom as f64
}

fn ngram_counts(seq: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level BLEU over 1..=3-grams in `[0, 1]`.
///
/// Each clipped precision is add-one smoothed, `(matches + 1) / (total + 1)`,
/// and the geometric mean is scaled by the brevity penalty
/// `min(1, exp(1 - r/c))`. An empty hypothesis scores 0; a hypothesis sharing
/// no token with the reference gets the smallest smoothed value, not 0.
pub fn sentence_bleu3(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Data("bleu needs a non-empty reference".into()));
    }
    if hyp.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=3 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let matches: usize = h
            .iter()
            .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
            .sum();
        let total = hyp.len().saturating_sub(n - 1);
        log_sum += ((matches as f64 + 1.0) / (total as f64 + 1.0)).ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    Ok(bp * (log_sum / 3.0).exp())
}
