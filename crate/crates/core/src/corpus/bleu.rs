//! Corpus-level BLEU: clipped modified n-gram precision, geometric mean
//! over orders 1..n, multiplicative brevity penalty.

use std::collections::HashMap;

use crate::error::{Error, Result};

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU over a candidate corpus against per-segment reference sets.
///
/// `candidates[i]` is scored against all of `references[i]`. Statistics are
/// pooled across segments before the geometric mean (corpus-level, not an
/// average of per-sentence scores). An order with zero matches anywhere in
/// the corpus sends the whole score to 0.
pub fn bleu(candidates: &[Vec<String>], references: &[Vec<Vec<String>>], n: usize) -> Result<f64> {
    bleu_impl(candidates, references, n, false)
}

/// Like [`bleu`] but with add-one smoothing on zero-match orders, for
/// comparing very short corpora without the hard zero.
pub fn bleu_smoothed(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
) -> Result<f64> {
    bleu_impl(candidates, references, n, true)
}

fn bleu_impl(
    candidates: &[Vec<String>],
    references: &[Vec<Vec<String>>],
    n: usize,
    smooth: bool,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::Config("BLEU order must be at least 1".into()));
    }
    if candidates.len() != references.len() {
        return Err(Error::Config(format!(
            "{} candidates but {} reference sets",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Config("BLEU needs at least one segment".into()));
    }
    for (i, refs) in references.iter().enumerate() {
        if refs.is_empty() {
            return Err(Error::Config(format!("segment {i} has no references")));
        }
    }

    let mut matches = vec![0usize; n];
    let mut totals = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for (cand, refs) in candidates.iter().zip(references) {
        cand_len += cand.len();
        // Closest reference length; ties favor the shorter one.
        ref_len += refs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .unwrap();

        for order in 1..=n {
            let cand_counts = ngram_counts(cand, order);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in refs {
                for (gram, count) in ngram_counts(r, order) {
                    let e = max_ref.entry(gram).or_insert(0);
                    *e = (*e).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                totals[order - 1] += count;
                matches[order - 1] += (*count).min(max_ref.get(gram).copied().unwrap_or(0));
            }
        }
    }

    let mut log_sum = 0.0;
    for order in 0..n {
        let (m, t) = if smooth && matches[order] == 0 {
            (1, totals[order].max(1) + 1)
        } else {
            (matches[order], totals[order])
        };
        if m == 0 || t == 0 {
            return Ok(0.0);
        }
        log_sum += (m as f64 / t as f64).ln();
    }
    let precision = (log_sum / n as f64).exp();
    let bp = if cand_len >= ref_len {
        1.0
    } else if cand_len == 0 {
        0.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(bp * precision)
}
