//! Restoration metrics: prefix exact-match, smoothed sentence BLEU-4, and
//! context-length bucketing.

use crate::error::{Error, Result};

/// Identifier for the BLEU variant pinned here, recorded in reports so the
/// numbers are self-describing.
pub const BLEU_VARIANT: &str = "sentence-bleu4-add1-when-zero-bp";

/// Proportion of the reference covered by the longest exactly-matching
/// prefix of the hypothesis; everything past the first mismatch is ignored.
pub fn exact_match(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("exact match needs a nonempty reference".into()));
    }
    let matched = reference
        .iter()
        .zip(hypothesis.iter())
        .take_while(|(a, b)| a == b)
        .count();
    Ok(matched as f64 / reference.len() as f64)
}

fn ngram_counts(seq: &[u32], n: usize) -> std::collections::HashMap<&[u32], usize> {
    let mut map = std::collections::HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

/// Sentence-level BLEU-4: geometric mean of clipped n-gram precisions for
/// n = 1..4, add-one smoothing only where the match count would otherwise
/// be zero, and the standard brevity penalty. Empty hypothesis scores 0.
pub fn bleu(reference: &[u32], hypothesis: &[u32]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Precondition("bleu needs a nonempty reference".into()));
    }
    if hypothesis.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0f64;
    for n in 1..=4 {
        let total = hypothesis.len().saturating_sub(n - 1);
        let ref_counts = ngram_counts(reference, n);
        let hyp_counts = ngram_counts(hypothesis, n);
        let matched: usize = hyp_counts
            .iter()
            .map(|(g, c)| (*c).min(ref_counts.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if matched == 0 {
            (matched + 1) as f64 / (total + 1) as f64
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
    }
    let geo = (log_sum / 4.0).exp();
    let bp = if hypothesis.len() >= reference.len() {
        1.0
    } else {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    };
    Ok(bp * geo)
}

/// Map a context length to the nearest multiple of 10 under the half-open
/// rule [center-5, center+5); lengths below 5 map to the minimum bucket 10.
pub fn bucket(context_len: usize) -> usize {
    assert!(context_len >= 1, "bucket needs a positive length");
    let b = (context_len + 5) / 10 * 10;
    b.max(10)
}
