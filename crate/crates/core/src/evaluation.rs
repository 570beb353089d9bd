//! Corpus-level BLEU over un-BPE'd, tokenized translations.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

const MAX_ORDER: usize = 4;

/// Corpus BLEU-4 with its components.
#[derive(Debug, Clone, PartialEq)]
pub struct BleuReport {
    /// Score in `[0, 100]`.
    pub bleu: f64,
    /// Clipped n-gram precisions p1..p4.
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl fmt::Display for BleuReport {
    /// Single flat line: BLEU, p1..p4, BP, lengths, tab-separated.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.4}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\t{}",
            self.bleu,
            self.precisions[0],
            self.precisions[1],
            self.precisions[2],
            self.precisions[3],
            self.brevity_penalty,
            self.hyp_len,
            self.ref_len
        )
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Standard corpus BLEU-4: clipped n-gram counts aggregated over all
/// sentences, multiplied by the brevity penalty. With `smoothing`, one is
/// added to the matched and total counts for n ≥ 2 so that tiny corpora
/// without 4-gram overlap do not collapse to zero.
pub fn bleu(
    hypotheses: &[Vec<String>],
    references: &[Vec<String>],
    smoothing: bool,
) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Data(format!(
            "hypothesis count {} does not match reference count {}",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Data("cannot score an empty corpus".into()));
    }

    let mut matched = [0u64; MAX_ORDER];
    let mut total = [0u64; MAX_ORDER];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=MAX_ORDER {
            let hyp_counts = ngram_counts(hyp, n);
            let ref_counts = ngram_counts(reference, n);
            for (gram, &count) in &hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matched[n - 1] += count.min(clip);
            }
            total[n - 1] += hyp.len().saturating_sub(n - 1) as u64;
        }
    }

    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        let (num, den) = if smoothing && n >= 1 {
            (matched[n] + 1, total[n] + 1)
        } else {
            (matched[n], total[n])
        };
        precisions[n] = if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        };
    }

    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };

    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };

    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
    })
}
