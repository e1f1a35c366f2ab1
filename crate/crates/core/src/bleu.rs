//! Corpus-level BLEU-4 with clipped n-gram precision and brevity penalty,
//! no smoothing.

use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BleuStats {
    /// Clipped matches per order 1..=4.
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-gram totals per order.
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl BleuStats {
    pub fn precisions(&self) -> [f64; MAX_ORDER] {
        let mut p = [0.0; MAX_ORDER];
        for n in 0..MAX_ORDER {
            if self.totals[n] > 0 {
                p[n] = self.matches[n] as f64 / self.totals[n] as f64;
            }
        }
        p
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    /// BLEU in [0, 1]. Any zero precision gives 0.
    pub fn score(&self) -> f64 {
        let p = self.precisions();
        if p.iter().any(|&x| x == 0.0) {
            return 0.0;
        }
        let log_mean = p.iter().map(|x| x.ln()).sum::<f64>() / MAX_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

fn ngram_counts<'a, 'b>(tokens: &'b [&'a str], n: usize) -> HashMap<&'b [&'a str], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Accumulates statistics over whitespace-tokenized sentence pairs.
pub fn corpus_stats<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<BleuStats> {
    if hyps.len() != refs.len() {
        return Err(Error::Data(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let mut st = BleuStats {
        matches: [0; MAX_ORDER],
        totals: [0; MAX_ORDER],
        hyp_len: 0,
        ref_len: 0,
    };
    for (h, r) in hyps.iter().zip(refs) {
        let h: Vec<&str> = h.as_ref().split_whitespace().collect();
        let r: Vec<&str> = r.as_ref().split_whitespace().collect();
        st.hyp_len += h.len();
        st.ref_len += r.len();
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let rc = ngram_counts(&r, n);
            st.totals[n - 1] += h.len().saturating_sub(n - 1);
            st.matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    Ok(st)
}

/// Corpus BLEU as a percentage.
pub fn corpus_bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    Ok(100.0 * corpus_stats(hyps, refs)?.score())
}

pub fn format_bleu(score: f64) -> String {
    format!("{score:.2}")
}
