use std::collections::HashMap;
use std::hash::Hash;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU on a 0–100 scale: geometric mean of clipped n-gram precisions
/// for orders `1..=max_n` times the brevity penalty. A zero unigram precision
/// gives 0; higher orders with no match are smoothed to `1 / (total + 1)`.
pub fn corpus_bleu<T: Eq + Hash>(candidates: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> f64 {
    assert_eq!(
        candidates.len(),
        references.len(),
        "corpus_bleu needs one reference per candidate"
    );
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_n {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if cand_len == 0 || matches[0] == 0 {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += p.ln() / max_n as f64;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Fraction of candidates identical to their reference.
pub fn sequence_accuracy<T: PartialEq>(candidates: &[Vec<T>], references: &[Vec<T>]) -> f64 {
    assert_eq!(candidates.len(), references.len());
    if candidates.is_empty() {
        return 0.0;
    }
    let hits = candidates.iter().zip(references).filter(|(c, r)| c == r).count();
    hits as f64 / candidates.len() as f64
}
