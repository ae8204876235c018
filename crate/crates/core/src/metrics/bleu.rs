use std::collections::HashMap;
use std::hash::Hash;

use super::MetricsError;

/// Numerator used in place of a zero clipped count.
pub const BLEU_SMOOTHING: f64 = 1e-9;

fn ngram_counts<T: Eq + Hash>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// `(clipped matches, candidate n-gram count)` for order `n`.
pub fn modified_precision<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let clipped = cand
        .iter()
        .map(|(gram, &c)| c.min(refs.get(gram).copied().unwrap_or(0)))
        .sum();
    (clipped, candidate.len().saturating_sub(n - 1))
}

/// Geometric mean of the per-order precisions times the brevity penalty.
/// Orders for which the candidate has no n-grams are left out of the mean.
fn combine(clipped: &[usize], totals: &[usize], cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        return 0.0;
    }
    let (mut log_sum, mut orders) = (0.0, 0);
    for (&c, &t) in clipped.iter().zip(totals) {
        if t == 0 {
            continue;
        }
        let numerator = if c == 0 { BLEU_SMOOTHING } else { c as f64 };
        log_sum += (numerator / t as f64).ln();
        orders += 1;
    }
    let penalty = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    penalty * (log_sum / orders as f64).exp()
}

/// Sentence-level BLEU up to order `n`.
pub fn bleu_n<T: Eq + Hash>(candidate: &[T], reference: &[T], n: usize) -> f64 {
    assert!(n >= 1, "BLEU order must be at least 1");
    let (clipped, totals): (Vec<_>, Vec<_>) = (1..=n)
        .map(|k| modified_precision(candidate, reference, k))
        .unzip();
    combine(&clipped, &totals, candidate.len(), reference.len())
}

/// Corpus-level BLEU: counts and lengths are summed over all pairs before
/// the precisions are formed.
pub fn corpus_bleu<C, R, T>(candidates: &[C], references: &[R], n: usize) -> Result<f64, MetricsError>
where
    C: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + Hash,
{
    assert!(n >= 1, "BLEU order must be at least 1");
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch(candidates.len(), references.len()));
    }
    let mut clipped = vec![0; n];
    let mut totals = vec![0; n];
    let (mut cand_len, mut ref_len) = (0, 0);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        for k in 1..=n {
            let (m, t) = modified_precision(c, r, k);
            clipped[k - 1] += m;
            totals[k - 1] += t;
        }
        cand_len += c.len();
        ref_len += r.len();
    }
    Ok(combine(&clipped, &totals, cand_len, ref_len))
}

/// Geometric mean of corpus BLEU-1 through BLEU-4.
pub fn bleu_a<C, R, T>(candidates: &[C], references: &[R]) -> Result<f64, MetricsError>
where
    C: AsRef<[T]>,
    R: AsRef<[T]>,
    T: Eq + Hash,
{
    let mut product = 1.0;
    for n in 1..=4 {
        product *= corpus_bleu(candidates, references, n)?;
    }
    Ok(product.powf(0.25))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::tokens;
    use proptest::prelude::*;

    #[test]
    fn clipped_unigram_precision() {
        let cand = tokens("the the the the the the the");
        let reference = tokens("the cat is on the mat");
        assert_eq!(modified_precision(&cand, &reference, 1), (2, 7));
    }

    #[test]
    fn identity_and_disjoint() {
        let x = tokens("int a = b ;");
        for n in 1..=4 {
            assert_eq!(bleu_n(&x, &x, n), 1.0);
        }
        let short = tokens("return");
        assert_eq!(bleu_n(&short, &short, 4), 1.0);
        let y = tokens("p q r s t");
        assert!(bleu_n(&x, &y, 4) < 1e-8);
        assert_eq!(bleu_n::<&str>(&[], &x, 2), 0.0);
    }

    #[test]
    fn brevity_penalty() {
        let reference = tokens("a b c d");
        let cand = tokens("a b");
        let expected = (1.0f64 - 2.0).exp();
        assert!((bleu_n(&cand, &reference, 1) - expected).abs() < 1e-15);
    }

    #[test]
    fn bleu_a_of_identical_pairs() {
        let pairs = [tokens("a b c"), tokens("if ( x ) return y ;")];
        assert!((bleu_a(&pairs, &pairs).unwrap() - 1.0).abs() < 1e-15);
        assert!(bleu_a(&pairs, &pairs[..1]).is_err());
    }

    proptest! {
        #[test]
        fn bleu_in_unit_interval(
            c in prop::collection::vec(0u8..6, 0..15),
            r in prop::collection::vec(0u8..6, 0..15),
            n in 1usize..5,
        ) {
            let b = bleu_n(&c, &r, n);
            prop_assert!((0.0..=1.0).contains(&b));
        }

        #[test]
        fn corpus_bleu_is_order_independent(
            pairs in prop::collection::vec(
                (prop::collection::vec(0u8..5, 1..10), prop::collection::vec(0u8..5, 1..10)),
                1..8,
            ),
        ) {
            let (c, r): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let (mut rc, mut rr) = (c.clone(), r.clone());
            rc.reverse();
            rr.reverse();
            let a = corpus_bleu(&c, &r, 4).unwrap();
            let b = corpus_bleu(&rc, &rr, 4).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
