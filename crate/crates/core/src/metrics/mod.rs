//! Evaluation: Accuracy@K, BLEU, ROUGE-LCS, prediction-overlap between two
//! systems, and inference-time measurement.

mod bleu;
mod report;
mod timing;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu_a, bleu_n, corpus_bleu, modified_precision, BLEU_SMOOTHING};
pub use report::{evaluate, EvalReport, TaskReport};
pub use timing::{measure_inference_time, InferenceTable, DEFAULT_BEAM_SIZES};

use crate::training::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub task: Task,
    pub input: String,
    pub target: String,
    /// Rank order, best first.
    pub candidates: Vec<String>,
    #[serde(default)]
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("no prediction records")]
    EmptyRecords,
    #[error("K must be at least 1")]
    InvalidK,
    #[error("record {0} has no candidates")]
    NoCandidates(usize),
    #[error("candidate and reference lists differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
}

/// Whitespace tokenization used for every comparison.
pub fn tokens(text: &str) -> Vec<&str> {
    text.split_whitespace().collect()
}

/// True when the target appears among the first `k` candidates.
pub fn is_hit(record: &PredictionRecord, k: usize) -> bool {
    let target = tokens(&record.target);
    record
        .candidates
        .iter()
        .take(k)
        .any(|c| tokens(c) == target)
}

pub fn hits_at_k(records: &[PredictionRecord], k: usize) -> Vec<bool> {
    records.iter().map(|r| is_hit(r, k)).collect()
}

pub fn accuracy_at_k(records: &[PredictionRecord], k: usize) -> Result<f64, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let hits = records.iter().filter(|r| is_hit(r, k)).count();
    Ok(hits as f64 / records.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScore {
    pub precision: f64,
    pub recall: f64,
    pub f: f64,
}

pub fn lcs_length<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Precision over the candidate length, recall over the reference length,
/// F the unweighted harmonic mean.
pub fn rouge_lcs<T: PartialEq>(candidate: &[T], reference: &[T]) -> RougeScore {
    if candidate.is_empty() || reference.is_empty() {
        return RougeScore::default();
    }
    let lcs = lcs_length(candidate, reference) as f64;
    let precision = lcs / candidate.len() as f64;
    let recall = lcs / reference.len() as f64;
    let f = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    RougeScore {
        precision,
        recall,
        f,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub shared: f64,
    pub only_a: f64,
    pub only_b: f64,
    /// Set when neither system has a perfect prediction; all ratios are 0.
    pub empty_union: bool,
}

/// Compares the sets of instances two systems predict perfectly.
pub fn overlap_metrics<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Overlap {
    let union = a.union(b).count();
    if union == 0 {
        return Overlap {
            shared: 0.0,
            only_a: 0.0,
            only_b: 0.0,
            empty_union: true,
        };
    }
    let u = union as f64;
    Overlap {
        shared: a.intersection(b).count() as f64 / u,
        only_a: a.difference(b).count() as f64 / u,
        only_b: b.difference(a).count() as f64 / u,
        empty_union: false,
    }
}

/// Indices of records whose top candidate matches the target.
pub fn perfect_predictions(records: &[PredictionRecord]) -> BTreeSet<usize> {
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| is_hit(r, 1))
        .map(|(i, _)| i)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(target: &str, candidates: &[&str]) -> PredictionRecord {
        PredictionRecord {
            task: Task::BfSmall,
            input: "x".into(),
            target: target.into(),
            candidates: candidates.iter().map(|c| c.to_string()).collect(),
            scores: vec![],
        }
    }

    #[test]
    fn accuracy_counts_hits_within_k() {
        let records = vec![
            record("a b", &["a b", "c"]),
            record("a b", &["c", "a  b"]),
            record("d", &["e", "f", "g", "h", "d"]),
            record("z", &["y"]),
        ];
        assert_eq!(accuracy_at_k(&records, 1).unwrap(), 0.25);
        assert_eq!(accuracy_at_k(&records, 5).unwrap(), 0.75);
        assert_eq!(accuracy_at_k(&[], 1), Err(MetricsError::EmptyRecords));
        assert_eq!(accuracy_at_k(&records, 0), Err(MetricsError::InvalidK));
    }

    #[test]
    fn rouge_example() {
        let reference = tokens("a b c d");
        let candidate = tokens("a c d");
        let r = rouge_lcs(&candidate, &reference);
        assert_eq!((r.precision, r.recall), (1.0, 0.75));
        assert!((r.f - 6.0 / 7.0).abs() < 1e-15);
        assert_eq!(rouge_lcs(&tokens("x y"), &tokens("p q")), RougeScore::default());
        assert_eq!(rouge_lcs::<&str>(&[], &[]), RougeScore::default());
    }

    #[test]
    fn overlap_examples() {
        let a: BTreeSet<_> = [1, 2, 3].into();
        let b: BTreeSet<_> = [2, 3, 4].into();
        let o = overlap_metrics(&a, &b);
        assert_eq!((o.shared, o.only_a, o.only_b, o.empty_union), (0.5, 0.25, 0.25, false));
        let same = overlap_metrics(&a, &a);
        assert_eq!((same.shared, same.only_a, same.only_b), (1.0, 0.0, 0.0));
        let c: BTreeSet<_> = [7].into();
        let d = overlap_metrics(&a, &c);
        assert_eq!((d.shared, d.only_a, d.only_b), (0.0, 0.75, 0.25));
        assert!(overlap_metrics::<i32>(&BTreeSet::new(), &BTreeSet::new()).empty_union);
    }

    proptest! {
        #[test]
        fn accuracy_monotone_in_k(
            data in prop::collection::vec((0u8..3, prop::collection::vec(0u8..3, 1..6)), 1..20),
            k in 1usize..6,
        ) {
            let records: Vec<_> = data
                .iter()
                .map(|(t, cs)| PredictionRecord {
                    task: Task::Cs,
                    input: String::new(),
                    target: t.to_string(),
                    candidates: cs.iter().map(|c| c.to_string()).collect(),
                    scores: vec![],
                })
                .collect();
            prop_assert!(accuracy_at_k(&records, k + 1).unwrap() >= accuracy_at_k(&records, k).unwrap());
        }

        #[test]
        fn rouge_identity(x in prop::collection::vec(0u8..5, 1..30)) {
            prop_assert_eq!(rouge_lcs(&x, &x), RougeScore { precision: 1.0, recall: 1.0, f: 1.0 });
        }

        #[test]
        fn overlap_sums_to_one(
            a in prop::collection::btree_set(0u8..20, 0..10),
            b in prop::collection::btree_set(0u8..20, 0..10),
        ) {
            let o = overlap_metrics(&a, &b);
            if a.is_empty() && b.is_empty() {
                prop_assert!(o.empty_union);
            } else {
                prop_assert!((o.shared + o.only_a + o.only_b - 1.0).abs() < 1e-12);
            }
        }
    }
}
