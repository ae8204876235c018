use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{bleu_a, corpus_bleu, hits_at_k, rouge_lcs, tokens, MetricsError, PredictionRecord, RougeScore};

/// Metrics for one group of records. BLEU and ROUGE score the top-ranked
/// candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub count: usize,
    /// Accuracy@K keyed by K.
    pub accuracy: BTreeMap<usize, f64>,
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub bleu_a: f64,
    /// Mean over records.
    pub rouge: RougeScore,
    pub hits_at_1: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: TaskReport,
    pub per_task: BTreeMap<String, TaskReport>,
}

fn task_report(records: &[&PredictionRecord], ks: &[usize]) -> Result<TaskReport, MetricsError> {
    let owned: Vec<PredictionRecord> = records.iter().map(|r| (*r).clone()).collect();
    let mut accuracy = BTreeMap::new();
    for &k in ks {
        accuracy.insert(k, super::accuracy_at_k(&owned, k)?);
    }
    let candidates: Vec<Vec<&str>> = records.iter().map(|r| tokens(&r.candidates[0])).collect();
    let references: Vec<Vec<&str>> = records.iter().map(|r| tokens(&r.target)).collect();
    let bleu: Vec<f64> = (1..=4)
        .map(|n| corpus_bleu(&candidates, &references, n))
        .collect::<Result<_, _>>()?;
    let mut rouge = RougeScore::default();
    for (c, r) in candidates.iter().zip(&references) {
        let s = rouge_lcs(c, r);
        rouge.precision += s.precision;
        rouge.recall += s.recall;
        rouge.f += s.f;
    }
    let n = records.len() as f64;
    rouge.precision /= n;
    rouge.recall /= n;
    rouge.f /= n;
    Ok(TaskReport {
        count: records.len(),
        accuracy,
        bleu_1: bleu[0],
        bleu_2: bleu[1],
        bleu_3: bleu[2],
        bleu_4: bleu[3],
        bleu_a: bleu_a(&candidates, &references)?,
        rouge,
        hits_at_1: hits_at_k(&owned, 1),
    })
}

/// Builds the overall and per-task report for the given K values.
pub fn evaluate(records: &[PredictionRecord], ks: &[usize]) -> Result<EvalReport, MetricsError> {
    if records.is_empty() {
        return Err(MetricsError::EmptyRecords);
    }
    if ks.contains(&0) {
        return Err(MetricsError::InvalidK);
    }
    if let Some(i) = records.iter().position(|r| r.candidates.is_empty()) {
        return Err(MetricsError::NoCandidates(i));
    }
    let all: Vec<&PredictionRecord> = records.iter().collect();
    let mut groups: BTreeMap<String, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.task.to_string()).or_default().push(r);
    }
    let per_task = groups
        .into_iter()
        .map(|(task, rs)| Ok((task, task_report(&rs, ks)?)))
        .collect::<Result<_, MetricsError>>()?;
    Ok(EvalReport {
        overall: task_report(&all, ks)?,
        per_task,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Flat `metric<TAB>value` lines, overall first, then per task.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        let sections = std::iter::once(("overall", &self.overall))
            .chain(self.per_task.iter().map(|(t, r)| (t.as_str(), r)));
        for (name, r) in sections {
            let _ = writeln!(out, "{name}.count\t{}", r.count);
            for (k, acc) in &r.accuracy {
                let _ = writeln!(out, "{name}.accuracy@{k}\t{acc:.6}");
            }
            for (metric, v) in [
                ("bleu_1", r.bleu_1),
                ("bleu_2", r.bleu_2),
                ("bleu_3", r.bleu_3),
                ("bleu_4", r.bleu_4),
                ("bleu_a", r.bleu_a),
                ("rouge_p", r.rouge.precision),
                ("rouge_r", r.rouge.recall),
                ("rouge_f", r.rouge.f),
            ] {
                let _ = writeln!(out, "{name}.{metric}\t{v:.6}");
            }
        }
        out
    }
}
