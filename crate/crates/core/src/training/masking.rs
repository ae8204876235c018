use rand::Rng;

use super::TrainingError;
use crate::tokenizer::{Vocabulary, EOS};

pub const DEFAULT_MASK_RATE: f64 = 0.15;

/// Replaces each maximal run of masked positions by the next sentinel.
///
/// The target lists, for every run, its sentinel followed by the run's
/// original tokens, then one closing sentinel and EOS.
pub fn apply_span_mask(
    ids: &[u32],
    masked: &[bool],
    vocab: &Vocabulary,
) -> Result<(Vec<u32>, Vec<u32>), TrainingError> {
    assert_eq!(ids.len(), masked.len(), "one mask flag per token");
    let runs = masked
        .iter()
        .enumerate()
        .filter(|&(i, &m)| m && (i == 0 || !masked[i - 1]))
        .count();
    if runs + 1 > vocab.num_sentinels() {
        return Err(TrainingError::TooManySpans {
            spans: runs,
            sentinels: vocab.num_sentinels(),
        });
    }
    let mut input = Vec::with_capacity(ids.len());
    let mut target = Vec::new();
    let mut next = 0;
    for (i, (&id, &m)) in ids.iter().zip(masked).enumerate() {
        if !m {
            input.push(id);
            continue;
        }
        if i == 0 || !masked[i - 1] {
            let sentinel = vocab.sentinel(next);
            next += 1;
            input.push(sentinel);
            target.push(sentinel);
        }
        target.push(id);
    }
    target.push(vocab.sentinel(next));
    target.push(EOS);
    Ok((input, target))
}

/// Draws an independent mask per position (at least one position masked)
/// and applies [`apply_span_mask`].
pub fn mask_for_pretraining<R: Rng + ?Sized>(
    ids: &[u32],
    rate: f64,
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<(Vec<u32>, Vec<u32>), TrainingError> {
    if ids.is_empty() {
        return Err(TrainingError::InvalidMaskInput("empty sequence".into()));
    }
    if !(rate > 0.0 && rate < 1.0) {
        return Err(TrainingError::InvalidMaskInput(format!(
            "mask rate {rate} outside (0, 1)"
        )));
    }
    if let Some(&id) = ids.iter().find(|&&id| vocab.sentinel_index(id).is_some()) {
        return Err(TrainingError::InvalidMaskInput(format!(
            "sequence already contains sentinel id {id}"
        )));
    }
    let mut masked: Vec<bool> = ids.iter().map(|_| rng.random::<f64>() < rate).collect();
    if !masked.contains(&true) {
        let forced = rng.random_range(0..ids.len());
        masked[forced] = true;
    }
    apply_span_mask(ids, &masked, vocab)
}

/// Inverse of the span mask: substitutes each input sentinel by the tokens
/// that follow it in the target.
pub fn reconstruct(input: &[u32], target: &[u32], vocab: &Vocabulary) -> Vec<u32> {
    let mut spans: Vec<&[u32]> = Vec::new();
    let mut start = None;
    for (i, &id) in target.iter().enumerate() {
        if vocab.sentinel_index(id).is_some() || id == EOS {
            if let Some(s) = start {
                spans.push(&target[s..i]);
            }
            start = Some(i + 1);
        }
    }
    let mut out = Vec::new();
    for &id in input {
        match vocab.sentinel_index(id) {
            Some(k) => out.extend_from_slice(spans.get(k).copied().unwrap_or(&[])),
            None => out.push(id),
        }
    }
    out
}
