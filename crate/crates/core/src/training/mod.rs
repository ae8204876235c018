//! Pre-training and multi-task fine-tuning: learning-rate schedules, the
//! adaptive-moment optimizer, span masking, proportional task mixing and the
//! checkpointed training loop.

mod engine;
mod masking;
mod mixture;
mod optimizer;
mod schedule;

pub use engine::{resume_pretraining, run_finetuning, run_pretraining, TrainOptions};
pub use masking::{apply_span_mask, mask_for_pretraining, reconstruct, DEFAULT_MASK_RATE};
pub use mixture::{MixtureSampler, Task, TaskInstance};
pub use optimizer::{optimizer_step, OptimizerState, BETA1, BETA2, EPSILON};
pub use schedule::{learning_rate, Schedule, ScheduleSpec};

use crate::model::ModelError;
use crate::tokenizer::{Vocabulary, EOS};

#[derive(Debug, thiserror::Error)]
pub enum TrainingError {
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("{spans} masked spans need more than the {sentinels} available sentinels")]
    TooManySpans { spans: usize, sentinels: usize },
    #[error("cannot mask sequence: {0}")]
    InvalidMaskInput(String),
    #[error("no training data for task {0}")]
    EmptyDataset(Task),
    #[error("task {0} given more than once")]
    DuplicateTask(Task),
    #[error("mixture has no tasks")]
    NoTasks,
    #[error("pre-training corpus has no usable lines")]
    EmptyCorpus,
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("gradient shapes differ from parameter shapes")]
    ShapeMismatch,
    #[error("checkpoint was trained with a different vocabulary")]
    VocabMismatch,
    #[error("invalid training options: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Encoder ids for `text`: at most `max_len` ids, the last one EOS.
pub fn source_ids(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    let mut ids = vocab.encode(text);
    ids.truncate(max_len.saturating_sub(1));
    ids.push(EOS);
    ids
}

/// Decoder targets for `text`, terminated by EOS within `max_len`.
pub fn target_ids(vocab: &Vocabulary, text: &str, max_len: usize) -> Vec<u32> {
    source_ids(vocab, text, max_len)
}
