use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    learning_rate, mask_for_pretraining, optimizer_step, source_ids, target_ids, MixtureSampler,
    OptimizerState, Schedule, ScheduleSpec, Task, TrainingError, DEFAULT_MASK_RATE,
};
use crate::model::{backward, init_params, Batch, Checkpoint, ModelConfig, Phase};
use crate::tokenizer::{Vocabulary, EOS};

const MASK_ATTEMPTS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub batch_size: usize,
    /// Step budget of the phase; the schedule spans exactly this many steps.
    pub steps: u64,
    pub seed: u64,
    /// Defaults to `max(1, steps / 10)`.
    pub checkpoint_every: Option<u64>,
    /// Receives `loss.tsv` and periodic `checkpoint-<step>.bin` files.
    pub output_dir: Option<PathBuf>,
    pub mask_rate: f64,
}

impl TrainOptions {
    pub fn new(steps: u64, seed: u64) -> Self {
        TrainOptions {
            batch_size: 16,
            steps,
            seed,
            checkpoint_every: None,
            output_dir: None,
            mask_rate: DEFAULT_MASK_RATE,
        }
    }

    fn cadence(&self) -> u64 {
        self.checkpoint_every.unwrap_or(self.steps / 10).max(1)
    }

    fn validate(&self) -> Result<(), TrainingError> {
        if self.batch_size == 0 {
            return Err(TrainingError::InvalidOptions("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Batch content is a function of `(seed, step)` alone, so a resumed run
/// sees the same batches as an uninterrupted one.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step);
    rng
}

fn check_vocab(ckpt: &Checkpoint, vocab: &Vocabulary) -> Result<(), TrainingError> {
    if ckpt.vocab_hash != vocab.content_hash() || ckpt.config().vocab_size != vocab.len() {
        return Err(TrainingError::VocabMismatch);
    }
    Ok(())
}

fn train_loop(
    mut ckpt: Checkpoint,
    schedule: Schedule,
    opts: &TrainOptions,
    mut make_batch: impl FnMut(&mut ChaCha8Rng) -> Result<(Batch, String), TrainingError>,
) -> Result<Checkpoint, TrainingError> {
    opts.validate()?;
    schedule.validate()?;
    let spec = ScheduleSpec::new(schedule, opts.steps);
    if ckpt.step > opts.steps {
        return Err(TrainingError::StepOutOfRange {
            step: ckpt.step,
            total: opts.steps,
        });
    }
    let mut loss_log = match &opts.output_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(dir.join("loss.tsv"))?,
            )
        }
        None => None,
    };
    let every = opts.cadence();
    for step in ckpt.step..opts.steps {
        let mut rng = step_rng(opts.seed, step);
        let (batch, label) = make_batch(&mut rng)?;
        let dropout_seed = rng.random::<u64>();
        let out = backward(&ckpt.params, &batch, dropout_seed)?;
        let rate = learning_rate(&spec, step)?;
        optimizer_step(&mut ckpt.params, &out.grads, &mut ckpt.optimizer, rate)?;
        ckpt.params.round_to_f32();
        ckpt.optimizer.round_to_f32();
        ckpt.step = step + 1;
        ckpt.loss_history.push(out.loss);
        if let Some(log) = loss_log.as_mut() {
            writeln!(log, "{}\t{}\t{:.6}\t{:e}", ckpt.step, label, out.loss, rate)?;
        }
        if ckpt.step % every == 0 {
            log::info!("step {} {} loss {:.4} lr {:e}", ckpt.step, label, out.loss, rate);
            if let Some(dir) = &opts.output_dir {
                ckpt.save(&dir.join(format!("checkpoint-{}.bin", ckpt.step)))?;
            }
        }
    }
    Ok(ckpt)
}

/// Pre-trains a freshly initialized model (parameters seeded by `opts.seed`).
pub fn run_pretraining(
    config: &ModelConfig,
    vocab: &Vocabulary,
    corpus: &[String],
    schedule: Schedule,
    opts: &TrainOptions,
) -> Result<Checkpoint, TrainingError> {
    config.validate()?;
    let ckpt = Checkpoint::new(init_params(config, opts.seed), vocab.content_hash());
    resume_pretraining(ckpt, vocab, corpus, schedule, opts)
}

/// Continues pre-training from `ckpt.step` up to `opts.steps`.
pub fn resume_pretraining(
    ckpt: Checkpoint,
    vocab: &Vocabulary,
    corpus: &[String],
    schedule: Schedule,
    opts: &TrainOptions,
) -> Result<Checkpoint, TrainingError> {
    check_vocab(&ckpt, vocab)?;
    if ckpt.phase != Phase::Pretrain {
        return Err(TrainingError::InvalidOptions(
            "checkpoint is already in the fine-tuning phase".into(),
        ));
    }
    let max_source = ckpt.config().max_source_len;
    let lines: Vec<Vec<u32>> = corpus
        .iter()
        .map(|line| {
            let mut ids = vocab.encode(line);
            ids.truncate(max_source.saturating_sub(1).max(1));
            ids
        })
        .filter(|ids| !ids.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(TrainingError::EmptyCorpus);
    }
    let (batch_size, rate) = (opts.batch_size, opts.mask_rate);
    train_loop(ckpt, schedule, opts, |rng| {
        let mut pairs = Vec::with_capacity(batch_size);
        for _ in 0..batch_size {
            let ids = &lines[rng.random_range(0..lines.len())];
            let mut attempt = 0;
            let (mut input, target) = loop {
                match mask_for_pretraining(ids, rate, vocab, rng) {
                    Err(TrainingError::TooManySpans { .. }) if attempt + 1 < MASK_ATTEMPTS => {
                        attempt += 1;
                    }
                    other => break other?,
                }
            };
            input.push(EOS);
            pairs.push((input, target));
        }
        Ok((Batch::from_pairs(&pairs), Task::Pretrain.to_string()))
    })
}

/// Fine-tunes on the task mixture. A pre-training checkpoint starts a new
/// phase (step counter, loss history and optimizer moments reset); a
/// fine-tuning checkpoint resumes from its step.
pub fn run_finetuning(
    mut ckpt: Checkpoint,
    vocab: &Vocabulary,
    sampler: &MixtureSampler,
    schedule: Schedule,
    opts: &TrainOptions,
) -> Result<Checkpoint, TrainingError> {
    check_vocab(&ckpt, vocab)?;
    if ckpt.phase == Phase::Pretrain {
        ckpt.phase = Phase::Finetune;
        ckpt.step = 0;
        ckpt.loss_history.clear();
        ckpt.optimizer = OptimizerState::new(&ckpt.params);
    }
    let config = ckpt.config().clone();
    let batch_size = opts.batch_size;
    train_loop(ckpt, schedule, opts, |rng| {
        let instances = sampler.sample_batch(batch_size, rng);
        let pairs: Vec<_> = instances
            .iter()
            .map(|inst| {
                (
                    source_ids(vocab, &inst.input, config.max_source_len),
                    target_ids(vocab, &inst.target, config.max_target_len),
                )
            })
            .collect();
        let first = instances[0].task;
        let label = if instances.iter().all(|i| i.task == first) {
            first.to_string()
        } else {
            "mixed".to_string()
        };
        Ok((Batch::from_pairs(&pairs), label))
    })
}
