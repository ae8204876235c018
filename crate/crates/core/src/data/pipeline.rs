use std::path::{Path, PathBuf};

use super::{
    check_split_disjointness, ingest_dataset, read_text, write_text, DataError, DatasetFile, RunConfig,
    Split,
};
use crate::decoding::{beam_search, greedy_decode, DecodeOptions, Hypothesis};
use crate::metrics::{evaluate, EvalReport, PredictionRecord};
use crate::model::{init_params, Checkpoint, ModelParams};
use crate::tokenizer::{train_vocabulary, Vocabulary};
use crate::training::{
    run_finetuning, run_pretraining, source_ids, MixtureSampler, TaskInstance, TrainOptions,
};

pub const PREDICTIONS_FILE: &str = "predictions.jsonl";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_TSV_FILE: &str = "report.tsv";

/// Decodes every instance with beam size `k` (greedy when `k == 1`).
/// Candidates are best first.
pub fn predict(
    params: &ModelParams,
    vocab: &Vocabulary,
    instances: &[TaskInstance],
    k: usize,
    max_length: usize,
) -> Result<Vec<PredictionRecord>, DataError> {
    let max_source = params.config.max_source_len;
    instances
        .iter()
        .map(|inst| {
            let input = source_ids(vocab, &inst.prefixed_input(), max_source);
            let hyps: Vec<Hypothesis> = if k == 1 {
                vec![greedy_decode(params, &input, max_length)?]
            } else {
                beam_search(params, &input, &DecodeOptions::new(k, max_length))?
            };
            let candidates = hyps
                .iter()
                .map(|h| vocab.decode(&h.ids))
                .collect::<Result<_, _>>()?;
            Ok(PredictionRecord {
                task: inst.task,
                input: inst.input.clone(),
                target: inst.target.clone(),
                candidates,
                scores: hyps.iter().map(|h| h.score).collect(),
            })
        })
        .collect()
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<(), DataError> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("prediction serializes"));
        out.push('\n');
    }
    write_text(path, &out)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, DataError> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub checkpoint: Checkpoint,
    pub vocab: Vocabulary,
    pub predictions: Vec<PredictionRecord>,
    pub report: EvalReport,
    pub predictions_path: PathBuf,
}

fn phase_options(phase: &super::PhaseSection, run_seed: u64, dir: PathBuf) -> TrainOptions {
    let mut opts = TrainOptions::new(phase.steps, phase.seed.unwrap_or(run_seed));
    opts.batch_size = phase.batch_size;
    opts.checkpoint_every = phase.checkpoint_every;
    opts.mask_rate = phase.mask_rate;
    opts.output_dir = Some(dir);
    opts
}

fn remove_stale_log(dir: &Path) -> Result<(), DataError> {
    let path = dir.join("loss.tsv");
    match std::fs::remove_file(&path) {
        Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(DataError::Io { path, source: e }),
        _ => Ok(()),
    }
}

/// Ingest, tokenizer, optional pre-training, fine-tuning, prediction on every
/// test split and evaluation. All artifacts land in the configured output
/// directory; the run is a pure function of the configuration and its
/// input files.
pub fn run_pipeline(config: &RunConfig) -> Result<PipelineOutput, DataError> {
    config.validate()?;
    let out = &config.output_dir;

    let mut train_sets = Vec::new();
    let mut test_records = Vec::new();
    let mut files: Vec<DatasetFile> = Vec::new();
    for d in &config.datasets {
        let train = ingest_dataset(&d.train, d.task, Split::Train)?;
        let test = ingest_dataset(&d.test, d.task, Split::Test)?;
        if let Some(eval) = &d.eval {
            files.push(ingest_dataset(eval, d.task, Split::Eval)?);
        }
        train_sets.push((d.task, train.records.clone()));
        test_records.extend(test.records.iter().cloned());
        files.push(train);
        files.push(test);
    }
    check_split_disjointness(&files)?;

    let corpus: Vec<String> = match config.pretrain.as_ref().and_then(|p| p.corpus.as_deref()) {
        Some(path) => read_text(path)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect(),
        None => Vec::new(),
    };

    let vocab = match &config.tokenizer.path {
        Some(path) => Vocabulary::parse_file(&read_text(path)?)?,
        None => {
            let mut texts = corpus.clone();
            for (_, records) in &train_sets {
                for r in records {
                    texts.push(r.prefixed_input());
                    texts.push(r.target.clone());
                }
            }
            let size = config.tokenizer.vocab_size.expect("validated");
            train_vocabulary(&texts, size, config.tokenizer.num_sentinels)?
        }
    };
    write_text(&out.join("tokenizer.vocab"), &vocab.to_file())?;

    let model_config = config.model.build(vocab.len());
    model_config.validate()?;

    let checkpoint = match &config.pretrain {
        Some(phase) => {
            let dir = out.join("pretrain");
            remove_stale_log(&dir)?;
            let opts = phase_options(phase, config.seed, dir);
            run_pretraining(&model_config, &vocab, &corpus, phase.schedule, &opts)?
        }
        None => Checkpoint::new(init_params(&model_config, config.seed), vocab.content_hash()),
    };

    let sampler = MixtureSampler::new(train_sets)?;
    let dir = out.join("finetune");
    remove_stale_log(&dir)?;
    let opts = phase_options(&config.finetune, config.seed, dir);
    let checkpoint = run_finetuning(checkpoint, &vocab, &sampler, config.finetune.schedule, &opts)?;
    checkpoint.save(&out.join("model.bin"))?;

    let predictions = predict(
        &checkpoint.params,
        &vocab,
        &test_records,
        config.max_k(),
        config.eval.max_length,
    )?;
    let predictions_path = out.join(PREDICTIONS_FILE);
    write_predictions(&predictions_path, &predictions)?;
    let report = evaluate(&predictions, &config.eval.ks)?;
    write_text(&out.join(REPORT_JSON_FILE), &report.to_json())?;
    write_text(&out.join(REPORT_TSV_FILE), &report.to_tsv())?;

    Ok(PipelineOutput {
        checkpoint,
        vocab,
        predictions,
        report,
        predictions_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::Task;

    #[test]
    fn predictions_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.jsonl");
        let records = vec![PredictionRecord {
            task: Task::MgIdent,
            input: "a ( b )".into(),
            target: "a ( c )".into(),
            candidates: vec!["a ( c )".into(), "a ( b )".into()],
            scores: vec![-0.25, -1.5],
        }];
        write_predictions(&path, &records).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), records);
    }
}
