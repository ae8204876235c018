//! Dataset files, pre-training corpus assembly, run configuration and the
//! end-to-end pipeline.

mod config;
mod pipeline;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{DatasetPaths, EvalSection, ModelSection, PhaseSection, RunConfig, TokenizerSection};
pub use pipeline::{
    predict, read_predictions, run_pipeline, write_predictions, PipelineOutput, PREDICTIONS_FILE,
    REPORT_JSON_FILE, REPORT_TSV_FILE,
};

use crate::abstraction::{abstract_method, lex_java, IdiomTable};
use crate::training::{Task, TaskInstance};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot access {path}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: empty {field}")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: record task {found} does not match dataset task {expected}")]
    TaskMismatch { line: usize, expected: Task, found: Task },
    #[error("{task}: record ({input:?}, {target:?}) occurs in both {first} and {second}")]
    SplitOverlap {
        task: Task,
        first: Split,
        second: Split,
        input: String,
        target: String,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("referenced path does not exist: {0}")]
    MissingPath(PathBuf),
    #[error(transparent)]
    Training(#[from] crate::training::TrainingError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Tokenizer(#[from] crate::tokenizer::TokenizerError),
    #[error(transparent)]
    Decode(#[from] crate::decoding::DecodeError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

impl DataError {
    /// True for errors caused by bad or missing input rather than a failure
    /// while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            DataError::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound
        ) || matches!(
            self,
            DataError::Parse { .. }
                | DataError::EmptyField { .. }
                | DataError::TaskMismatch { .. }
                | DataError::SplitOverlap { .. }
                | DataError::Config(_)
                | DataError::MissingPath(_)
        )
    }
}

pub(crate) fn read_text(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    let io = |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    std::fs::write(path, text).map_err(io)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Eval => "eval",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "eval" => Ok(Split::Eval),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFile {
    pub path: PathBuf,
    pub task: Task,
    pub split: Split,
    pub records: Vec<TaskInstance>,
}

impl DatasetFile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line, in file order.
    pub fn to_jsonl(&self) -> String {
        records_to_jsonl(&self.records)
    }
}

pub fn records_to_jsonl(records: &[TaskInstance]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Parses newline-delimited `{"task", "input", "target"}` records. Every
/// line is a record, so the count equals the file's line count.
pub fn parse_records(text: &str, task: Task) -> Result<Vec<TaskInstance>, DataError> {
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let line_no = i + 1;
            let record: TaskInstance = serde_json::from_str(line).map_err(|e| DataError::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            if record.task != task {
                return Err(DataError::TaskMismatch {
                    line: line_no,
                    expected: task,
                    found: record.task,
                });
            }
            for (field, value) in [("input", &record.input), ("target", &record.target)] {
                if value.trim().is_empty() {
                    return Err(DataError::EmptyField { line: line_no, field });
                }
            }
            Ok(record)
        })
        .collect()
}

pub fn ingest_dataset(path: &Path, task: Task, split: Split) -> Result<DatasetFile, DataError> {
    let records = parse_records(&read_text(path)?, task)?;
    log::info!("{}: {} {} records for {}", path.display(), records.len(), split, task);
    Ok(DatasetFile {
        path: path.to_path_buf(),
        task,
        split,
        records,
    })
}

pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fails when a normalized `(input, target)` pair of one task appears in two
/// different splits.
pub fn check_split_disjointness(files: &[DatasetFile]) -> Result<(), DataError> {
    let mut seen: HashMap<(Task, String, String), Split> = HashMap::new();
    for file in files {
        for r in &file.records {
            let key = (file.task, normalize_whitespace(&r.input), normalize_whitespace(&r.target));
            match seen.get(&key) {
                Some(&split) if split != file.split => {
                    return Err(DataError::SplitOverlap {
                        task: file.task,
                        first: split,
                        second: file.split,
                        input: key.1,
                        target: key.2,
                    });
                }
                Some(_) => {}
                None => {
                    seen.insert(key, file.split);
                }
            }
        }
    }
    Ok(())
}

/// Exact-match dedup of trimmed lines; the first occurrence is kept and the
/// number of removed lines returned.
pub fn dedup_corpus<S: AsRef<str>>(records: &[S]) -> (Vec<String>, usize) {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for r in records {
        let line = r.as_ref().trim();
        if seen.insert(line.to_string()) {
            out.push(line.to_string());
        }
    }
    let removed = records.len() - out.len();
    (out, removed)
}

/// A source method together with the comment sentences attached to it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MethodRecord {
    pub code: String,
    #[serde(default)]
    pub comments: Vec<String>,
}

pub fn parse_methods(text: &str) -> Result<Vec<MethodRecord>, DataError> {
    text.lines()
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

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PretrainCorpus {
    /// Single-line records, deduplicated, in emission order.
    pub lines: Vec<String>,
    pub raw: usize,
    pub abstracted: usize,
    pub comments: usize,
    pub duplicates_removed: usize,
    /// Methods whose abstracted line was skipped because lexing failed.
    pub lexer_failures: usize,
}

impl PretrainCorpus {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for l in &self.lines {
            out.push_str(l);
            out.push('\n');
        }
        out
    }
}

const SENTINEL_MARKER: &str = "<extra_id_";

#[derive(Clone, Copy, PartialEq)]
enum LineClass {
    Raw,
    Abstracted,
    Comment,
}

/// For every method emits its raw line, its abstracted line and its comment
/// lines, then deduplicates the whole stream. Empty lines and lines that
/// contain a sentinel marker are dropped.
pub fn build_pretraining_corpus(methods: &[MethodRecord], idioms: &IdiomTable) -> PretrainCorpus {
    let mut emitted: Vec<(LineClass, String)> = Vec::new();
    let mut lexer_failures = 0;
    for (i, m) in methods.iter().enumerate() {
        emitted.push((LineClass::Raw, normalize_whitespace(&m.code)));
        match lex_java(&m.code) {
            Ok(tokens) => emitted.push((LineClass::Abstracted, abstract_method(&tokens, idioms).to_line())),
            Err(e) => {
                lexer_failures += 1;
                log::warn!("method {}: abstraction skipped: {e}", i + 1);
            }
        }
        for c in &m.comments {
            emitted.push((LineClass::Comment, normalize_whitespace(c)));
        }
    }
    emitted.retain(|(_, l)| !l.is_empty() && !l.contains(SENTINEL_MARKER));
    let mut corpus = PretrainCorpus {
        lexer_failures,
        ..PretrainCorpus::default()
    };
    let mut seen = HashSet::new();
    for (class, line) in emitted {
        if !seen.insert(line.clone()) {
            corpus.duplicates_removed += 1;
            continue;
        }
        match class {
            LineClass::Raw => corpus.raw += 1,
            LineClass::Abstracted => corpus.abstracted += 1,
            LineClass::Comment => corpus.comments += 1,
        }
        corpus.lines.push(line);
    }
    corpus
}
