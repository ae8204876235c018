use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_text, DataError};
use crate::model::{ModelConfig, Preset};
use crate::training::{Schedule, Task, DEFAULT_MASK_RATE};

/// Everything a pipeline run depends on. Relative paths are resolved
/// against the directory holding the configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialization and every phase that sets no seed of its own.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub tokenizer: TokenizerSection,
    #[serde(default)]
    pub pretrain: Option<PhaseSection>,
    pub finetune: PhaseSection,
    pub datasets: Vec<DatasetPaths>,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub preset: Preset,
    pub num_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub d_ff: Option<usize>,
    pub d_kv: Option<usize>,
    pub num_heads: Option<usize>,
    pub num_rel_buckets: Option<usize>,
    pub max_rel_distance: Option<usize>,
    pub dropout_rate: Option<f64>,
    pub max_source_len: Option<usize>,
    pub max_target_len: Option<usize>,
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize) -> ModelConfig {
        let mut c = ModelConfig::preset(self.preset, vocab_size);
        macro_rules! apply {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        apply!(
            num_layers,
            d_model,
            d_ff,
            d_kv,
            num_heads,
            num_rel_buckets,
            max_rel_distance,
            dropout_rate,
            max_source_len,
            max_target_len
        );
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerSection {
    /// Existing vocabulary file; when absent one is trained on the run's
    /// texts.
    pub path: Option<PathBuf>,
    pub vocab_size: Option<usize>,
    #[serde(default = "default_sentinels")]
    pub num_sentinels: usize,
}

fn default_sentinels() -> usize {
    crate::tokenizer::DEFAULT_NUM_SENTINELS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    /// Line-per-record corpus; required for pre-training.
    pub corpus: Option<PathBuf>,
    pub steps: u64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "Schedule::slanted_triangular")]
    pub schedule: Schedule,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
}

fn default_batch_size() -> usize {
    16
}

fn default_mask_rate() -> f64 {
    DEFAULT_MASK_RATE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetPaths {
    pub task: Task,
    pub train: PathBuf,
    pub eval: Option<PathBuf>,
    pub test: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub ks: Vec<usize>,
    pub max_length: usize,
}

impl RunConfig {
    /// Parses, resolves relative paths against `base_dir` and validates.
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, DataError> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| DataError::Config(e.to_string()))?;
        config.resolve(base_dir);
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml_str(&read_text(path)?, base)
    }

    fn resolve(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        join(&mut self.output_dir);
        if let Some(p) = self.tokenizer.path.as_mut() {
            join(p);
        }
        if let Some(p) = self.pretrain.as_mut().and_then(|s| s.corpus.as_mut()) {
            join(p);
        }
        for d in &mut self.datasets {
            join(&mut d.train);
            join(&mut d.test);
            if let Some(p) = d.eval.as_mut() {
                join(p);
            }
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |msg: &str| Err(DataError::Config(msg.to_string()));
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return bad("eval.ks must list K values of at least 1");
        }
        if self.eval.max_length == 0 {
            return bad("eval.max_length must be at least 1");
        }
        if self.datasets.is_empty() {
            return bad("at least one dataset is required");
        }
        for (i, d) in self.datasets.iter().enumerate() {
            if d.task == Task::Pretrain {
                return bad("datasets must name a fine-tuning task");
            }
            if self.datasets[..i].iter().any(|o| o.task == d.task) {
                return Err(DataError::Config(format!("task {} listed twice", d.task)));
            }
        }
        if self.tokenizer.path.is_none() && self.tokenizer.vocab_size.is_none() {
            return bad("tokenizer needs either path or vocab_size");
        }
        for (name, phase) in [("pretrain", self.pretrain.as_ref()), ("finetune", Some(&self.finetune))] {
            let Some(phase) = phase else { continue };
            if phase.batch_size == 0 {
                return Err(DataError::Config(format!("{name}.batch_size must be positive")));
            }
            if !(0.0..1.0).contains(&phase.mask_rate) {
                return Err(DataError::Config(format!("{name}.mask_rate must lie in [0, 1)")));
            }
            phase
                .schedule
                .validate()
                .map_err(|e| DataError::Config(format!("{name}.schedule: {e}")))?;
        }
        if let Some(pre) = &self.pretrain {
            if pre.corpus.is_none() {
                return bad("pretrain.corpus is required");
            }
        }
        for path in self.input_paths() {
            if !path.exists() {
                return Err(DataError::MissingPath(path.to_path_buf()));
            }
        }
        Ok(())
    }

    fn input_paths(&self) -> Vec<&Path> {
        let mut paths: Vec<&Path> = Vec::new();
        paths.extend(self.tokenizer.path.as_deref());
        paths.extend(self.pretrain.as_ref().and_then(|p| p.corpus.as_deref()));
        for d in &self.datasets {
            paths.push(&d.train);
            paths.push(&d.test);
            paths.extend(d.eval.as_deref());
        }
        paths
    }

    pub fn max_k(&self) -> usize {
        self.eval.ks.iter().copied().max().unwrap_or(1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
output_dir = "out"

[model]
preset = "toy"
d_model = 32

[tokenizer]
vocab_size = 200
num_sentinels = 10

[finetune]
steps = 5
schedule = { kind = "constant", rate = 0.002 }

[[datasets]]
task = "cs"
train = "cs.train.jsonl"
test = "cs.test.jsonl"

[eval]
ks = [1, 5]
max_length = 16
"#;

    fn with_files() -> tempfile::TempDir {
        let dir = tempfile::tempdir().unwrap();
        for f in ["cs.train.jsonl", "cs.test.jsonl"] {
            std::fs::write(dir.path().join(f), "").unwrap();
        }
        dir
    }

    #[test]
    fn parses_and_resolves() {
        let dir = with_files();
        let config = RunConfig::from_toml_str(BASE, dir.path()).unwrap();
        assert_eq!(config.output_dir, dir.path().join("out"));
        assert_eq!(config.datasets[0].train, dir.path().join("cs.train.jsonl"));
        assert_eq!(config.finetune.schedule, Schedule::Constant { rate: 0.002 });
        assert_eq!(config.finetune.batch_size, 16);
        let model = config.model.build(200);
        assert_eq!((model.d_model, model.num_layers), (32, 2));
        assert_eq!(config.max_k(), 5);
    }

    #[test]
    fn rejects_missing_paths_and_seed() {
        let empty = tempfile::tempdir().unwrap();
        assert!(matches!(
            RunConfig::from_toml_str(BASE, empty.path()),
            Err(DataError::MissingPath(_))
        ));
        let dir = with_files();
        let no_seed = BASE.replace("seed = 3", "");
        assert!(matches!(
            RunConfig::from_toml_str(&no_seed, dir.path()),
            Err(DataError::Config(_))
        ));
        let zero_k = BASE.replace("ks = [1, 5]", "ks = [0]");
        assert!(RunConfig::from_toml_str(&zero_k, dir.path()).is_err());
        let unknown = BASE.replace("d_model = 32", "width = 32");
        assert!(RunConfig::from_toml_str(&unknown, dir.path()).is_err());
    }
}
