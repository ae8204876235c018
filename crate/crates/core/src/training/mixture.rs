use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::TrainingError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    BfSmall,
    BfMedium,
    MgIdent,
    AgAbs,
    AgRaw,
    Cs,
    Pretrain,
}

impl Task {
    pub const FINETUNE: [Task; 6] = [
        Task::BfSmall,
        Task::BfMedium,
        Task::MgIdent,
        Task::AgAbs,
        Task::AgRaw,
        Task::Cs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::BfSmall => "bf_small",
            Task::BfMedium => "bf_medium",
            Task::MgIdent => "mg_ident",
            Task::AgAbs => "ag_abs",
            Task::AgRaw => "ag_raw",
            Task::Cs => "cs",
            Task::Pretrain => "pretrain",
        }
    }

    /// Tag prepended to the model input; pre-training inputs carry none.
    pub fn prefix(self) -> &'static str {
        match self {
            Task::BfSmall => "generate small patch : ",
            Task::BfMedium => "generate medium patch : ",
            Task::MgIdent => "generate mutant : ",
            Task::AgAbs => "generate assert abt : ",
            Task::AgRaw => "generate assert raw : ",
            Task::Cs => "summarize : ",
            Task::Pretrain => "",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Task::FINETUNE
            .into_iter()
            .chain([Task::Pretrain])
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// One example. `input` never includes the task prefix.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub task: Task,
    pub input: String,
    pub target: String,
}

impl TaskInstance {
    pub fn prefixed_input(&self) -> String {
        format!("{}{}", self.task.prefix(), self.input)
    }
}

/// Size-proportional sampler over per-task training sets.
#[derive(Debug, Clone)]
pub struct MixtureSampler {
    datasets: Vec<(Task, Vec<TaskInstance>)>,
    /// Running totals of dataset sizes.
    cumulative: Vec<u64>,
}

impl MixtureSampler {
    pub fn new(datasets: Vec<(Task, Vec<TaskInstance>)>) -> Result<Self, TrainingError> {
        if datasets.is_empty() {
            return Err(TrainingError::NoTasks);
        }
        let mut cumulative = Vec::with_capacity(datasets.len());
        let mut total = 0u64;
        for (i, (task, records)) in datasets.iter().enumerate() {
            if records.is_empty() {
                return Err(TrainingError::EmptyDataset(*task));
            }
            if datasets[..i].iter().any(|(t, _)| t == task) {
                return Err(TrainingError::DuplicateTask(*task));
            }
            total += records.len() as u64;
            cumulative.push(total);
        }
        Ok(MixtureSampler {
            datasets,
            cumulative,
        })
    }

    pub fn total(&self) -> u64 {
        *self.cumulative.last().expect("nonempty")
    }

    pub fn tasks(&self) -> impl Iterator<Item = Task> + '_ {
        self.datasets.iter().map(|(t, _)| *t)
    }

    /// Exact sampling probability per task.
    pub fn probabilities(&self) -> Vec<(Task, f64)> {
        let total = self.total() as f64;
        self.datasets
            .iter()
            .map(|(t, r)| (*t, r.len() as f64 / total))
            .collect()
    }

    fn sample_task_index<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u = rng.random_range(0..self.total());
        self.cumulative.partition_point(|&c| c <= u)
    }

    pub fn sample_task<R: Rng + ?Sized>(&self, rng: &mut R) -> Task {
        self.datasets[self.sample_task_index(rng)].0
    }

    /// Draws `batch_size` instances independently; inputs come back with
    /// their task prefix attached.
    pub fn sample_batch<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<TaskInstance> {
        (0..batch_size)
            .map(|_| {
                let (task, records) = &self.datasets[self.sample_task_index(rng)];
                let record = &records[rng.random_range(0..records.len())];
                TaskInstance {
                    task: *task,
                    input: record.prefixed_input(),
                    target: record.target.clone(),
                }
            })
            .collect()
    }
}
