use std::collections::BTreeMap;
use std::fmt::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::decoding::{beam_search, DecodeError, DecodeOptions};
use crate::model::ModelParams;

pub const DEFAULT_BEAM_SIZES: [usize; 5] = [1, 5, 10, 25, 50];

/// Mean wall-clock seconds per input: one row per beam size, one column per
/// task label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceTable {
    pub beam_sizes: Vec<usize>,
    pub tasks: Vec<String>,
    pub mean_seconds: Vec<Vec<f64>>,
}

impl InferenceTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("beam");
        for t in &self.tasks {
            out.push('\t');
            out.push_str(t);
        }
        out.push('\n');
        for (k, row) in self.beam_sizes.iter().zip(&self.mean_seconds) {
            let _ = write!(out, "{k}");
            for v in row {
                let _ = write!(out, "\t{v:.6}");
            }
            out.push('\n');
        }
        out
    }
}

/// Times beam search of every input at every beam size. `inputs` pairs a
/// task label with encoder ids.
pub fn measure_inference_time(
    params: &ModelParams,
    inputs: &[(String, Vec<u32>)],
    beam_sizes: &[usize],
    max_length: usize,
) -> Result<InferenceTable, DecodeError> {
    if inputs.is_empty() {
        return Err(DecodeError::InvalidOptions("no inputs to time".into()));
    }
    let mut groups: BTreeMap<&str, Vec<&[u32]>> = BTreeMap::new();
    for (task, ids) in inputs {
        groups.entry(task).or_default().push(ids);
    }
    let mut mean_seconds = Vec::with_capacity(beam_sizes.len());
    for &k in beam_sizes {
        let options = DecodeOptions::new(k, max_length);
        options.validate()?;
        let mut row = Vec::with_capacity(groups.len());
        for ids in groups.values() {
            let mut total = 0.0;
            for input in ids {
                let start = Instant::now();
                beam_search(params, input, &options)?;
                total += start.elapsed().as_secs_f64();
            }
            row.push(total / ids.len() as f64);
        }
        mean_seconds.push(row);
    }
    Ok(InferenceTable {
        beam_sizes: beam_sizes.to_vec(),
        tasks: groups.keys().map(|t| t.to_string()).collect(),
        mean_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    #[test]
    fn table_shape_and_positive_times() {
        let mut config = ModelConfig::toy(30);
        config.d_model = 8;
        config.d_ff = 8;
        config.d_kv = 4;
        config.num_heads = 2;
        let params = init_params(&config, 0);
        let inputs = vec![
            ("cs".to_string(), vec![4, 5, 1]),
            ("bf_small".to_string(), vec![6, 1]),
            ("cs".to_string(), vec![4, 5, 1]),
        ];
        let table = measure_inference_time(&params, &inputs, &[1, 3], 1).unwrap();
        assert_eq!(table.tasks, vec!["bf_small", "cs"]);
        assert_eq!(table.mean_seconds.len(), 2);
        assert!(table.mean_seconds.iter().flatten().all(|&t| t > 0.0));
        let tsv = table.to_tsv();
        assert_eq!(tsv.lines().count(), 3);
        assert!(tsv.starts_with("beam\tbf_small\tcs\n"));
    }
}
