use serde::{Deserialize, Serialize};

use super::ModelError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Blocks per stack; encoder and decoder have the same count.
    pub num_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub d_kv: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub num_rel_buckets: usize,
    pub max_rel_distance: usize,
    pub dropout_rate: f64,
    pub max_source_len: usize,
    pub max_target_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Small,
    Toy,
}

impl std::str::FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Preset::Small),
            "toy" => Ok(Preset::Toy),
            other => Err(format!("unknown model preset {other:?}")),
        }
    }
}

impl ModelConfig {
    pub fn preset(preset: Preset, vocab_size: usize) -> Self {
        let (num_layers, d_model, d_ff, d_kv, num_heads) = match preset {
            Preset::Small => (6, 512, 2048, 64, 8),
            Preset::Toy => (2, 64, 256, 16, 4),
        };
        ModelConfig {
            num_layers,
            d_model,
            d_ff,
            d_kv,
            num_heads,
            vocab_size,
            num_rel_buckets: 32,
            max_rel_distance: 128,
            dropout_rate: 0.1,
            max_source_len: 256,
            max_target_len: 128,
        }
    }

    pub fn small(vocab_size: usize) -> Self {
        Self::preset(Preset::Small, vocab_size)
    }

    pub fn toy(vocab_size: usize) -> Self {
        Self::preset(Preset::Toy, vocab_size)
    }

    /// Width of the concatenated attention heads.
    pub fn inner_dim(&self) -> usize {
        self.num_heads * self.d_kv
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("d_kv", self.d_kv),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("num_rel_buckets", self.num_rel_buckets),
            ("max_rel_distance", self.max_rel_distance),
            ("max_source_len", self.max_source_len),
            ("max_target_len", self.max_target_len),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_rel_buckets < 4 {
            return Err(ModelError::InvalidConfig(
                "num_rel_buckets must be at least 4".into(),
            ));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * d * self.inner_dim();
        let ff = 2 * d * self.d_ff;
        let bias = self.num_heads * self.num_rel_buckets;
        let embedding = self.vocab_size * d;
        let encoder_layer = attn + ff + 2 * d;
        let decoder_layer = 2 * attn + ff + 3 * d;
        embedding
            + self.num_layers * (encoder_layer + decoder_layer)
            + 2 * bias
            + 2 * d
    }
}
