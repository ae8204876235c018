//! Encoder-decoder transformer: configuration, parameters, forward and
//! backward passes, cached incremental decoding and checkpoints.

mod batch;
mod bucket;
mod checkpoint;
mod config;
mod incremental;
mod network;
mod params;

#[cfg(test)]
mod tests;

pub use batch::Batch;
pub use bucket::{bucket_matrix, relative_bucket};
pub use checkpoint::{Checkpoint, Phase};
pub use config::{ModelConfig, Preset};
pub use incremental::{decoder_step, prepare_source, DecoderCache, EncodedInput};
pub use network::{backward, encode_source, forward, BackwardOutput, ForwardOutput};
pub(crate) use network::log_softmax;
pub use params::{
    expected_shapes, init_params, AttentionParams, DecoderLayerParams, EncoderLayerParams,
    FeedForwardParams, ModelParams,
};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint vocabulary hash does not match the tokenizer")]
    VocabMismatch,
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
