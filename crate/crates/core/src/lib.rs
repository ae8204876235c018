//! Text-to-text transformer pipeline for code-related tasks.
//!
//! The crate covers the whole path from raw Java methods to evaluated
//! predictions: code abstraction, a subword tokenizer, a small
//! encoder-decoder transformer with hand-written gradients, pre-training and
//! multi-task fine-tuning, greedy and beam decoding, and evaluation metrics.

pub mod abstraction;
pub mod data;
pub mod decoding;
pub mod metrics;
pub mod tokenizer;
pub mod model;
pub mod training;
