use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    /// `[d_model, heads * d_kv]`
    pub q: Array2<f64>,
    pub k: Array2<f64>,
    pub v: Array2<f64>,
    /// `[heads * d_kv, d_model]`
    pub o: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardParams {
    /// `[d_model, d_ff]`
    pub wi: Array2<f64>,
    /// `[d_ff, d_model]`
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub attn_norm: Array1<f64>,
    pub attn: AttentionParams,
    pub ff_norm: Array1<f64>,
    pub ff: FeedForwardParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub self_norm: Array1<f64>,
    pub self_attn: AttentionParams,
    pub cross_norm: Array1<f64>,
    pub cross_attn: AttentionParams,
    pub ff_norm: Array1<f64>,
    pub ff: FeedForwardParams,
}

/// All trainable tensors. The same structure doubles as the gradient and
/// optimizer-moment container.
///
/// The embedding is also the output projection. Each self-attention family
/// stores a single `[heads, buckets]` relative position bias shared by all
/// of its layers; cross-attention has no position bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub embedding: Array2<f64>,
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_bias: Array2<f64>,
    pub encoder_final_norm: Array1<f64>,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_bias: Array2<f64>,
    pub decoder_final_norm: Array1<f64>,
}

impl AttentionParams {
    fn zeros(c: &ModelConfig) -> Self {
        let (d, inner) = (c.d_model, c.inner_dim());
        AttentionParams {
            q: Array2::zeros((d, inner)),
            k: Array2::zeros((d, inner)),
            v: Array2::zeros((d, inner)),
            o: Array2::zeros((inner, d)),
        }
    }
}

impl FeedForwardParams {
    fn zeros(c: &ModelConfig) -> Self {
        FeedForwardParams {
            wi: Array2::zeros((c.d_model, c.d_ff)),
            wo: Array2::zeros((c.d_ff, c.d_model)),
        }
    }
}

type Visit<'a> = Vec<(String, ArrayViewD<'a, f64>)>;
type VisitMut<'a> = Vec<(String, ArrayViewMutD<'a, f64>)>;

// Expands to one `$push!(name, tensor)` per tensor, in checkpoint order.
macro_rules! collect_tensors {
    ($p:expr, $push:ident, $iter:ident) => {{
        $push!("embedding".to_string(), $p.embedding);
        for (i, layer) in $p.encoder.$iter().enumerate() {
            $push!(format!("encoder.{i}.attn_norm"), layer.attn_norm);
            $push!(format!("encoder.{i}.attn.q"), layer.attn.q);
            $push!(format!("encoder.{i}.attn.k"), layer.attn.k);
            $push!(format!("encoder.{i}.attn.v"), layer.attn.v);
            $push!(format!("encoder.{i}.attn.o"), layer.attn.o);
            $push!(format!("encoder.{i}.ff_norm"), layer.ff_norm);
            $push!(format!("encoder.{i}.ff.wi"), layer.ff.wi);
            $push!(format!("encoder.{i}.ff.wo"), layer.ff.wo);
        }
        $push!("encoder.bias".to_string(), $p.encoder_bias);
        $push!("encoder.final_norm".to_string(), $p.encoder_final_norm);
        for (i, layer) in $p.decoder.$iter().enumerate() {
            $push!(format!("decoder.{i}.self_norm"), layer.self_norm);
            $push!(format!("decoder.{i}.self_attn.q"), layer.self_attn.q);
            $push!(format!("decoder.{i}.self_attn.k"), layer.self_attn.k);
            $push!(format!("decoder.{i}.self_attn.v"), layer.self_attn.v);
            $push!(format!("decoder.{i}.self_attn.o"), layer.self_attn.o);
            $push!(format!("decoder.{i}.cross_norm"), layer.cross_norm);
            $push!(format!("decoder.{i}.cross_attn.q"), layer.cross_attn.q);
            $push!(format!("decoder.{i}.cross_attn.k"), layer.cross_attn.k);
            $push!(format!("decoder.{i}.cross_attn.v"), layer.cross_attn.v);
            $push!(format!("decoder.{i}.cross_attn.o"), layer.cross_attn.o);
            $push!(format!("decoder.{i}.ff_norm"), layer.ff_norm);
            $push!(format!("decoder.{i}.ff.wi"), layer.ff.wi);
            $push!(format!("decoder.{i}.ff.wo"), layer.ff.wo);
        }
        $push!("decoder.bias".to_string(), $p.decoder_bias);
        $push!("decoder.final_norm".to_string(), $p.decoder_final_norm);
    }};
}

impl ModelParams {
    /// Every tensor zero, including normalization scales.
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        let d = c.d_model;
        ModelParams {
            config: c.clone(),
            embedding: Array2::zeros((c.vocab_size, d)),
            encoder: (0..c.num_layers)
                .map(|_| EncoderLayerParams {
                    attn_norm: Array1::zeros(d),
                    attn: AttentionParams::zeros(c),
                    ff_norm: Array1::zeros(d),
                    ff: FeedForwardParams::zeros(c),
                })
                .collect(),
            encoder_bias: Array2::zeros((c.num_heads, c.num_rel_buckets)),
            encoder_final_norm: Array1::zeros(d),
            decoder: (0..c.num_layers)
                .map(|_| DecoderLayerParams {
                    self_norm: Array1::zeros(d),
                    self_attn: AttentionParams::zeros(c),
                    cross_norm: Array1::zeros(d),
                    cross_attn: AttentionParams::zeros(c),
                    ff_norm: Array1::zeros(d),
                    ff: FeedForwardParams::zeros(c),
                })
                .collect(),
            decoder_bias: Array2::zeros((c.num_heads, c.num_rel_buckets)),
            decoder_final_norm: Array1::zeros(d),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config)
    }

    /// Named views of every tensor in a fixed order.
    pub fn tensors(&self) -> Visit<'_> {
        let mut out: Visit<'_> = Vec::new();
        all_tensors_ref(self, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> VisitMut<'_> {
        let mut out: VisitMut<'_> = Vec::new();
        all_tensors_mut(self, &mut out);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Rounds every value to the nearest `f32`; checkpoints store `f32`, so
    /// rounded parameters survive a save/load cycle unchanged.
    pub fn round_to_f32(&mut self) {
        for (_, mut t) in self.tensors_mut() {
            t.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

fn all_tensors_ref<'a>(p: &'a ModelParams, out: &mut Visit<'a>) {
    macro_rules! push {
        ($name:expr, $t:expr) => {
            out.push(($name, $t.view().into_dyn()))
        };
    }
    collect_tensors!(p, push, iter);
}

fn all_tensors_mut<'a>(p: &'a mut ModelParams, out: &mut VisitMut<'a>) {
    macro_rules! push {
        ($name:expr, $t:expr) => {
            out.push(($name, $t.view_mut().into_dyn()))
        };
    }
    collect_tensors!(p, push, iter_mut);
}

/// Initializes weights from `N(0, 1/fan_in)`, normalization scales at 1 and
/// position biases at 0. Values are rounded to `f32` precision.
pub fn init_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, mut tensor) in params.tensors_mut() {
        if name.ends_with("norm") {
            tensor.fill(1.0);
        } else if name.ends_with("bias") {
            // position biases start at zero
        } else {
            let fan_in = if name == "embedding" {
                tensor.shape()[1]
            } else {
                tensor.shape()[0]
            };
            let normal = Normal::new(0.0, 1.0 / (fan_in as f64).sqrt()).expect("valid std");
            tensor.mapv_inplace(|_| normal.sample(&mut rng) as f32 as f64);
        }
    }
    params
}

/// Shape of a named tensor for a config, used when loading checkpoints.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, IxDyn)> {
    ModelParams::zeros(config)
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.raw_dim()))
        .collect()
}
