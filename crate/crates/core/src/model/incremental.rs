//! Position-by-position decoding with cached self-attention keys and values.
//!
//! Produces the same logits as the full forward pass in evaluation mode.

use ndarray::{s, Array1, Array2, Axis};

use super::bucket::relative_bucket;
use super::network::{encode_source, masked_softmax_row, rms_norm};
use super::{AttentionParams, ModelError, ModelParams};

/// Encoder output and per-layer cross-attention keys/values for one input.
#[derive(Debug, Clone)]
pub struct EncodedInput {
    key_mask: Vec<bool>,
    cross_keys: Vec<Array2<f64>>,
    cross_values: Vec<Array2<f64>>,
}

/// Self-attention keys and values for positions decoded so far.
#[derive(Debug, Clone)]
pub struct DecoderCache {
    keys: Vec<Array2<f64>>,
    values: Vec<Array2<f64>>,
    len: usize,
}

impl DecoderCache {
    pub fn new(params: &ModelParams) -> Self {
        let inner = params.config.inner_dim();
        let empty = || Array2::zeros((0, inner));
        DecoderCache {
            keys: params.decoder.iter().map(|_| empty()).collect(),
            values: params.decoder.iter().map(|_| empty()).collect(),
            len: 0,
        }
    }

    /// Number of decoder positions already consumed.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

pub fn prepare_source(params: &ModelParams, source: &[u32]) -> Result<EncodedInput, ModelError> {
    let enc_out = encode_source(params, source)?;
    let key_mask = (0..enc_out.nrows()).map(|j| j < source.len()).collect();
    Ok(EncodedInput {
        key_mask,
        cross_keys: params
            .decoder
            .iter()
            .map(|l| enc_out.dot(&l.cross_attn.k))
            .collect(),
        cross_values: params
            .decoder
            .iter()
            .map(|l| enc_out.dot(&l.cross_attn.v))
            .collect(),
    })
}

fn attend(
    p: &AttentionParams,
    q: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    heads: usize,
    d_kv: usize,
    bias: impl Fn(usize, usize) -> f64,
    allowed: impl Fn(usize) -> bool,
) -> Array2<f64> {
    let scale = 1.0 / (d_kv as f64).sqrt();
    let mut ctx = Array2::zeros((1, heads * d_kv));
    for h in 0..heads {
        let cols = h * d_kv..(h + 1) * d_kv;
        let qs = q.slice(s![.., cols.clone()]);
        let ks = keys.slice(s![.., cols.clone()]);
        let vs = values.slice(s![.., cols.clone()]);
        let mut scores = qs.dot(&ks.t()) * scale;
        for (j, s) in scores.iter_mut().enumerate() {
            *s += bias(h, j);
        }
        let row = scores.as_slice_mut().expect("standard layout");
        masked_softmax_row(row, &allowed);
        ctx.slice_mut(s![.., cols]).assign(&scores.dot(&vs));
    }
    ctx.dot(&p.o)
}

/// Feeds `token` at the next decoder position and returns the logits for the
/// position after it.
pub fn decoder_step(
    params: &ModelParams,
    source: &EncodedInput,
    cache: &mut DecoderCache,
    token: u32,
) -> Result<Array1<f64>, ModelError> {
    let c = &params.config;
    if token as usize >= c.vocab_size {
        return Err(ModelError::ShapeMismatch(format!(
            "token id {token} outside vocabulary of {}",
            c.vocab_size
        )));
    }
    let t = cache.len;
    let mut x = params
        .embedding
        .row(token as usize)
        .to_owned()
        .insert_axis(Axis(0));
    for (i, layer) in params.decoder.iter().enumerate() {
        let (n, _) = rms_norm(&x, &layer.self_norm);
        let q = n.dot(&layer.self_attn.q);
        cache.keys[i]
            .push_row(n.dot(&layer.self_attn.k).row(0))
            .expect("matching width");
        cache.values[i]
            .push_row(n.dot(&layer.self_attn.v).row(0))
            .expect("matching width");
        let bias = |h: usize, j: usize| {
            let bucket = relative_bucket(
                j as i64 - t as i64,
                false,
                c.num_rel_buckets,
                c.max_rel_distance,
            );
            params.decoder_bias[[h, bucket]]
        };
        x = &x
            + &attend(
                &layer.self_attn,
                &q,
                &cache.keys[i],
                &cache.values[i],
                c.num_heads,
                c.d_kv,
                bias,
                |_| true,
            );

        let (n, _) = rms_norm(&x, &layer.cross_norm);
        let q = n.dot(&layer.cross_attn.q);
        x = &x
            + &attend(
                &layer.cross_attn,
                &q,
                &source.cross_keys[i],
                &source.cross_values[i],
                c.num_heads,
                c.d_kv,
                |_, _| 0.0,
                |j| source.key_mask[j],
            );

        let (n, _) = rms_norm(&x, &layer.ff_norm);
        let hidden = n.dot(&layer.ff.wi).mapv(|v| v.max(0.0));
        x = &x + &hidden.dot(&layer.ff.wo);
    }
    cache.len += 1;
    let (out, _) = rms_norm(&x, &params.decoder_final_norm);
    Ok(out.dot(&params.embedding.t()).row(0).to_owned())
}
