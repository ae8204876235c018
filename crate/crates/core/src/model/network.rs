//! Forward pass with cached activations and the matching reverse pass.
//!
//! Activations are kept as row matrices: row `b * len + t` holds position `t`
//! of example `b`. Each sublayer is pre-normalized (RMS, no bias) and added
//! back to the residual stream.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bucket::bucket_matrix;
use super::{
    AttentionParams, Batch, DecoderLayerParams, EncoderLayerParams, FeedForwardParams,
    ModelError, ModelParams,
};
use crate::tokenizer::PAD;

pub(crate) const NORM_EPS: f64 = 1e-6;

pub(crate) struct Dropout {
    rng: Option<ChaCha8Rng>,
    keep: f64,
}

impl Dropout {
    pub(crate) fn new(rate: f64, train_mode: bool, seed: u64) -> Self {
        let active = train_mode && rate > 0.0;
        Dropout {
            rng: active.then(|| ChaCha8Rng::seed_from_u64(seed)),
            keep: 1.0 - rate,
        }
    }

    pub(crate) fn disabled() -> Self {
        Dropout { rng: None, keep: 1.0 }
    }

    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        let rng = self.rng.as_mut()?;
        let (keep, scale) = (self.keep, 1.0 / self.keep);
        Some(Array2::from_shape_simple_fn((rows, cols), || {
            if rng.random::<f64>() < keep {
                scale
            } else {
                0.0
            }
        }))
    }

    fn apply(&mut self, x: &mut Array2<f64>) -> Option<Array2<f64>> {
        let mask = self.mask(x.nrows(), x.ncols());
        if let Some(m) = &mask {
            *x *= m;
        }
        mask
    }
}

fn mul_mask(x: &mut Array2<f64>, mask: &Option<Array2<f64>>) {
    if let Some(m) = mask {
        *x *= m;
    }
}

pub(crate) fn rms_norm(x: &Array2<f64>, scale: &Array1<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let inv = x.map_axis(Axis(1), |row| 1.0 / (row.dot(&row) / d + NORM_EPS).sqrt());
    let y = x * &inv.view().insert_axis(Axis(1)) * scale;
    (y, inv)
}

fn rms_norm_backward(
    dy: &Array2<f64>,
    x: &Array2<f64>,
    scale: &Array1<f64>,
    inv: &Array1<f64>,
    dscale: &mut Array1<f64>,
) -> Array2<f64> {
    let d = x.ncols() as f64;
    let inv_col = inv.view().insert_axis(Axis(1));
    *dscale += &(dy * x * &inv_col).sum_axis(Axis(0));
    let u = dy * scale;
    let mut dx = &u * &inv_col;
    for ((mut dx_row, x_row), (u_row, &r)) in dx
        .outer_iter_mut()
        .zip(x.outer_iter())
        .zip(u.outer_iter().zip(inv.iter()))
    {
        let coef = u_row.dot(&x_row) * r * r * r / d;
        dx_row.scaled_add(-coef, &x_row);
    }
    dx
}

/// Static description of one attention call.
pub(crate) struct AttentionShape<'a> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub d_kv: usize,
    /// `[batch, k_len]`; false keys receive no weight.
    pub key_mask: Option<&'a Array2<bool>>,
    pub causal: bool,
    /// Position bias table and `[q][k]` bucket indices.
    pub bias: Option<(&'a Array2<f64>, &'a [Vec<usize>])>,
}

impl AttentionShape<'_> {
    fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        (!self.causal || j <= i) && self.key_mask.is_none_or(|m| m[[b, j]])
    }
}

struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Per `(batch, head)` softmax weights before dropout.
    probs: Vec<Array2<f64>>,
    drops: Vec<Option<Array2<f64>>>,
    ctx: Array2<f64>,
}

/// Softmax over the allowed entries of each row; rows with no allowed entry
/// stay zero.
pub(crate) fn masked_softmax_row(scores: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let max = scores
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, &s)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        scores.iter_mut().for_each(|s| *s = 0.0);
        return;
    }
    let mut sum = 0.0;
    for (j, s) in scores.iter_mut().enumerate() {
        if allowed(j) {
            *s = (*s - max).exp();
            sum += *s;
        } else {
            *s = 0.0;
        }
    }
    scores.iter_mut().for_each(|s| *s /= sum);
}

fn attention_forward(
    p: &AttentionParams,
    xq: &Array2<f64>,
    xkv: &Array2<f64>,
    shape: &AttentionShape<'_>,
    dropout: &mut Dropout,
) -> (Array2<f64>, AttentionCache) {
    let (lq, lk, dk) = (shape.q_len, shape.k_len, shape.d_kv);
    let q = xq.dot(&p.q);
    let k = xkv.dot(&p.k);
    let v = xkv.dot(&p.v);
    let scale = 1.0 / (dk as f64).sqrt();
    let mut ctx = Array2::zeros((shape.batch * lq, shape.heads * dk));
    let mut probs_all = Vec::with_capacity(shape.batch * shape.heads);
    let mut drops = Vec::with_capacity(shape.batch * shape.heads);
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let cols = h * dk..(h + 1) * dk;
            let qs = q.slice(s![b * lq..(b + 1) * lq, cols.clone()]);
            let ks = k.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
            let vs = v.slice(s![b * lk..(b + 1) * lk, cols.clone()]);
            let mut probs = qs.dot(&ks.t()) * scale;
            if let Some((table, buckets)) = shape.bias {
                for i in 0..lq {
                    for j in 0..lk {
                        probs[[i, j]] += table[[h, buckets[i][j]]];
                    }
                }
            }
            for (i, mut row) in probs.outer_iter_mut().enumerate() {
                let row = row.as_slice_mut().expect("standard layout");
                masked_softmax_row(row, |j| shape.allowed(b, i, j));
            }
            let drop = dropout.mask(lq, lk);
            let weights = match &drop {
                Some(m) => &probs * m,
                None => probs.clone(),
            };
            ctx.slice_mut(s![b * lq..(b + 1) * lq, cols])
                .assign(&weights.dot(&vs));
            probs_all.push(probs);
            drops.push(drop);
        }
    }
    let out = ctx.dot(&p.o);
    let cache = AttentionCache {
        xq: xq.clone(),
        xkv: xkv.clone(),
        q,
        k,
        v,
        probs: probs_all,
        drops,
        ctx,
    };
    (out, cache)
}

/// Returns `(d_query_input, d_key_value_input)`.
fn attention_backward(
    p: &AttentionParams,
    g: &mut AttentionParams,
    mut bias_grad: Option<&mut Array2<f64>>,
    cache: &AttentionCache,
    shape: &AttentionShape<'_>,
    dout: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let (lq, lk, dk) = (shape.q_len, shape.k_len, shape.d_kv);
    let scale = 1.0 / (dk as f64).sqrt();
    general_mat_mul(1.0, &cache.ctx.t(), dout, 1.0, &mut g.o);
    let dctx = dout.dot(&p.o.t());
    let mut dq = Array2::zeros(cache.q.raw_dim());
    let mut dk_all = Array2::zeros(cache.k.raw_dim());
    let mut dv = Array2::zeros(cache.v.raw_dim());
    for b in 0..shape.batch {
        for h in 0..shape.heads {
            let idx = b * shape.heads + h;
            let cols = h * dk..(h + 1) * dk;
            let qrows = b * lq..(b + 1) * lq;
            let krows = b * lk..(b + 1) * lk;
            let probs = &cache.probs[idx];
            let drop = &cache.drops[idx];
            let dctx_s = dctx.slice(s![qrows.clone(), cols.clone()]);
            let qs = cache.q.slice(s![qrows.clone(), cols.clone()]);
            let ks = cache.k.slice(s![krows.clone(), cols.clone()]);
            let vs = cache.v.slice(s![krows.clone(), cols.clone()]);
            let weights = match drop {
                Some(m) => probs * m,
                None => probs.clone(),
            };
            general_mat_mul(
                1.0,
                &weights.t(),
                &dctx_s,
                1.0,
                &mut dv.slice_mut(s![krows.clone(), cols.clone()]),
            );
            let mut dp = dctx_s.dot(&vs.t());
            mul_mask(&mut dp, drop);
            let mut ds = Array2::zeros((lq, lk));
            for i in 0..lq {
                let r: f64 = (0..lk).map(|j| dp[[i, j]] * probs[[i, j]]).sum();
                for j in 0..lk {
                    ds[[i, j]] = probs[[i, j]] * (dp[[i, j]] - r);
                }
            }
            if let (Some(bg), Some((_, buckets))) = (bias_grad.as_deref_mut(), shape.bias) {
                for i in 0..lq {
                    for j in 0..lk {
                        bg[[h, buckets[i][j]]] += ds[[i, j]];
                    }
                }
            }
            general_mat_mul(
                scale,
                &ds,
                &ks,
                1.0,
                &mut dq.slice_mut(s![qrows, cols.clone()]),
            );
            general_mat_mul(
                scale,
                &ds.t(),
                &qs,
                1.0,
                &mut dk_all.slice_mut(s![krows, cols]),
            );
        }
    }
    general_mat_mul(1.0, &cache.xq.t(), &dq, 1.0, &mut g.q);
    general_mat_mul(1.0, &cache.xkv.t(), &dk_all, 1.0, &mut g.k);
    general_mat_mul(1.0, &cache.xkv.t(), &dv, 1.0, &mut g.v);
    let dxq = dq.dot(&p.q.t());
    let mut dxkv = dk_all.dot(&p.k.t());
    general_mat_mul(1.0, &dv, &p.v.t(), 1.0, &mut dxkv);
    (dxq, dxkv)
}

struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    hidden: Array2<f64>,
    drop_hidden: Option<Array2<f64>>,
}

fn feed_forward(
    p: &FeedForwardParams,
    x: &Array2<f64>,
    dropout: &mut Dropout,
) -> (Array2<f64>, FeedForwardCache) {
    let pre = x.dot(&p.wi);
    let mut hidden = pre.mapv(|v| v.max(0.0));
    let drop_hidden = dropout.apply(&mut hidden);
    let out = hidden.dot(&p.wo);
    (
        out,
        FeedForwardCache {
            x: x.clone(),
            pre,
            hidden,
            drop_hidden,
        },
    )
}

fn feed_forward_backward(
    p: &FeedForwardParams,
    g: &mut FeedForwardParams,
    cache: &FeedForwardCache,
    dout: &Array2<f64>,
) -> Array2<f64> {
    general_mat_mul(1.0, &cache.hidden.t(), dout, 1.0, &mut g.wo);
    let mut dhidden = dout.dot(&p.wo.t());
    mul_mask(&mut dhidden, &cache.drop_hidden);
    ndarray::Zip::from(&mut dhidden)
        .and(&cache.pre)
        .for_each(|d, &pre| {
            if pre <= 0.0 {
                *d = 0.0;
            }
        });
    general_mat_mul(1.0, &cache.x.t(), &dhidden, 1.0, &mut g.wi);
    dhidden.dot(&p.wi.t())
}

/// Normalized input, attention or feed-forward, dropout, residual add.
struct SublayerCache<C> {
    input: Array2<f64>,
    inv: Array1<f64>,
    inner: C,
    drop_out: Option<Array2<f64>>,
}

struct EncoderLayerCache {
    attn: SublayerCache<AttentionCache>,
    ff: SublayerCache<FeedForwardCache>,
}

struct DecoderLayerCache {
    self_attn: SublayerCache<AttentionCache>,
    cross_attn: SublayerCache<AttentionCache>,
    ff: SublayerCache<FeedForwardCache>,
}

fn attention_sublayer(
    x: &Array2<f64>,
    norm: &Array1<f64>,
    p: &AttentionParams,
    kv: Option<&Array2<f64>>,
    shape: &AttentionShape<'_>,
    dropout: &mut Dropout,
) -> (Array2<f64>, SublayerCache<AttentionCache>) {
    let (normed, inv) = rms_norm(x, norm);
    let kv = kv.unwrap_or(&normed);
    let (mut out, inner) = attention_forward(p, &normed, kv, shape, dropout);
    let drop_out = dropout.apply(&mut out);
    let y = x + &out;
    (
        y,
        SublayerCache {
            input: x.clone(),
            inv,
            inner,
            drop_out,
        },
    )
}

fn ff_sublayer(
    x: &Array2<f64>,
    norm: &Array1<f64>,
    p: &FeedForwardParams,
    dropout: &mut Dropout,
) -> (Array2<f64>, SublayerCache<FeedForwardCache>) {
    let (normed, inv) = rms_norm(x, norm);
    let (mut out, inner) = feed_forward(p, &normed, dropout);
    let drop_out = dropout.apply(&mut out);
    let y = x + &out;
    (
        y,
        SublayerCache {
            input: x.clone(),
            inv,
            inner,
            drop_out,
        },
    )
}

/// Backward through a self-attention sublayer: returns d(input).
fn self_attention_sublayer_backward(
    dy: &Array2<f64>,
    cache: &SublayerCache<AttentionCache>,
    norm: &Array1<f64>,
    dnorm: &mut Array1<f64>,
    p: &AttentionParams,
    g: &mut AttentionParams,
    bias_grad: &mut Array2<f64>,
    shape: &AttentionShape<'_>,
) -> Array2<f64> {
    let mut dout = dy.clone();
    mul_mask(&mut dout, &cache.drop_out);
    let (dq_in, dkv_in) = attention_backward(p, g, Some(bias_grad), &cache.inner, shape, &dout);
    let dnormed = dq_in + dkv_in;
    dy + &rms_norm_backward(&dnormed, &cache.input, norm, &cache.inv, dnorm)
}

fn ff_sublayer_backward(
    dy: &Array2<f64>,
    cache: &SublayerCache<FeedForwardCache>,
    norm: &Array1<f64>,
    dnorm: &mut Array1<f64>,
    p: &FeedForwardParams,
    g: &mut FeedForwardParams,
) -> Array2<f64> {
    let mut dout = dy.clone();
    mul_mask(&mut dout, &cache.drop_out);
    let dnormed = feed_forward_backward(p, g, &cache.inner, &dout);
    dy + &rms_norm_backward(&dnormed, &cache.input, norm, &cache.inv, dnorm)
}

fn embed(embedding: &Array2<f64>, ids: &Array2<u32>) -> Array2<f64> {
    let d = embedding.ncols();
    let mut out = Array2::zeros((ids.len(), d));
    for (mut row, &id) in out.outer_iter_mut().zip(ids.iter()) {
        row.assign(&embedding.row(id as usize));
    }
    out
}

fn scatter_embedding_grad(dembedding: &mut Array2<f64>, ids: &Array2<u32>, dx: &Array2<f64>) {
    for (row, &id) in dx.outer_iter().zip(ids.iter()) {
        let mut target = dembedding.row_mut(id as usize);
        target += &row;
    }
}

struct Trace {
    enc_in_drop: Option<Array2<f64>>,
    enc_layers: Vec<EncoderLayerCache>,
    enc_final_in: Array2<f64>,
    enc_final_inv: Array1<f64>,
    enc_out_drop: Option<Array2<f64>>,
    enc_out: Array2<f64>,
    dec_in_drop: Option<Array2<f64>>,
    dec_layers: Vec<DecoderLayerCache>,
    dec_final_in: Array2<f64>,
    dec_final_inv: Array1<f64>,
    dec_out_drop: Option<Array2<f64>>,
    dec_out: Array2<f64>,
    logits: Array2<f64>,
}

struct Buckets {
    encoder: Vec<Vec<usize>>,
    decoder: Vec<Vec<usize>>,
}

fn buckets_for(params: &ModelParams, batch: &Batch) -> Buckets {
    let c = &params.config;
    let (le, ld) = (batch.encoder_len(), batch.decoder_len());
    Buckets {
        encoder: bucket_matrix(le, le, 0, true, c.num_rel_buckets, c.max_rel_distance),
        decoder: bucket_matrix(ld, ld, 0, false, c.num_rel_buckets, c.max_rel_distance),
    }
}

struct Shapes<'a> {
    encoder_self: AttentionShape<'a>,
    decoder_self: AttentionShape<'a>,
    cross: AttentionShape<'a>,
}

fn shapes<'a>(params: &'a ModelParams, batch: &'a Batch, buckets: &'a Buckets) -> Shapes<'a> {
    let c = &params.config;
    let (b, le, ld) = (batch.batch_size(), batch.encoder_len(), batch.decoder_len());
    Shapes {
        encoder_self: AttentionShape {
            batch: b,
            q_len: le,
            k_len: le,
            heads: c.num_heads,
            d_kv: c.d_kv,
            key_mask: Some(&batch.encoder_mask),
            causal: false,
            bias: Some((&params.encoder_bias, &buckets.encoder)),
        },
        decoder_self: AttentionShape {
            batch: b,
            q_len: ld,
            k_len: ld,
            heads: c.num_heads,
            d_kv: c.d_kv,
            key_mask: None,
            causal: true,
            bias: Some((&params.decoder_bias, &buckets.decoder)),
        },
        cross: AttentionShape {
            batch: b,
            q_len: ld,
            k_len: le,
            heads: c.num_heads,
            d_kv: c.d_kv,
            key_mask: Some(&batch.encoder_mask),
            causal: false,
            bias: None,
        },
    }
}

fn encoder_layer_forward(
    layer: &EncoderLayerParams,
    x: &Array2<f64>,
    shape: &AttentionShape<'_>,
    dropout: &mut Dropout,
) -> (Array2<f64>, EncoderLayerCache) {
    let (h, attn) = attention_sublayer(x, &layer.attn_norm, &layer.attn, None, shape, dropout);
    let (y, ff) = ff_sublayer(&h, &layer.ff_norm, &layer.ff, dropout);
    (y, EncoderLayerCache { attn, ff })
}

fn decoder_layer_forward(
    layer: &DecoderLayerParams,
    x: &Array2<f64>,
    enc_out: &Array2<f64>,
    shapes: &Shapes<'_>,
    dropout: &mut Dropout,
) -> (Array2<f64>, DecoderLayerCache) {
    let (h1, self_attn) = attention_sublayer(
        x,
        &layer.self_norm,
        &layer.self_attn,
        None,
        &shapes.decoder_self,
        dropout,
    );
    let (h2, cross_attn) = attention_sublayer(
        &h1,
        &layer.cross_norm,
        &layer.cross_attn,
        Some(enc_out),
        &shapes.cross,
        dropout,
    );
    let (y, ff) = ff_sublayer(&h2, &layer.ff_norm, &layer.ff, dropout);
    (
        y,
        DecoderLayerCache {
            self_attn,
            cross_attn,
            ff,
        },
    )
}

fn run_forward(params: &ModelParams, batch: &Batch, shapes: &Shapes<'_>, dropout: &mut Dropout) -> Trace {
    let mut x = embed(&params.embedding, &batch.encoder_ids);
    let enc_in_drop = dropout.apply(&mut x);
    let mut enc_layers = Vec::with_capacity(params.encoder.len());
    for layer in &params.encoder {
        let (y, cache) = encoder_layer_forward(layer, &x, &shapes.encoder_self, dropout);
        enc_layers.push(cache);
        x = y;
    }
    let (mut enc_out, enc_final_inv) = rms_norm(&x, &params.encoder_final_norm);
    let enc_final_in = x;
    let enc_out_drop = dropout.apply(&mut enc_out);

    let mut y = embed(&params.embedding, &batch.decoder_input);
    let dec_in_drop = dropout.apply(&mut y);
    let mut dec_layers = Vec::with_capacity(params.decoder.len());
    for layer in &params.decoder {
        let (next, cache) = decoder_layer_forward(layer, &y, &enc_out, shapes, dropout);
        dec_layers.push(cache);
        y = next;
    }
    let (mut dec_out, dec_final_inv) = rms_norm(&y, &params.decoder_final_norm);
    let dec_final_in = y;
    let dec_out_drop = dropout.apply(&mut dec_out);
    let logits = dec_out.dot(&params.embedding.t());
    Trace {
        enc_in_drop,
        enc_layers,
        enc_final_in,
        enc_final_inv,
        enc_out_drop,
        enc_out,
        dec_in_drop,
        dec_layers,
        dec_final_in,
        dec_final_inv,
        dec_out_drop,
        dec_out,
        logits,
    }
}

/// Mean token cross-entropy over non-PAD targets and its gradient with
/// respect to the logits. An all-PAD target matrix gives loss 0.
fn cross_entropy(logits: &Array2<f64>, targets: &Array2<u32>) -> (f64, usize, Array2<f64>) {
    let count = targets.iter().filter(|&&t| t != PAD).count();
    let mut dlogits = Array2::zeros(logits.raw_dim());
    if count == 0 {
        return (0.0, 0, dlogits);
    }
    let norm = 1.0 / count as f64;
    let mut total = 0.0;
    for ((row, mut drow), &target) in logits
        .outer_iter()
        .zip(dlogits.outer_iter_mut())
        .zip(targets.iter())
    {
        if target == PAD {
            continue;
        }
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        total += lse - row[target as usize];
        for (d, &v) in drow.iter_mut().zip(row.iter()) {
            *d = (v - lse).exp() * norm;
        }
        drow[target as usize] -= norm;
    }
    (total * norm, count, dlogits)
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `[batch, decoder_len, vocab]`
    pub logits: Array3<f64>,
    pub loss: f64,
    /// Non-PAD target positions the loss averages over.
    pub num_targets: usize,
    /// Final decoder states fed to the output projection, `[batch, decoder_len, d_model]`.
    pub hidden: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub loss: f64,
    pub num_targets: usize,
    pub grads: ModelParams,
}

fn check(params: &ModelParams, batch: &Batch) -> Result<(), ModelError> {
    batch.validate(params.config.vocab_size)?;
    if params.embedding.nrows() != params.config.vocab_size {
        return Err(ModelError::ShapeMismatch(
            "embedding rows differ from vocab_size".into(),
        ));
    }
    Ok(())
}

pub fn forward(
    params: &ModelParams,
    batch: &Batch,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<ForwardOutput, ModelError> {
    check(params, batch)?;
    let buckets = buckets_for(params, batch);
    let shapes = shapes(params, batch, &buckets);
    let mut dropout = Dropout::new(params.config.dropout_rate, train_mode, dropout_seed);
    let trace = run_forward(params, batch, &shapes, &mut dropout);
    let (loss, num_targets, _) = cross_entropy(&trace.logits, &batch.targets);
    let (b, ld) = (batch.batch_size(), batch.decoder_len());
    let v = params.config.vocab_size;
    let d = params.config.d_model;
    Ok(ForwardOutput {
        logits: trace
            .logits
            .into_shape_with_order((b, ld, v))
            .expect("row-major logits"),
        loss,
        num_targets,
        hidden: trace
            .dec_out
            .into_shape_with_order((b, ld, d))
            .expect("row-major states"),
    })
}

/// Gradients of the training-mode loss, using the dropout realization drawn
/// from `dropout_seed` (the same one `forward(.., true, dropout_seed)` uses).
pub fn backward(
    params: &ModelParams,
    batch: &Batch,
    dropout_seed: u64,
) -> Result<BackwardOutput, ModelError> {
    check(params, batch)?;
    let buckets = buckets_for(params, batch);
    let shapes = shapes(params, batch, &buckets);
    let mut dropout = Dropout::new(params.config.dropout_rate, true, dropout_seed);
    let trace = run_forward(params, batch, &shapes, &mut dropout);
    let (loss, num_targets, dlogits) = cross_entropy(&trace.logits, &batch.targets);

    let mut g = params.zeros_like();
    general_mat_mul(1.0, &dlogits.t(), &trace.dec_out, 1.0, &mut g.embedding);
    let mut dy = dlogits.dot(&params.embedding);
    mul_mask(&mut dy, &trace.dec_out_drop);
    dy = rms_norm_backward(
        &dy,
        &trace.dec_final_in,
        &params.decoder_final_norm,
        &trace.dec_final_inv,
        &mut g.decoder_final_norm,
    );

    let mut denc = Array2::zeros(trace.enc_out.raw_dim());
    for ((layer, cache), lg) in params
        .decoder
        .iter()
        .zip(&trace.dec_layers)
        .zip(g.decoder.iter_mut())
        .rev()
    {
        dy = ff_sublayer_backward(&dy, &cache.ff, &layer.ff_norm, &mut lg.ff_norm, &layer.ff, &mut lg.ff);

        let mut dout = dy.clone();
        mul_mask(&mut dout, &cache.cross_attn.drop_out);
        let (dq_in, dkv_in) = attention_backward(
            &layer.cross_attn,
            &mut lg.cross_attn,
            None,
            &cache.cross_attn.inner,
            &shapes.cross,
            &dout,
        );
        denc += &dkv_in;
        dy = &dy
            + &rms_norm_backward(
                &dq_in,
                &cache.cross_attn.input,
                &layer.cross_norm,
                &cache.cross_attn.inv,
                &mut lg.cross_norm,
            );

        dy = self_attention_sublayer_backward(
            &dy,
            &cache.self_attn,
            &layer.self_norm,
            &mut lg.self_norm,
            &layer.self_attn,
            &mut lg.self_attn,
            &mut g.decoder_bias,
            &shapes.decoder_self,
        );
    }
    mul_mask(&mut dy, &trace.dec_in_drop);
    scatter_embedding_grad(&mut g.embedding, &batch.decoder_input, &dy);

    let mut dx = denc;
    mul_mask(&mut dx, &trace.enc_out_drop);
    dx = rms_norm_backward(
        &dx,
        &trace.enc_final_in,
        &params.encoder_final_norm,
        &trace.enc_final_inv,
        &mut g.encoder_final_norm,
    );
    for ((layer, cache), lg) in params
        .encoder
        .iter()
        .zip(&trace.enc_layers)
        .zip(g.encoder.iter_mut())
        .rev()
    {
        dx = ff_sublayer_backward(&dx, &cache.ff, &layer.ff_norm, &mut lg.ff_norm, &layer.ff, &mut lg.ff);
        dx = self_attention_sublayer_backward(
            &dx,
            &cache.attn,
            &layer.attn_norm,
            &mut lg.attn_norm,
            &layer.attn,
            &mut lg.attn,
            &mut g.encoder_bias,
            &shapes.encoder_self,
        );
    }
    mul_mask(&mut dx, &trace.enc_in_drop);
    scatter_embedding_grad(&mut g.embedding, &batch.encoder_ids, &dx);

    Ok(BackwardOutput {
        loss,
        num_targets,
        grads: g,
    })
}

/// Encoder output for a single unpadded source sequence, evaluation mode.
pub fn encode_source(params: &ModelParams, ids: &[u32]) -> Result<Array2<f64>, ModelError> {
    let batch = Batch::from_pairs(&[(ids, [crate::tokenizer::EOS])]);
    check(params, &batch)?;
    let c = &params.config;
    let le = batch.encoder_len();
    let buckets = bucket_matrix(le, le, 0, true, c.num_rel_buckets, c.max_rel_distance);
    let shape = AttentionShape {
        batch: 1,
        q_len: le,
        k_len: le,
        heads: c.num_heads,
        d_kv: c.d_kv,
        key_mask: Some(&batch.encoder_mask),
        causal: false,
        bias: Some((&params.encoder_bias, &buckets)),
    };
    let mut dropout = Dropout::disabled();
    let mut x = embed(&params.embedding, &batch.encoder_ids);
    for layer in &params.encoder {
        x = encoder_layer_forward(layer, &x, &shape, &mut dropout).0;
    }
    Ok(rms_norm(&x, &params.encoder_final_norm).0)
}

pub(crate) fn log_softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}
