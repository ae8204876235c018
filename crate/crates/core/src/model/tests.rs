use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::tokenizer::{EOS, PAD};

fn tiny_config(dropout_rate: f64) -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 8,
        d_ff: 12,
        d_kv: 4,
        num_heads: 2,
        vocab_size: 20,
        num_rel_buckets: 8,
        max_rel_distance: 16,
        dropout_rate,
        max_source_len: 32,
        max_target_len: 32,
    }
}

/// Initialized parameters with every tensor (norm scales and biases too)
/// nudged away from its initial constant.
fn jittered_params(config: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = init_params(config, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for (_, mut t) in params.tensors_mut() {
        t.mapv_inplace(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    params
}

fn sample_batch() -> Batch {
    Batch::from_pairs(&[
        (vec![5, 6, 7, 8, 9], vec![10, 11, 12, EOS]),
        (vec![13, 5, 4], vec![14, EOS]),
    ])
}

fn loss(params: &ModelParams, batch: &Batch, seed: u64) -> f64 {
    forward(params, batch, true, seed).unwrap().loss
}

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-8
}

/// Central differences along a random unit direction per tensor and at a
/// few sampled coordinates.
fn check_gradients(dropout_rate: f64) {
    let config = tiny_config(dropout_rate);
    let params = jittered_params(&config, 3);
    let batch = sample_batch();
    let seed = 17;
    let grads = backward(&params, &batch, seed).unwrap().grads;
    let eps = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    for (ti, name) in names.iter().enumerate() {
        let grad = grads.tensors()[ti].1.to_owned();
        let shape = grad.shape().to_vec();

        let dir = ndarray::ArrayD::from_shape_simple_fn(shape.clone(), || {
            rng.sample::<f64, _>(StandardNormal)
        });
        let dir = &dir / dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        let shifted = |sign: f64| {
            let mut p = params.clone();
            let mut t = p.tensors_mut().swap_remove(ti).1;
            t.scaled_add(sign * eps, &dir);
            loss(&p, &batch, seed)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
        let analytic = (&grad * &dir).sum();
        assert!(
            close(analytic, numeric),
            "{name}: directional derivative {analytic} vs finite difference {numeric}"
        );

        for _ in 0..16 {
            let flat = rng.random_range(0..grad.len());
            let shifted = |sign: f64| {
                let mut p = params.clone();
                let mut t = p.tensors_mut().swap_remove(ti).1;
                *t.iter_mut().nth(flat).unwrap() += sign * eps;
                loss(&p, &batch, seed)
            };
            let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * eps);
            let analytic = *grad.iter().nth(flat).unwrap();
            assert!(
                close(analytic, numeric),
                "{name}[{flat}]: analytic {analytic} vs finite difference {numeric}"
            );
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    check_gradients(0.0);
}

#[test]
fn gradients_match_finite_differences_with_dropout() {
    check_gradients(0.3);
}

#[test]
fn zeroed_projection_gives_log_vocab_loss() {
    let config = tiny_config(0.1);
    let mut params = init_params(&config, 1);
    params.embedding.fill(0.0);
    for train in [false, true] {
        let out = forward(&params, &sample_batch(), train, 5).unwrap();
        assert!((out.loss - (config.vocab_size as f64).ln()).abs() < 1e-12);
        assert_eq!(out.num_targets, 6);
    }
}

#[test]
fn pad_only_targets_have_zero_loss() {
    let config = tiny_config(0.1);
    let params = init_params(&config, 1);
    let mut batch = sample_batch();
    batch.targets.fill(PAD);
    let out = forward(&params, &batch, true, 2).unwrap();
    assert_eq!((out.loss, out.num_targets), (0.0, 0));
    let grads = backward(&params, &batch, 2).unwrap().grads;
    assert!(grads.tensors().iter().all(|(_, t)| t.iter().all(|&v| v == 0.0)));
}

#[test]
fn forward_is_deterministic() {
    let config = ModelConfig::toy(50);
    let params = init_params(&config, 9);
    assert_eq!(params, init_params(&config, 9));
    let batch = sample_batch();
    let a = forward(&params, &batch, true, 4).unwrap();
    let b = forward(&params, &batch, true, 4).unwrap();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.logits, b.logits);
}

#[test]
fn evaluation_mode_ignores_dropout_seed() {
    let params = jittered_params(&tiny_config(0.5), 2);
    let batch = sample_batch();
    let a = forward(&params, &batch, false, 1).unwrap();
    let b = forward(&params, &batch, false, 2).unwrap();
    assert_eq!(a.logits, b.logits);
    let t1 = forward(&params, &batch, true, 1).unwrap();
    let t2 = forward(&params, &batch, true, 2).unwrap();
    assert_ne!(t1.logits, t2.logits);

    let mut no_dropout = params.clone();
    no_dropout.config.dropout_rate = 0.0;
    assert_eq!(forward(&no_dropout, &batch, true, 1).unwrap().logits, a.logits);
}

#[test]
fn decoder_is_causal() {
    let params = jittered_params(&tiny_config(0.2), 4);
    let batch = sample_batch();
    for train in [false, true] {
        let base = forward(&params, &batch, train, 3).unwrap().logits;
        for t in 1..batch.decoder_len() {
            let mut changed = batch.clone();
            changed.decoder_input[[0, t]] = 19;
            changed.decoder_input[[1, t]] = 18;
            let logits = forward(&params, &changed, train, 3).unwrap().logits;
            for pos in 0..t {
                assert_eq!(
                    logits.index_axis(Axis(1), pos),
                    base.index_axis(Axis(1), pos),
                    "position {pos} changed after editing {t}"
                );
            }
            assert_ne!(logits.index_axis(Axis(1), t), base.index_axis(Axis(1), t));
        }
    }
}

#[test]
fn padded_encoder_positions_are_ignored() {
    let params = jittered_params(&tiny_config(0.0), 5);
    let batch = sample_batch();
    let base = forward(&params, &batch, false, 0).unwrap().logits;
    let mut changed = batch.clone();
    changed.encoder_ids[[1, 3]] = 17;
    changed.encoder_ids[[1, 4]] = 3;
    assert!(!changed.encoder_mask[[1, 3]]);
    assert_eq!(forward(&params, &changed, false, 0).unwrap().logits, base);
}

#[test]
fn position_bias_is_stored_once_per_family() {
    let params = init_params(&tiny_config(0.0), 1);
    let bias_tensors: Vec<String> = params
        .tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| n.contains("bias"))
        .collect();
    assert_eq!(bias_tensors, vec!["encoder.bias", "decoder.bias"]);
    assert!(params.encoder_bias.iter().all(|&v| v == 0.0));

    // Each layer's attention reads the shared table: with the attention
    // output of every other encoder layer cut, the table still reaches the
    // logits through the remaining layer, whichever one it is.
    let batch = sample_batch();
    for keep in 0..2 {
        let mut p = jittered_params(&tiny_config(0.0), 6);
        for (i, layer) in p.encoder.iter_mut().enumerate() {
            if i != keep {
                layer.attn.o.fill(0.0);
            }
        }
        let base = forward(&p, &batch, false, 0).unwrap().logits;
        let mut bumped = p.clone();
        bumped.encoder_bias[[0, 1]] += 1.0;
        assert_ne!(forward(&bumped, &batch, false, 0).unwrap().logits, base);
    }
}

#[test]
fn unused_sentinel_gradient_comes_only_from_output_projection() {
    // With tied input/output embeddings an unused row still receives the
    // softmax term of the output projection: sum_pos p(row | pos) * hidden(pos) / count.
    let config = tiny_config(0.2);
    let params = jittered_params(&config, 8);
    let batch = sample_batch();
    let sentinel = config.vocab_size - 1;
    assert!(batch.encoder_ids.iter().chain(batch.decoder_input.iter()).all(|&id| id as usize != sentinel));
    let out = forward(&params, &batch, true, 21).unwrap();
    let grads = backward(&params, &batch, 21).unwrap().grads;
    let mut expected = ndarray::Array1::<f64>::zeros(config.d_model);
    for b in 0..batch.batch_size() {
        for t in 0..batch.decoder_len() {
            if batch.targets[[b, t]] == PAD {
                continue;
            }
            let row = out.logits.slice(ndarray::s![b, t, ..]);
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let p = (row[sentinel] - max).exp() / z;
            expected.scaled_add(p / out.num_targets as f64, &out.hidden.slice(ndarray::s![b, t, ..]));
        }
    }
    let got = grads.embedding.row(sentinel);
    for (g, e) in got.iter().zip(expected.iter()) {
        assert!((g - e).abs() < 1e-12, "{g} vs {e}");
    }
}

#[test]
fn small_gradient_step_reduces_loss() {
    let params = jittered_params(&tiny_config(0.1), 10);
    let batch = sample_batch();
    let before = loss(&params, &batch, 3);
    let grads = backward(&params, &batch, 3).unwrap().grads;
    let mut stepped = params.clone();
    for ((_, mut p), (_, g)) in stepped.tensors_mut().into_iter().zip(grads.tensors()) {
        p.scaled_add(-1e-3, &g);
    }
    assert!(loss(&stepped, &batch, 3) < before);
}

#[test]
fn parameter_count_matches_closed_form() {
    let config = ModelConfig::toy(1000);
    let params = init_params(&config, 0);
    // 1000*64 + 2*(49,280 + 65,728) + 2*4*32 + 2*64
    assert_eq!(params.parameter_count(), 294_400);
    assert_eq!(config.parameter_count(), 294_400);
    for (name, shape) in expected_shapes(&config) {
        let found = params.tensors().into_iter().find(|(n, _)| *n == name).unwrap().1;
        assert_eq!(found.raw_dim(), shape);
    }
}

#[test]
fn rejects_out_of_range_ids() {
    let params = init_params(&tiny_config(0.0), 0);
    let batch = Batch::from_pairs(&[(vec![25], vec![EOS])]);
    assert!(matches!(forward(&params, &batch, false, 0), Err(ModelError::ShapeMismatch(_))));
}

#[test]
fn incremental_decoding_matches_full_forward() {
    let params = jittered_params(&tiny_config(0.3), 12);
    let source = vec![5, 6, 7, 8, EOS];
    let target = vec![10, 11, 12, 13, 14, 15, EOS];
    let full = forward(&params, &Batch::from_pairs(&[(&source, &target)]), false, 0)
        .unwrap()
        .logits;
    let encoded = prepare_source(&params, &source).unwrap();
    let mut cache = DecoderCache::new(&params);
    let inputs: Vec<u32> = std::iter::once(PAD).chain(target[..target.len() - 1].iter().copied()).collect();
    for (t, &token) in inputs.iter().enumerate() {
        let step = decoder_step(&params, &encoded, &mut cache, token).unwrap();
        let reference = full.slice(ndarray::s![0, t, ..]);
        let diff = (&step - &reference).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-9, "position {t}: max diff {diff}");
    }
    assert_eq!(cache.len(), inputs.len());
}

#[test]
fn encoder_output_shape() {
    let params = init_params(&tiny_config(0.0), 0);
    let out: Array2<f64> = encode_source(&params, &[4, 5, 6]).unwrap();
    assert_eq!(out.dim(), (3, 8));
}
