use super::TrainingError;
use crate::model::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub first: ModelParams,
    pub second: ModelParams,
    /// Number of updates applied so far.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        OptimizerState {
            first: params.zeros_like(),
            second: params.zeros_like(),
            step: 0,
        }
    }

    pub fn round_to_f32(&mut self) {
        self.first.round_to_f32();
        self.second.round_to_f32();
    }
}

/// One bias-corrected adaptive-moment update. Parameters are left untouched
/// if any gradient is non-finite.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimizerState,
    rate: f64,
) -> Result<(), TrainingError> {
    let grad_tensors = grads.tensors();
    if let Some((name, _)) = grad_tensors
        .iter()
        .find(|(_, g)| g.iter().any(|v| !v.is_finite()))
    {
        return Err(TrainingError::NonFiniteGradient(name.clone()));
    }
    let param_tensors = params.tensors_mut();
    if param_tensors.len() != grad_tensors.len()
        || param_tensors
            .iter()
            .zip(&grad_tensors)
            .any(|((_, p), (_, g))| p.shape() != g.shape())
    {
        return Err(TrainingError::ShapeMismatch);
    }
    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - BETA1.powi(t);
    let correct2 = 1.0 - BETA2.powi(t);
    for ((((_, mut p), (_, g)), (_, mut m)), (_, mut v)) in param_tensors
        .into_iter()
        .zip(grad_tensors)
        .zip(state.first.tensors_mut())
        .zip(state.second.tensors_mut())
    {
        ndarray::Zip::from(&mut p)
            .and(&g)
            .and(&mut m)
            .and(&mut v)
            .for_each(|p, &g, m, v| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                let m_hat = *m / correct1;
                let v_hat = *v / correct2;
                *p -= rate * m_hat / (v_hat.sqrt() + EPSILON);
            });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ModelConfig};

    fn tiny() -> ModelParams {
        let mut c = ModelConfig::toy(12);
        c.num_layers = 1;
        c.d_model = 4;
        c.d_ff = 4;
        c.d_kv = 2;
        c.num_heads = 2;
        c.num_rel_buckets = 4;
        init_params(&c, 1)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut params = tiny();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = OptimizerState::new(&params);
        optimizer_step(&mut params, &grads, &mut state, 0.1).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_rate() {
        // f(w) = w^2 at w = 1: gradient 2, m_hat = 2, v_hat = 4, step = rate * 2 / (2 + eps).
        let mut params = tiny();
        params.embedding[[0, 0]] = 1.0;
        let mut grads = params.zeros_like();
        grads.embedding[[0, 0]] = 2.0 * params.embedding[[0, 0]];
        let mut state = OptimizerState::new(&params);
        optimizer_step(&mut params, &grads, &mut state, 0.1).unwrap();
        let expected = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((params.embedding[[0, 0]] - expected).abs() < 1e-15);
        assert!((1.0 - params.embedding[[0, 0]] - 0.1).abs() < 1e-8);
    }

    #[test]
    fn non_finite_gradient_names_the_tensor() {
        let mut params = tiny();
        let before = params.clone();
        let mut grads = params.zeros_like();
        grads.decoder[0].ff.wo[[1, 1]] = f64::NAN;
        let mut state = OptimizerState::new(&params);
        let err = optimizer_step(&mut params, &grads, &mut state, 0.1).unwrap_err();
        assert!(matches!(err, TrainingError::NonFiniteGradient(ref n) if n == "decoder.0.ff.wo"));
        assert_eq!(params, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut params = tiny();
            let mut state = OptimizerState::new(&params);
            for i in 0..5 {
                let mut grads = params.zeros_like();
                grads.embedding.mapv_inplace(|_| 0.1 * i as f64 - 0.2);
                grads.encoder_bias.fill(0.3);
                optimizer_step(&mut params, &grads, &mut state, 0.01).unwrap();
            }
            params
        };
        assert_eq!(run(), run());
    }
}
