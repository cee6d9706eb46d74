//! Adam optimizer with bias correction.

use super::tensor::ParamSet;
use super::{DiffError, DiffResult, Real};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers, keyed by parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<R: Real = f32> {
    pub config: AdamConfig,
    pub step_count: u64,
    first_moment: Vec<Vec<R>>,
    second_moment: Vec<Vec<R>>,
}

impl<R: Real> AdamState<R> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step_count: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }
}

/// One Adam update over every parameter in `params`.
///
/// Requires a populated gradient on every parameter; zeroes gradients after
/// applying the update. Moment buffers are lazily shaped on the first call.
pub fn adam_step<R: Real>(params: &mut ParamSet<R>, state: &mut AdamState<R>) -> DiffResult<()> {
    if state.first_moment.is_empty() {
        for (_, t) in params.iter() {
            state.first_moment.push(vec![R::zero(); t.numel()]);
            state.second_moment.push(vec![R::zero(); t.numel()]);
        }
    }
    for (name, t) in params.iter() {
        if t.grad.is_none() {
            return Err(DiffError::MissingGradient(name.to_string()));
        }
    }
    state.step_count += 1;
    let t = state.step_count as f64;
    let c = &state.config;
    let bias1 = 1.0 - c.beta1.powf(t);
    let bias2 = 1.0 - c.beta2.powf(t);
    let (b1, b2) = (R::from_f64(c.beta1), R::from_f64(c.beta2));
    let one_m_b1 = R::from_f64(1.0 - c.beta1);
    let one_m_b2 = R::from_f64(1.0 - c.beta2);
    let lr = R::from_f64(c.learning_rate);
    let eps = R::from_f64(c.epsilon);
    let inv_bias1 = R::from_f64(1.0 / bias1);
    let inv_bias2 = R::from_f64(1.0 / bias2);

    for (pi, (_, tensor)) in params.iter_mut().enumerate() {
        let grad = tensor.grad.as_ref().expect("checked above").clone();
        let m = &mut state.first_moment[pi];
        let v = &mut state.second_moment[pi];
        for ((p, g), (mi, vi)) in tensor
            .data
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = b1 * *mi + one_m_b1 * *g;
            *vi = b2 * *vi + one_m_b2 * *g * *g;
            let m_hat = *mi * inv_bias1;
            let v_hat = *vi * inv_bias2;
            *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
        }
        tensor.zero_grad();
    }
    Ok(())
}
