use super::layers::LayerParams;
use crate::{Error, Result, Tensor};

/// Adam moments and step counter, one slot per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Zero moments shaped like `params`, with `beta1 = 0.9`, `beta2 = 0.999`, `eps = 1e-8`.
    pub fn new(params: &[LayerParams]) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .flat_map(|p| [&p.kernels, &p.biases])
            .map(|t| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Self {
            first_moment: zeros.clone(),
            second_moment: zeros,
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(
    params: &mut [LayerParams],
    grads: &[LayerParams],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || 2 * params.len() != state.first_moment.len() {
        return Err(Error::ShapeMismatch {
            left: vec![params.len()],
            right: vec![grads.len(), state.first_moment.len() / 2],
        });
    }
    for (p, g) in params.iter().zip(grads) {
        p.kernels.check_same_shape(&g.kernels)?;
        p.biases.check_same_shape(&g.biases)?;
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let slots = params
        .iter_mut()
        .zip(grads)
        .flat_map(|(p, g)| [(&mut p.kernels, &g.kernels), (&mut p.biases, &g.biases)]);
    for ((param, grad), (m, v)) in slots.zip(state.first_moment.iter_mut().zip(state.second_moment.iter_mut())) {
        param.check_same_shape(m)?;
        for (((w, &g), m), v) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
