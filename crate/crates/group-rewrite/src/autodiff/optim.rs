//! Adam with bias correction, plus global-norm gradient clipping.

use super::{ParamId, ParamStore, Scalar, Tensor, TensorError};

/// First/second moment estimates for every parameter in a store, lazily
/// allocated on first update.
pub struct AdamState<F: Scalar> {
    m: Vec<Option<Tensor<F>>>,
    v: Vec<Option<Tensor<F>>>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(num_params: usize) -> Self {
        AdamState {
            m: (0..num_params).map(|_| None).collect(),
            v: (0..num_params).map(|_| None).collect(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (Option<&Tensor<F>>, Option<&Tensor<F>>) {
        (self.m[id.0].as_ref(), self.v[id.0].as_ref())
    }
}

/// One bias-corrected Adam update. Each `(ids, lr)` group is updated with its
/// own learning rate; the step counter is shared. All gradients are cleared
/// afterwards; a listed parameter without a gradient is an error.
pub fn adam_step<F: Scalar>(
    store: &mut ParamStore<F>,
    state: &mut AdamState<F>,
    groups: &[(&[ParamId], f64)],
) -> Result<(), TensorError> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - state.beta1.powf(t);
    let bc2 = 1.0 - state.beta2.powf(t);
    let b1 = F::from_f64(state.beta1);
    let b2 = F::from_f64(state.beta2);
    let one_m_b1 = F::from_f64(1.0 - state.beta1);
    let one_m_b2 = F::from_f64(1.0 - state.beta2);
    let eps = F::from_f64(state.eps);
    for &(ids, lr) in groups {
        let step_size = F::from_f64(lr / bc1);
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt());
        for &id in ids {
            let grad = store.take_grad(id).ok_or_else(|| TensorError::MissingGradient {
                name: store.name(id).to_string(),
            })?;
            let shape = grad.shape().to_vec();
            let m = state.m[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let v = state.v[id.0].get_or_insert_with(|| Tensor::zeros(&shape));
            let value = store.value_mut(id);
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                let mi = b1 * m.data()[i] + one_m_b1 * g;
                let vi = b2 * v.data()[i] + one_m_b2 * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let update = step_size * mi / (vi.sqrt() * inv_sqrt_bc2 + eps);
                value.data_mut()[i] = value.data()[i] - update;
            }
        }
    }
    store.clear_grads();
    Ok(())
}

/// Scales all listed gradients so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(
    store: &mut ParamStore<F>,
    ids: &[ParamId],
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for &id in ids {
        if let Some(g) = store.grad(id) {
            for &v in g.data() {
                let v = v.to_f64();
                sq += v * v;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for &id in ids {
            if let Some(g) = store.grad_mut(id) {
                g.scale_assign(scale);
            }
        }
    }
    norm
}
