use crate::encoders::ModelParams;
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, scaled by the learning rate.
    pub l2: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, l2: 0.0 }
    }
}

/// One bias-corrected Adam update of `param` at 1-based `step`:
/// `p -= lr * (m_hat / (sqrt(v_hat) + eps) + l2 * p)`.
pub fn adam_update(param: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], step: u64, lr: f64, c: &AdamConfig) {
    let bc1 = 1.0 - c.beta1.powi(step as i32);
    let bc2 = 1.0 - c.beta2.powi(step as i32);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
        v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= lr * (mhat / (vhat.sqrt() + c.eps) + c.l2 * param[i]);
    }
}

/// Parameters with their optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub m: ModelParams,
    pub v: ModelParams,
    /// Number of updates applied so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let m = params.zeros_like();
        let v = params.zeros_like();
        Self { params, m, v, step: 0 }
    }

    /// Applies one update; the padding embedding row is zero afterwards.
    pub fn adam_step(&mut self, grads: &ModelParams, lr: f64, c: &AdamConfig) {
        self.step += 1;
        let grads: Vec<&Tensor> = grads.named().into_iter().map(|(_, t)| t).collect();
        let params = self.params.values_mut();
        let ms = self.m.values_mut();
        let vs = self.v.values_mut();
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(ms).zip(vs) {
            adam_update(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.step, lr, c);
        }
        self.params.item_emb.row_slice_mut(0).fill(0.0);
    }
}
