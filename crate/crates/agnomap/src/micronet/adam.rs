//! Adam optimizer with bias correction.

use crate::tensor::Tensor;

use super::LayerGrads;

#[derive(Debug, Clone)]
pub struct AdamState {
    /// First moment per parameter tensor.
    pub mu: Vec<Tensor>,
    /// Second moment per parameter tensor.
    pub sigma: Vec<Tensor>,
    pub step_count: u64,
    pub beta1: f32,
    pub beta2: f32,
    pub lr: f32,
    pub epsilon: f32,
}

impl AdamState {
    pub fn new(params: &[&Tensor], lr: f32) -> Self {
        AdamState {
            mu: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            sigma: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            lr,
            epsilon: 1e-8,
        }
    }

    /// One update: mu <- b1*mu + (1-b1)*g, sigma <- b2*sigma + (1-b2)*g*g,
    /// param -= lr * mu_hat / (sqrt(sigma_hat) + eps).
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) {
        assert_eq!(params.len(), self.mu.len());
        assert_eq!(params.len(), grads.len());
        self.step_count += 1;
        let k = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(k);
        let bc2 = 1.0 - self.beta2.powi(k);
        for ((p, g), (m, s)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.mu.iter_mut().zip(self.sigma.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let sd = s.data_mut();
            for i in 0..pd.len() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gd[i];
                sd[i] = self.beta2 * sd[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let s_hat = sd[i] / bc2;
                pd[i] -= self.lr * m_hat / (s_hat.sqrt() + self.epsilon);
            }
        }
    }

    /// Convenience for model training: grads in per-layer form.
    pub fn step_layers(&mut self, params: &mut [&mut Tensor], grads: &[LayerGrads]) {
        let flat: Vec<&Tensor> = grads.iter().flat_map(|g| g.tensors.iter()).collect();
        self.step(params, &flat);
    }
}
