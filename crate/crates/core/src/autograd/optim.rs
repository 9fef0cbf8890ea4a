use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{MapexError, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-3, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05 }
    }
}

/// AdamW with decoupled weight decay and bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamWState {
    pub config: AdamWConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamWState {
    pub fn new(store: &ParamStore, config: AdamWConfig) -> Self {
        let m: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        AdamWState { config, v: m.clone(), m, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.v[index]
    }

    /// Applies one update from the gradients held in `store`. Parameters are untouched if any
    /// gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(MapexError::Contract(format!(
                "optimizer tracks {} parameters, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        for (id, p) in store.iter() {
            if p.grad.shape() != self.m[id.index()].shape() {
                return Err(MapexError::dim(format!("moment shape mismatch for {}", p.name)));
            }
            if p.grad.data().iter().any(|g| !g.is_finite()) {
                return Err(MapexError::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
        let AdamWConfig { lr, beta1, beta2, eps, weight_decay } = self.config;
        if lr <= 0.0 {
            return Err(MapexError::Contract("learning rate must be positive".into()));
        }
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let grad = store.grad(id).data().to_vec();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let g = grad[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                w[j] -= lr * weight_decay * w[j];
                w[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: Vec<f64>, grads: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(values));
        s.grad_mut(id).data_mut().copy_from_slice(&grads);
        s
    }

    #[test]
    fn zero_grad_without_decay_keeps_params() {
        let mut s = store_with(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut opt = AdamWState::new(&s, AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(s.find("w").unwrap()).data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn single_step_matches_hand_trace() {
        // m = 0.1 g, v = 0.05 g^2; bias-corrected mhat = g, vhat = g^2
        // update = lr * g / (|g| + eps)
        let g = [0.5, -2.0];
        let mut s = store_with(vec![1.0, 1.0], g.to_vec());
        let cfg = AdamWConfig { lr: 0.01, weight_decay: 0.0, ..Default::default() };
        let mut opt = AdamWState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        let w = s.value(s.find("w").unwrap()).data();
        let expect0 = 1.0 - 0.01 * 0.5 / (0.5 + 1e-8);
        let expect1 = 1.0 + 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((w[0] - expect0).abs() < 1e-15);
        assert!((w[1] - expect1).abs() < 1e-15);
        assert!((opt.first_moment(0).data()[0] - 0.05).abs() < 1e-15);
        assert!((opt.second_moment(0).data()[1] - 0.05 * 4.0).abs() < 1e-15);
    }

    #[test]
    fn decay_shrinks_by_closed_form_factor() {
        let mut s = store_with(vec![2.0, -4.0], vec![0.0, 0.0]);
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut opt = AdamWState::new(&s, cfg);
        opt.step(&mut s).unwrap();
        let w = s.value(s.find("w").unwrap()).data();
        assert_eq!(w, &[2.0 * 0.95, -4.0 * 0.95]);
    }

    #[test]
    fn nan_gradient_aborts_step() {
        let mut s = store_with(vec![1.0], vec![f64::NAN]);
        let mut opt = AdamWState::new(&s, AdamWConfig::default());
        assert!(matches!(opt.step(&mut s), Err(MapexError::Numeric(_))));
        assert_eq!(s.value(s.find("w").unwrap()).data(), &[1.0]);
        assert_eq!(opt.step_count(), 0);
    }
}
