//! Bias-corrected Adam over a parameter store.

use crate::config::OptimizerConfig;
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { lr, beta1, beta2, eps, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn generator(store: &ParamStore, o: &OptimizerConfig) -> Self {
        Self::new(store, o.lr_g, o.beta1, o.beta2, o.eps)
    }

    pub fn discriminator(store: &ParamStore, o: &OptimizerConfig) -> Self {
        Self::new(store, o.lr_d, o.beta1, o.beta2, o.eps)
    }

    /// Applies one update from the grads held in `store`. Nothing changes if
    /// any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if store.len() != self.m.len() {
            return Err(Error::Shape(format!("optimizer tracks {} params, store has {}", self.m.len(), store.len())));
        }
        if let Some(p) = store.params().iter().find(|p| !p.grad.all_finite()) {
            return Err(Error::NonFinite(format!("non-finite gradient for {}", p.name)));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in store.params_mut().iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (x, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *x -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
