use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Grid, ParamStore};

/// NAdam with the momentum-decay schedule
/// `μ_t = β₁·(1 − ½·0.96^(t·ψ))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NAdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub momentum_decay: f64,
}

impl Default for NAdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            momentum_decay: 0.004,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NAdam {
    pub config: NAdamConfig,
    pub step: u64,
    mu_product: f64,
    m: BTreeMap<String, Grid>,
    v: BTreeMap<String, Grid>,
}

impl NAdam {
    pub fn new(config: NAdamConfig) -> Self {
        Self {
            config,
            step: 0,
            mu_product: 1.0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    fn mu(&self, t: u64) -> f64 {
        self.config.beta1 * (1.0 - 0.5 * 0.96f64.powf(t as f64 * self.config.momentum_decay))
    }

    /// One update of every parameter from its accumulated gradient.
    /// `lr_for` gives the learning rate per parameter name.
    pub fn update(&mut self, store: &mut ParamStore, lr_for: impl Fn(&str) -> f64) -> Result<()> {
        self.step += 1;
        let t = self.step;
        let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.eps);
        let mu = self.mu(t);
        let mu_next = self.mu(t + 1);
        self.mu_product *= mu;
        let mu_product_next = self.mu_product * mu_next;
        let bc2 = 1.0 - b2.powi(t as i32);
        for (name, p) in store.iter_mut() {
            let lr = lr_for(name);
            let (h, w, c) = p.value.shape();
            let m = self.m.entry(name.to_string()).or_insert_with(|| Grid::zeros(h, w, c));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Grid::zeros(h, w, c));
            let grad_coef = lr * (1.0 - mu) / (1.0 - self.mu_product);
            let mom_coef = lr * mu_next / (1.0 - mu_product_next);
            for (((x, g), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let denom = (*vi / bc2).sqrt() + eps;
                *x -= grad_coef * g / denom;
                *x -= mom_coef * *mi / denom;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scalar NAdam written out step by step.
    fn reference(grads: &[f64], lr: f64) -> f64 {
        let (b1, b2, eps, psi) = (0.9f64, 0.999f64, 1e-8, 0.004);
        let (mut x, mut m, mut v, mut prod) = (1.0f64, 0.0, 0.0, 1.0);
        for (i, &g) in grads.iter().enumerate() {
            let t = (i + 1) as f64;
            let mu = b1 * (1.0 - 0.5 * 0.96f64.powf(t * psi));
            let mu1 = b1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * psi));
            prod *= mu;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let vhat = v / (1.0 - b2.powf(t));
            x -= lr * (1.0 - mu) / (1.0 - prod) * g / (vhat.sqrt() + eps);
            x -= lr * mu1 / (1.0 - prod * mu1) * m / (vhat.sqrt() + eps);
        }
        x
    }

    #[test]
    fn matches_scalar_reference() {
        let grads = [0.5, -0.2, 0.3, 1.0, -0.7];
        let mut store = ParamStore::new();
        store.insert("p", Grid::scalar(1.0));
        let mut opt = NAdam::new(NAdamConfig::default());
        for &g in &grads {
            store.get_mut("p").unwrap().grad = Grid::scalar(g);
            opt.update(&mut store, |_| 0.01).unwrap();
        }
        let want = reference(&grads, 0.01);
        assert!((store.value("p").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("p", Grid::vector(vec![3.0, -2.0]));
        let mut opt = NAdam::new(NAdamConfig::default());
        for _ in 0..2000 {
            let g = store.value("p").unwrap().clone();
            store.get_mut("p").unwrap().grad = g;
            opt.update(&mut store, |_| 0.01).unwrap();
        }
        assert!(store.value("p").unwrap().data().iter().all(|v| v.abs() < 0.05));
    }
}
