use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{PirError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments for a set of named parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient entry are treated as having a zero gradient.
    ///
    /// All gradients are validated before any parameter is touched, so a
    /// non-finite gradient leaves both the parameters and the state unchanged.
    pub fn update(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in params.iter() {
            if let Some(g) = grads.get(name) {
                if g.len() != p.len() {
                    return Err(PirError::Shape {
                        node: format!("adam `{name}`"),
                        detail: format!("gradient {:?} vs parameter {:?}", g.shape(), p.shape()),
                    });
                }
                if !g.all_finite() {
                    return Err(PirError::NonFiniteGradient(name.clone()));
                }
            }
        }

        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);

        for (name, p) in params.iter_mut() {
            let n = p.len();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let g = grads.get(name).map(Tensor::data);
            for i in 0..n {
                let gi = g.map_or(0.0, |g| g[i]);
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data_mut()[i] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(name: &str, v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(name, Tensor::scalar(v));
        p
    }

    fn grad(name: &str, g: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        let mut p = single("x", 0.0);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.update(&mut p, &grad("x", 0.5)).unwrap();
        let expected = -1e-3 * 0.5 / (0.5 + 1e-8);
        assert!((p.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        assert!((expected + 9.99998e-4).abs() < 1e-8);
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn zero_gradient_leaves_parameter_unchanged() {
        let mut p = single("x", 0.7);
        let mut adam = AdamState::new(AdamConfig::default());
        adam.update(&mut p, &grad("x", 0.0)).unwrap();
        assert_eq!(p.get("x").unwrap().data()[0], 0.7);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut p = single("w.bias", 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let err = adam.update(&mut p, &grad("w.bias", f64::NAN)).unwrap_err();
        assert!(err.to_string().contains("w.bias"));
        assert_eq!(adam.step(), 0);
        assert_eq!(p.get("w.bias").unwrap().data()[0], 1.0);
    }

    #[test]
    fn hundred_steps_on_a_parabola() {
        // Independent scalar recurrence of the same update rule.
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut reference = Vec::new();
        for t in 1..=100 {
            let g = 2.0 * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x -= lr * mh / (vh.sqrt() + eps);
            reference.push(x);
        }

        let mut p = single("x", 1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut prev_loss = f64::INFINITY;
        for want in reference {
            let x = p.get("x").unwrap().data()[0];
            let loss = x * x;
            assert!(loss < prev_loss);
            prev_loss = loss;
            adam.update(&mut p, &grad("x", 2.0 * x)).unwrap();
            assert_eq!(p.get("x").unwrap().data()[0], want);
        }
        let x = p.get("x").unwrap().data()[0];
        // roughly lr per step: 100 steps only get to ~0.9017
        assert!(x > 0.9 && x < 0.905, "{x}");
        assert_eq!(adam.step(), 100);
    }
}
