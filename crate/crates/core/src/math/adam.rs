use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Adam hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment buffers for a fixed, ordered parameter list.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState { config, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Gradients are left in place; the
    /// caller zeroes them before the next accumulation.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.first.is_empty() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = self.first.clone();
        }
        if self.first.len() != params.len() {
            return Err(Error::Config(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.grad().is_none() {
                return Err(Error::MissingGrad(p.name().to_string()));
            }
            if self.first[i].len() != p.len() {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    lhs: vec![self.first[i].len()],
                    rhs: p.shape().to_vec(),
                });
            }
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = p.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let data = p.data_mut();
            for j in 0..data.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param_with_grad(x: f64, g: f64) -> Tensor {
        let mut t = Tensor::param("p", &[1], vec![x]).unwrap();
        t.accumulate_grad(&[g]).unwrap();
        t
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut p = param_with_grad(1.5, 0.0);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        assert_eq!(p.data(), &[1.5]);
    }

    #[test]
    fn first_step_is_unit_step() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g|+ε)
        let mut p = param_with_grad(0.0, 1.0);
        let mut opt = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
        opt.step(&mut [&mut p]).unwrap();
        let expected = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((p.data()[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step_count(), 1);
        assert_eq!(p.grad().unwrap(), &[1.0], "grads untouched");
    }

    #[test]
    fn constant_grad_moves_monotonically() {
        let mut p = param_with_grad(0.0, -2.0);
        let mut opt = AdamState::new(AdamConfig::default());
        opt.step(&mut [&mut p]).unwrap();
        let after_one = p.data()[0];
        opt.step(&mut [&mut p]).unwrap();
        assert!(after_one > 0.0 && p.data()[0] > after_one);
    }

    #[test]
    fn missing_grad_names_param() {
        let mut p = Tensor::param("encoder.w", &[1], vec![0.0]).unwrap();
        let mut opt = AdamState::new(AdamConfig::default());
        let err = opt.step(&mut [&mut p]).unwrap_err();
        assert!(err.to_string().contains("encoder.w"));
    }
}
