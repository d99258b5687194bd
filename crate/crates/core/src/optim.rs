//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moments, aligned with `ParamSet` order.
pub struct AdamState<S: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ParamSet<S>, config: AdamConfig) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        let v = params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState {
            config,
            step: 0,
            m,
            v,
        }
    }

    pub fn moments(&self, id: usize) -> (&Tensor<S>, &Tensor<S>) {
        (&self.m[id], &self.v[id])
    }

    pub fn set_moments(&mut self, id: usize, m: Tensor<S>, v: Tensor<S>) -> Result<()> {
        if m.shape() != self.m[id].shape() || v.shape() != self.v[id].shape() {
            return Err(Error::Config(format!(
                "optimizer moment shape mismatch for parameter {id}"
            )));
        }
        self.m[id] = m;
        self.v[id] = v;
        Ok(())
    }
}

/// One Adam update from the gradients currently held in `params`.
pub fn adam_step<S: Scalar>(
    params: &mut ParamSet<S>,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let b1 = S::of_f64(beta1);
    let b2 = S::of_f64(beta2);
    let one = S::one();
    let corr1 = S::of_f64(1.0 - beta1.powi(t));
    let corr2 = S::of_f64(1.0 - beta2.powi(t));
    let lr_s = S::of_f64(lr);
    let eps_s = S::of_f64(eps);

    for id in 0..params.len() {
        let grad = params.get(id).grad.clone();
        let g = grad.data();
        let m = state.m[id].data_mut();
        let v = state.v[id].data_mut();
        let value = params.get_mut(id).value.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (one - b1) * g[i];
            v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            value[i] = value[i] - lr_s * m_hat / (v_hat.sqrt() + eps_s);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(value: f64) -> ParamSet<f64> {
        let mut set = ParamSet::new();
        set.add("w", Tensor::full([1, 1, 1, 1], value)).unwrap();
        set
    }

    #[test]
    fn rejects_nonpositive_lr() {
        let mut set = one_param(1.0);
        let mut state = AdamState::new(&set, AdamConfig::default());
        assert!(adam_step(&mut set, &mut state, 0.0).is_err());
        assert!(adam_step(&mut set, &mut state, -1e-4).is_err());
    }

    #[test]
    fn first_step_magnitude_is_bias_corrected_lr() {
        // With a constant gradient g, step 1 gives m_hat = g, v_hat = g^2,
        // so the update is lr * g / (|g| + eps) = lr to within eps effects.
        let mut set = one_param(1.0);
        let mut state = AdamState::new(&set, AdamConfig::default());
        set.accumulate_grad(0, &Tensor::full([1, 1, 1, 1], 0.5));
        adam_step(&mut set, &mut state, 1e-3).unwrap();
        let moved = 1.0 - set.get(0).value.item().unwrap();
        assert!(
            (moved - 1e-3).abs() < 1e-9,
            "first-step magnitude {moved} should be ~lr"
        );
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut set = one_param(2.5);
        let mut state = AdamState::new(&set, AdamConfig::default());
        for _ in 0..5 {
            adam_step(&mut set, &mut state, 1e-2).unwrap();
        }
        assert_eq!(set.get(0).value.item().unwrap(), 2.5);
    }
}
