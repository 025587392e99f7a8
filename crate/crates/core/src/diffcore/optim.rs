use serde::{Deserialize, Serialize};

use super::params::ParameterStore;
use crate::error::{AlftError, Result};

/// AdamW settings. `decay` multiplies the learning rate at every epoch
/// boundary; `weight_decay` is the decoupled decay coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 4e-4,
            decay: 0.98,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(AlftError::Config("learning_rate must be positive".into()));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(AlftError::Config("decay must lie in (0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(AlftError::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.batch_size == 0 {
            return Err(AlftError::Config(
                "weight_decay must be non-negative and batch_size positive".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam.
#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: OptimizerConfig,
    steps: u64,
    lr: f64,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig) -> Self {
        let lr = cfg.learning_rate;
        Self { cfg, steps: 0, lr }
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn end_epoch(&mut self) {
        self.lr *= self.cfg.decay;
    }

    /// Apply one update from the accumulated gradients, then zero them.
    pub fn step(&mut self, store: &mut ParameterStore) -> Result<()> {
        let ids: Vec<_> = store.ids().collect();
        for &id in &ids {
            if store.grad(id).iter().any(|g| !g.is_finite()) {
                return Err(AlftError::NonFiniteGradient(store.name(id).to_string()));
            }
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for id in ids {
            let (value, grad, m, v) = store.adam_state_mut(id);
            for (((w, &g), mi), vi) in value.data_mut().iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= self.lr * (mhat / (vhat.sqrt() + self.cfg.epsilon) + self.cfg.weight_decay * *w);
            }
        }
        store.zero_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn scalar_store(w: f64) -> (ParameterStore, crate::diffcore::ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let (mut s, id) = scalar_store(0.7);
        let mut opt = AdamW::new(OptimizerConfig::default());
        opt.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 0.7);
    }

    #[test]
    fn one_step_on_square_descends() {
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(OptimizerConfig::default());
        s.accumulate_grad(id, &[2.0]);
        opt.step(&mut s).unwrap();
        assert!(s.value(id).data()[0].abs() < 1.0);
        assert_eq!(s.grad(id), &[0.0]);
    }

    #[test]
    fn three_step_trajectory_matches_scalar_recursion() {
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let (mut s, id) = scalar_store(1.0);
        let mut opt = AdamW::new(cfg.clone());
        // Oracle: the moment recursion written out for f(w) = w².
        let (mut w, mut m, mut v) = (1.0_f64, 0.0_f64, 0.0_f64);
        for t in 1..=3 {
            let g = 2.0 * w;
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.learning_rate * (mh / (vh.sqrt() + cfg.epsilon) + cfg.weight_decay * w);

            let cur = s.value(id).data()[0];
            s.accumulate_grad(id, &[2.0 * cur]);
            opt.step(&mut s).unwrap();
            assert!((s.value(id).data()[0] - w).abs() < 1e-10);
        }
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let (mut s, id) = scalar_store(1.0);
        s.accumulate_grad(id, &[f64::NAN]);
        let err = AdamW::new(OptimizerConfig::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"));
    }

    #[test]
    fn epoch_decay_multiplies_learning_rate() {
        let mut opt = AdamW::new(OptimizerConfig::default());
        opt.end_epoch();
        opt.end_epoch();
        assert!((opt.learning_rate() - 4e-4 * 0.98 * 0.98).abs() < 1e-18);
    }
}
