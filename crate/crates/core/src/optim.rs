//! Adam with bias correction and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    #[serde(rename = "lr")]
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(rename = "eps")]
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 2e-5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepReport {
    pub updated: usize,
    /// Parameters in the update list that had no gradient.
    pub skipped: Vec<String>,
}

/// One Adam update over `ids`. Weight decay is applied to the weights
/// directly (`θ ← θ − lr·wd·θ`) before the moment-based step. Gradients are
/// cleared afterwards.
pub fn adam_step<T: Real>(
    store: &mut ParamStore<T>,
    ids: &[ParamId],
    config: &OptimizerConfig,
) -> StepReport {
    let mut report = StepReport::default();
    let lr = T::of(config.learning_rate);
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let eps = T::of(config.epsilon);
    let decay = T::of(config.learning_rate * config.weight_decay);
    for &id in ids {
        let p = store.get_mut(id);
        let Some(grad) = p.grad.take() else {
            report.skipped.push(p.name.clone());
            continue;
        };
        p.adam.t += 1;
        let t = p.adam.t as i32;
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);
        let values = p.value.data_mut();
        for (((theta, g), m), v) in values
            .iter_mut()
            .zip(&grad)
            .zip(p.adam.m.iter_mut())
            .zip(p.adam.v.iter_mut())
        {
            *theta -= decay * *theta;
            *m = b1 * *m + (T::one() - b1) * *g;
            *v = b2 * *v + (T::one() - b2) * *g * *g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        report.updated += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape, Tensor};

    fn one_param(v: f64) -> (ParamStore<f64>, ParamId) {
        let mut store = ParamStore::new();
        let id = store.insert("theta", Tensor::scalar(v)).unwrap();
        (store, id)
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let (mut store, id) = one_param(0.7);
        store.get_mut(id).grad = Some(vec![0.0]);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adam_step(&mut store, &[id], &cfg);
        assert_eq!(store.get(id).value.data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut store, id) = one_param(1.0);
        store.get_mut(id).grad = Some(vec![1.0]);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        };
        let report = adam_step(&mut store, &[id], &cfg);
        assert_eq!(report.updated, 1);
        let theta = store.get(id).value.data()[0];
        // m̂ = 1, v̂ = 1  ⇒  θ' = 1 − 0.1·1/(1 + 1e-8)
        assert!((theta - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(store.get(id).adam.t, 1);
        assert!(store.get(id).grad.is_none());
    }

    #[test]
    fn decoupled_decay_shrinks_weights_with_zero_gradient() {
        let (mut store, id) = one_param(2.0);
        store.get_mut(id).grad = Some(vec![0.0]);
        let cfg = OptimizerConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        adam_step(&mut store, &[id], &cfg);
        assert!((store.get(id).value.data()[0] - 1.9).abs() < 1e-12);
    }

    #[test]
    fn missing_gradients_are_reported() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::zeros(Shape::new(1, 1, 1, 2))).unwrap();
        let b = store.insert("b", Tensor::zeros(Shape::new(1, 1, 1, 2))).unwrap();
        store.get_mut(a).grad = Some(vec![1.0, 1.0]);
        let report = adam_step(&mut store, &[a, b], &OptimizerConfig::default());
        assert_eq!(report.updated, 1);
        assert_eq!(report.skipped, vec!["b".to_string()]);
        assert_eq!(store.get(b).adam.t, 0);
    }

    #[test]
    fn defaults_follow_the_training_recipe() {
        let cfg = OptimizerConfig::default();
        assert_eq!(cfg.learning_rate, 1e-5);
        assert_eq!(cfg.beta1, 0.9);
        assert_eq!(cfg.weight_decay, 2e-5);
        cfg.validate().unwrap();
        assert!(OptimizerConfig {
            beta2: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
