//! Learning-rate schedule and the Adam optimizer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::state::{ModelState, ParamGroup};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// The rate is multiplied by `decay_gamma` once past each of these epochs.
    pub decay_epochs: Vec<usize>,
    pub decay_gamma: f64,
    /// Linear ramp from `warmup_start_factor * base_lr` over this many epochs.
    pub warmup_epochs: usize,
    pub warmup_start_factor: f64,
    /// Global gradient-norm ceiling; `None` disables clipping. Serialized as `0` when off.
    #[serde(with = "clip_or_zero")]
    pub grad_clip: Option<f64>,
}

mod clip_or_zero {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(v.unwrap_or(0.0))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let v = f64::deserialize(d)?;
        Ok((v != 0.0).then_some(v))
    }
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            base_lr: 3.5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 120,
            batch_size: 32,
            decay_epochs: vec![40, 70],
            decay_gamma: 0.1,
            warmup_epochs: 10,
            warmup_start_factor: 0.1,
            grad_clip: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut problems = Vec::new();
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            problems.push(format!("base_lr must be finite and >= 0, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            problems.push("beta1 and beta2 must lie in [0, 1)".to_string());
        }
        if !(self.eps > 0.0) {
            problems.push("eps must be positive".to_string());
        }
        if self.epochs == 0 {
            problems.push("epochs must be >= 1".to_string());
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be >= 1".to_string());
        }
        if self.decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            problems.push("decay_epochs must be strictly increasing".to_string());
        }
        if !(self.decay_gamma > 0.0) {
            problems.push("decay_gamma must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.warmup_start_factor) {
            problems.push("warmup_start_factor must lie in [0, 1]".to_string());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                problems.push("grad_clip must be positive when set".to_string());
            }
        }
        problems
    }
}

/// Scheduled learning rate for a zero-based epoch.
pub fn learning_rate(epoch: usize, config: &OptimizerConfig) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::domain(format!(
            "epoch {epoch} outside 0..{}",
            config.epochs
        )));
    }
    let decays = config.decay_epochs.iter().filter(|&&d| epoch > d).count();
    let mut lr = config.base_lr * config.decay_gamma.powi(decays as i32);
    if epoch < config.warmup_epochs {
        let f = config.warmup_start_factor;
        lr *= f + (1.0 - f) * epoch as f64 / config.warmup_epochs as f64;
    }
    Ok(lr)
}

/// Adam with per-tensor step counts, so tensors that join training late
/// get their own bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    eps: f64,
    grad_clip: Option<f64>,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
    steps: Vec<u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: &OptimizerConfig, state: &ModelState<T>) -> Self {
        let shapes: Vec<usize> = state.tensors().iter().map(|(_, t)| t.len()).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            grad_clip: config.grad_clip,
            first: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            second: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: vec![0; shapes.len()],
        }
    }

    /// Update every tensor for which `trainable` holds; all other tensors
    /// and their moment estimates are left untouched.
    pub fn step(
        &mut self,
        state: &mut ModelState<T>,
        grads: &ModelState<T>,
        lr: f64,
        trainable: impl Fn(ParamGroup) -> bool,
    ) -> Result<()> {
        let grad_tensors = grads.tensors();
        let mut params = state.tensors_mut();
        if params.len() != self.first.len() || grad_tensors.len() != params.len() {
            return Err(Error::shape("optimizer state does not match the model"));
        }
        let clip_scale = match self.grad_clip {
            Some(max_norm) => {
                let sq: f64 = grad_tensors
                    .iter()
                    .filter(|(g, _)| trainable(*g))
                    .flat_map(|(_, t)| t.iter())
                    .map(|v| v.as_f64() * v.as_f64())
                    .sum();
                let norm = sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (eps, lr_t, scale) = (T::lit(self.eps), T::lit(lr), T::lit(clip_scale));
        for (i, ((group, p), (_, g))) in params.iter_mut().zip(&grad_tensors).enumerate() {
            if !trainable(*group) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = T::one() - b1.powi(t);
            let c2 = T::one() - b2.powi(t);
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for j in 0..p.len() {
                let gj = g[j] * scale;
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] = p[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_and_decay_points() {
        let cfg = OptimizerConfig::default();
        assert_eq!(learning_rate(20, &cfg).unwrap(), 3.5e-4);
        assert_eq!(learning_rate(40, &cfg).unwrap(), 3.5e-4);
        assert!((learning_rate(41, &cfg).unwrap() - 3.5e-5).abs() < 1e-18);
        assert!((learning_rate(70, &cfg).unwrap() - 3.5e-5).abs() < 1e-18);
        assert!((learning_rate(71, &cfg).unwrap() - 3.5e-6).abs() < 1e-18);
        assert!((learning_rate(119, &cfg).unwrap() - 3.5e-6).abs() < 1e-18);
    }

    #[test]
    fn warmup_ramp_endpoints() {
        let cfg = OptimizerConfig::default();
        // 3.5e-4 * (0.1 + 0.9 * 0/10)
        assert!((learning_rate(0, &cfg).unwrap() - 3.5e-5).abs() < 1e-18);
        // 3.5e-4 * (0.1 + 0.9 * 5/10)
        assert!((learning_rate(5, &cfg).unwrap() - 3.5e-4 * 0.55).abs() < 1e-18);
        assert_eq!(learning_rate(10, &cfg).unwrap(), 3.5e-4);
    }

    #[test]
    fn epoch_out_of_range() {
        let cfg = OptimizerConfig::default();
        assert!(matches!(learning_rate(120, &cfg), Err(Error::Domain(_))));
    }

    #[test]
    fn schedule_is_monotone_after_warmup() {
        let cfg = OptimizerConfig::default();
        let lrs: Vec<f64> = (10..120).map(|e| learning_rate(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn validation_lists_problems() {
        let cfg = OptimizerConfig {
            epochs: 0,
            batch_size: 0,
            decay_epochs: vec![70, 40],
            ..OptimizerConfig::default()
        };
        assert_eq!(cfg.validate().len(), 3);
        assert!(OptimizerConfig::default().validate().is_empty());
    }
}
