use std::collections::{BTreeMap, HashMap};

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty added to the gradient (not decoupled).
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.0,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias correction. Moment buffers are keyed by parameter name so the
/// state can be checkpointed next to the weights.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Updates every parameter of `store` that received a gradient in `grads`.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in store.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let p = var.as_tensor().detach();
            let mut g = g.detach();
            if c.weight_decay != 0.0 {
                g = (g + (&p * c.weight_decay)?)?;
            }
            let (m, v) = match self.moments.get(name) {
                Some((m, v)) => (m.clone(), v.clone()),
                None => (p.zeros_like()?, p.zeros_like()?),
            };
            let m = ((m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            var.set(&(p - (update * c.lr)?)?)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(())
    }

    pub fn export(&self, prefix: &str) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (k, (m, v)) in &self.moments {
            out.insert(format!("{prefix}m.{k}"), m.clone());
            out.insert(format!("{prefix}v.{k}"), v.clone());
        }
        out
    }

    /// Restores moment buffers saved by [`Adam::export`] for the parameters of `store`.
    pub fn import(
        &mut self,
        store: &ParamStore,
        tensors: &HashMap<String, Tensor>,
        prefix: &str,
        step: u64,
    ) -> Result<()> {
        self.moments.clear();
        self.step = step;
        for (name, _) in store.iter() {
            let m = tensors.get(&format!("{prefix}m.{name}"));
            let v = tensors.get(&format!("{prefix}v.{name}"));
            match (m, v) {
                (Some(m), Some(v)) => {
                    self.moments.insert(name.clone(), (m.clone(), v.clone()));
                }
                (None, None) => {}
                _ => {
                    return Err(Error::Data(format!(
                        "optimizer state for {prefix}{name} is incomplete"
                    )))
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Var};
    use rand::SeedableRng;

    #[test]
    fn minimises_a_quadratic() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new(DType::F64);
        let w = store.normal("w", &[3], 1.0, &mut rng).unwrap();
        let mut opt = Adam::new(AdamConfig {
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        });
        for _ in 0..500 {
            let loss = (&w - 2.0).unwrap().sqr().unwrap().sum_all().unwrap();
            let grads = loss.backward().unwrap();
            opt.step(&store, &grads).unwrap();
        }
        for x in w.to_vec1::<f64>().unwrap() {
            assert!((x - 2.0).abs() < 1e-2, "{x}");
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_untouched() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new(DType::F32);
        let w = store.normal("w", &[4], 1.0, &mut rng).unwrap();
        let before = store.digest().unwrap();
        let mut opt = Adam::new(AdamConfig::with_lr(0.0));
        let grads = w.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        opt.step(&store, &grads).unwrap();
        assert_eq!(before, store.digest().unwrap());
    }

    #[test]
    fn skips_parameters_without_gradient() {
        let mut store = ParamStore::new(DType::F64);
        store.zeros("unused", &[2]).unwrap();
        let other = Var::new(&[1.0f64], &candle_core::Device::Cpu).unwrap();
        let grads = other.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&store, &grads).unwrap();
        assert!(opt.export("").is_empty());
    }
}
