use std::collections::BTreeMap;

use crate::error::{NumericsError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam moments, keyed by parameter name.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Result<Self> {
        if !(config.lr > 0.0) {
            return Err(NumericsError::BadLearningRate(config.lr));
        }
        Ok(Self { config, step: 0, first: BTreeMap::new(), second: BTreeMap::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        Some((self.first.get(name)?.as_slice(), self.second.get(name)?.as_slice()))
    }

    /// Applies one update to every parameter that has a gradient entry.
    /// Parameters without a gradient (frozen) are left untouched.
    ///
    /// Validation happens before any parameter is modified, so an error leaves
    /// both `params` and the state unchanged.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<S>>,
        grads: &BTreeMap<String, Tensor<S>>,
    ) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| NumericsError::ShapeMismatch {
                op: "adam_step (unknown parameter)",
                left: Vec::new(),
                right: g.shape().to_vec(),
            })?;
            if p.shape() != g.shape() {
                return Err(NumericsError::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(NumericsError::NonFiniteGradient(name.clone()));
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("validated above");
            let n = g.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gf = gv.as_f64();
                *mv = beta1 * *mv + (1.0 - beta1) * gf;
                *vv = beta2 * *vv + (1.0 - beta2) * gf * gf;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv = S::from_f64(pv.as_f64() - lr * mhat / (vhat.sqrt() + eps));
            }
        }
        Ok(())
    }
}
