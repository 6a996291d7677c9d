//! Gradient-descent optimizers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamGrads, Params};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

pub struct Optimizer<T> {
    config: OptimizerConfig,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut Params<T>, grads: &ParamGrads<T>, lr: f64) {
        self.step += 1;
        let t = self.step as f64;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            match self.config {
                OptimizerConfig::Sgd => {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - T::of(lr) * gv;
                    }
                }
                OptimizerConfig::Adam { beta1, beta2, eps } => {
                    let m = self
                        .first
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let v = self
                        .second
                        .entry(name.clone())
                        .or_insert_with(|| Tensor::zeros(p.shape()));
                    let c1 = 1.0 - beta1.powf(t);
                    let c2 = 1.0 - beta2.powf(t);
                    let (b1, b2) = (T::of(beta1), T::of(beta2));
                    for (((w, &gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.data_mut())
                        .zip(v.data_mut())
                    {
                        *mv = b1 * *mv + (T::one() - b1) * gv;
                        *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                        let mhat = mv.as_f64() / c1;
                        let vhat = vv.as_f64() / c2;
                        *w = *w - T::of(lr * mhat / (vhat.sqrt() + eps));
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_learning_rate_leaves_weights() {
        let mut p = Params::<f64>::new();
        p.init_const("w", &[3], 0.25);
        let before = p.clone();
        let mut g = ParamGrads::new();
        g.grads.insert("w".into(), Tensor::full(&[3], 5.0));
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.step(&mut p, &g, 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut p = Params::<f64>::new();
        p.init_const("w", &[1], 1.0);
        let mut g = ParamGrads::new();
        g.grads.insert("w".into(), Tensor::scalar(2.0));
        let mut opt = Optimizer::new(OptimizerConfig::default());
        opt.step(&mut p, &g, 0.1);
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-6);
    }
}
