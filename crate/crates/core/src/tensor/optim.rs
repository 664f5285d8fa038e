//! Adam and AdamW with bias-corrected moments.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{CcfError, Result};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdamVariant {
    /// Weight decay (if any) enters as an L2 term added to the gradient.
    Adam,
    /// Decoupled weight decay applied directly to the parameters.
    AdamW,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub variant: AdamVariant,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig {
            variant: AdamVariant::Adam,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        OptimizerConfig {
            variant: AdamVariant::AdamW,
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

pub struct OptimizerState {
    pub config: OptimizerConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(name, param)` that has a gradient in
    /// `grads`. Parameters without a gradient are left untouched.
    pub fn step<'a, I>(&mut self, params: I, grads: &BTreeMap<String, Tensor>) -> Result<()>
    where
        I: IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    {
        let mut pending = Vec::new();
        for (name, p) in params {
            if let Some(g) = grads.get(name) {
                if g.shape() != p.shape() {
                    return Err(CcfError::shape("optimizer_step", p.shape(), g.shape()));
                }
                pending.push((name, p, g));
            }
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p, g) in pending {
            let st = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            if st.m.len() != g.len() {
                return Err(CcfError::invalid("optimizer_step", format!("moment shape changed for {name}")));
            }
            let pd = p.data_mut();
            for i in 0..pd.len() {
                let mut gi = g.data()[i];
                if c.variant == AdamVariant::Adam && c.weight_decay != 0.0 {
                    gi += c.weight_decay * pd[i];
                }
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * gi;
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                if c.variant == AdamVariant::AdamW && c.weight_decay != 0.0 {
                    pd[i] *= 1.0 - c.lr * c.weight_decay;
                }
                pd[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
            if !p.is_finite() {
                return Err(CcfError::NonFinite { op: "optimizer_step" });
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, g: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), g)])
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-3));
        let mut p = Tensor::vector(vec![0.5, -0.2, 3.0]);
        opt.step([("w", &mut p)], &one("w", Tensor::full(&[3], 1.0))).unwrap();
        for (after, before) in p.data().iter().zip([0.5, -0.2, 3.0]) {
            assert!((after - before + 1e-3).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-2));
        let mut p = Tensor::vector(vec![0.5, -0.2]);
        let before = p.clone();
        for _ in 0..5 {
            opt.step([("w", &mut p)], &one("w", Tensor::zeros(&[2]))).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(opt.step_count(), 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut opt = OptimizerState::new(OptimizerConfig::adam(1e-2));
        let mut p = Tensor::vector(vec![0.5, -0.2]);
        assert!(opt.step([("w", &mut p)], &one("w", Tensor::zeros(&[3]))).is_err());
    }

    #[test]
    fn decoupled_decay_matches_closed_form() {
        // Gradients are fixed in advance, so both optimizers see the same
        // moment sequence and differ only by the decay applied to the params.
        let lr = 1e-2;
        let wd = 0.01;
        let p0 = vec![1.0, -2.0, 0.5];
        let gs: Vec<Tensor> = (0..10)
            .map(|t| Tensor::vector(vec![(t as f64 * 0.7).sin(), 0.3, -(t as f64) * 0.1]))
            .collect();
        let mut adam = OptimizerState::new(OptimizerConfig::adam(lr));
        let mut adamw = OptimizerState::new(OptimizerConfig::adamw(lr, wd));
        let mut q = Tensor::vector(p0.clone());
        let mut p = Tensor::vector(p0.clone());
        let mut updates = Vec::new();
        for g in &gs {
            let before = q.clone();
            adam.step([("w", &mut q)], &one("w", g.clone())).unwrap();
            adamw.step([("w", &mut p)], &one("w", g.clone())).unwrap();
            updates.push(
                before
                    .data()
                    .iter()
                    .zip(q.data())
                    .map(|(b, a)| (b - a) / lr)
                    .collect::<Vec<_>>(),
            );
        }
        let keep = 1.0 - lr * wd;
        for i in 0..3 {
            let mut expect = keep.powi(10) * p0[i];
            for (t, u) in updates.iter().enumerate() {
                expect -= lr * keep.powi(9 - t as i32) * u[i];
            }
            assert!((p.data()[i] - expect).abs() < 1e-12, "{} vs {expect}", p.data()[i]);
            assert!((p.data()[i] - q.data()[i]).abs() > 1e-6);
        }
    }
}
