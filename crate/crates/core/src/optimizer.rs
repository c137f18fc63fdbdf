//! Adam with decoupled weight decay and a linear warmup/decay schedule.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tape::Gradients;

/// Linear warmup to `peak`, then linear decay to zero at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, t: usize) -> f64 {
        let (t, w, big_t) = (t as f64, self.warmup_steps as f64, self.total_steps as f64);
        if t <= w {
            self.peak * t / w
        } else {
            self.peak * (big_t - t).max(0.0) / (big_t - w)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: IndexMap<String, Moments>,
}

/// Weight decay applies to matrices only; vectors are biases, layer-norm
/// parameters or the output bias.
pub fn decays(shape: &[usize]) -> bool {
    shape.len() >= 2
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One bias-corrected update with learning rate `lr`. Parameters without
    /// a gradient entry are left untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Gradients, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient for {name}")));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::dim(
                    "adam",
                    format!("{name}: gradient shape differs"),
                ));
            }
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let n = p.numel();
            let mo = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| Moments {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            let decay = if decays(p.shape()) {
                lr * weight_decay
            } else {
                0.0
            };
            let (pd, gd) = (p.data_mut(), g.data());
            for k in 0..n {
                mo.m[k] = beta1 * mo.m[k] + (1.0 - beta1) * gd[k];
                mo.v[k] = beta2 * mo.v[k] + (1.0 - beta2) * gd[k] * gd[k];
                let m_hat = mo.m[k] / c1;
                let v_hat = mo.v[k] / c2;
                pd[k] -= decay * pd[k];
                pd[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use crate::tensor::Tensor;
    use std::sync::Arc;

    fn sched() -> LrSchedule {
        LrSchedule {
            peak: 1e-3,
            warmup_steps: 100,
            total_steps: 1000,
        }
    }

    #[test]
    fn schedule_shape() {
        let s = sched();
        assert_eq!(s.lr(100), 1e-3);
        assert_eq!(s.lr(50), 5e-4);
        assert_eq!(s.lr(1000), 0.0);
        assert_eq!(s.lr(0), 0.0);
        assert!((s.lr(550) - 5e-4).abs() < 1e-18);
    }

    fn quadratic_grad(params: &Params) -> Gradients {
        let mut tape = Tape::new();
        let x = tape
            .param("x", Arc::new(params.get("x").unwrap().clone()))
            .unwrap();
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq);
        tape.backward(loss).unwrap()
    }

    #[test]
    fn quadratic_bowl_reference() {
        let mut params = Params::new();
        params.insert("x", Tensor::vector(vec![1.0]));
        let mut adam = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        for _ in 0..100 {
            let g = quadratic_grad(&params);
            adam.step(&mut params, &g, 0.1).unwrap();
        }
        let x = params.get("x").unwrap().data()[0];
        assert!(x.abs() < 1e-2);
        assert!((x - 0.0003890073784584367).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = Params::new();
        params.insert(
            "w",
            Tensor::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap(),
        );
        let before = params.clone();
        let mut tape = Tape::new();
        let w = tape
            .param("w", Arc::new(params.get("w").unwrap().clone()))
            .unwrap();
        let z = tape.scale(w, 0.0);
        let loss = tape.sum(z);
        let g = tape.backward(loss).unwrap();
        let mut adam = AdamState::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        adam.step(&mut params, &g, 0.1).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut params = Params::new();
        params.insert("b", Tensor::vector(vec![0.0, 0.0]));
        let mut tape = Tape::new();
        let b = tape
            .param("b", Arc::new(params.get("b").unwrap().clone()))
            .unwrap();
        let c = tape.constant(Tensor::vector(vec![3.0, -0.5]));
        let prod = tape.mul(b, c).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut params, &g, 0.01).unwrap();
        let d = params.get("b").unwrap().data();
        assert!((d[0] + 0.01 * 3.0 / (3.0 + 1e-6)).abs() < 1e-15);
        assert!((d[1] - 0.01 * 0.5 / (0.5 + 1e-6)).abs() < 1e-15);
    }

    #[test]
    fn decay_skips_vectors() {
        assert!(decays(&[3, 4]));
        assert!(!decays(&[4]));
    }

    #[test]
    fn nan_gradient_aborts_without_update() {
        let mut params = Params::new();
        params.insert("x", Tensor::vector(vec![1.0]));
        let mut tape = Tape::new();
        let x = tape
            .param("x", Arc::new(Tensor::vector(vec![1.0])))
            .unwrap();
        let y = tape.scale(x, f64::NAN);
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        let mut adam = AdamState::new(AdamConfig::default());
        assert!(matches!(
            adam.step(&mut params, &g, 0.1),
            Err(Error::Numeric(_))
        ));
        assert_eq!(adam.step, 0);
        assert_eq!(params.get("x").unwrap().data(), &[1.0]);
    }
}
