use std::collections::BTreeMap;

use crate::error::{arg_err, Result};
use crate::nn::params::ParameterStore;
use crate::nn::tape::Gradients;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    /// Per-group learning rates keyed by segment group (`encoder`, ...).
    pub group_lr: BTreeMap<String, f64>,
    pub betas: (f64, f64),
    pub eps: f64,
    /// Global gradient-norm clip applied before the update.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            group_lr: BTreeMap::new(),
            betas: (0.9, 0.999),
            eps: 1e-5,
            max_grad_norm: None,
        }
    }
}

/// Moment estimates for every parameter scalar.
#[derive(Debug, Clone, Default)]
pub struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    /// Norm of the gradient actually applied.
    pub applied_norm: f64,
}

impl Adam {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.segments().iter().map(|s| vec![0.0; s.data.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Increments `store.step_count`.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &Gradients, cfg: &AdamConfig) -> Result<StepStats> {
        if grads.grads.len() != store.len()
            || grads.grads.iter().zip(store.segments()).any(|(g, s)| g.len() != s.data.len())
        {
            return arg_err("gradient map does not match parameter store layout");
        }
        if self.m.len() != store.len() {
            *self = Adam::new(store);
        }
        let grad_norm = grads.global_norm();
        let clip = match cfg.max_grad_norm {
            Some(max) if grad_norm > max => max / grad_norm,
            _ => 1.0,
        };
        store.step_count += 1;
        let t = store.step_count as i32;
        let (b1, b2) = cfg.betas;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (k, seg) in store.segments_mut().iter_mut().enumerate() {
            let lr = cfg.group_lr.get(seg.group()).copied().unwrap_or(cfg.lr);
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, p) in seg.data.iter_mut().enumerate() {
                let g = grads.grads[k][i] * clip;
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *p -= lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(StepStats {
            grad_norm,
            applied_norm: grad_norm * clip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.add("encoder.w", vec![2], vec![1.0, -1.0]).unwrap();
        s.add("scoring.w", vec![1], vec![0.5]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(&s);
        let zeros = Gradients::zeros_like(&s);
        adam.step(&mut s, &zeros, &AdamConfig::default()).unwrap();
        assert_eq!(s.segments(), before.segments());
        assert_eq!(s.step_count, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = ParameterStore::new();
        s.add("p", vec![1], vec![2.0]).unwrap();
        let mut adam = Adam::new(&s);
        let cfg = AdamConfig {
            lr: 0.01,
            eps: 1e-12,
            ..AdamConfig::default()
        };
        let g = Gradients { grads: vec![vec![3.7]] };
        adam.step(&mut s, &g, &cfg).unwrap();
        assert!((s.segments()[0].data[0] - (2.0 - 0.01)).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        let cfg = AdamConfig {
            max_grad_norm: Some(0.5),
            ..AdamConfig::default()
        };
        // norm sqrt(60^2 + 80^2) = 100
        let g = Gradients {
            grads: vec![vec![60.0, 0.0], vec![80.0]],
        };
        let st = adam.step(&mut s, &g, &cfg).unwrap();
        assert!((st.grad_norm - 100.0).abs() < 1e-12);
        assert!((st.applied_norm - 0.5).abs() < 1e-6);
    }

    #[test]
    fn group_learning_rates_and_alignment() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        let mut cfg = AdamConfig::default();
        cfg.group_lr.insert("scoring".into(), 0.0);
        let g = Gradients {
            grads: vec![vec![1.0, 1.0], vec![1.0]],
        };
        adam.step(&mut s, &g, &cfg).unwrap();
        assert_eq!(s.segments()[1].data[0], 0.5);
        assert!(s.segments()[0].data[0] < 1.0);
        let bad = Gradients { grads: vec![vec![1.0]] };
        assert!(adam.step(&mut s, &bad, &cfg).is_err());
    }
}
