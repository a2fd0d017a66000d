//! Adaptive-moment optimizer over a [`ParamSet`] and gradient buffers.

use serde::{Deserialize, Serialize};

use crate::model::{BoundParams, ParamSet};
use crate::tensor::Gradients;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Linear warmup length in steps; 0 disables warmup.
    pub warmup_steps: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Descends along `grads` (one buffer per parameter).
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>], lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let warm = if c.warmup_steps > 0 {
            (self.t as f64 / c.warmup_steps as f64).min(1.0)
        } else {
            1.0
        };
        let lr = lr * warm;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if g.iter().all(|&x| x == 0.0) && self.m[i].iter().all(|&x| x == 0.0) {
                continue;
            }
            let p = params.get_mut(i).values_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for k in 0..g.len() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}

/// Zeroed gradient buffers shaped like `params`.
pub fn zero_grads(params: &ParamSet) -> Vec<Vec<f64>> {
    params.iter().map(|(_, t)| vec![0.0; t.len()]).collect()
}

/// Adds the tape gradients of every bound parameter into `acc`.
pub fn accumulate(grads: &Gradients, bound: &BoundParams, acc: &mut [Vec<f64>]) {
    for (buf, &var) in acc.iter_mut().zip(bound.vars()) {
        if let Some(g) = grads.get(var) {
            for (a, x) in buf.iter_mut().zip(g) {
                *a += x;
            }
        }
    }
}

pub fn all_finite(grads: &[Vec<f64>]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, PolicySnapshot, VocabSpec};

    #[test]
    fn first_step_moves_by_lr() {
        let cfg = ModelConfig {
            layers: 1,
            heads: 1,
            model_dim: 4,
            mlp_dim: 4,
            bins: 2,
            chunk_len: 1,
            action_dim: 1,
            ..ModelConfig::default()
        };
        let mut snap = PolicySnapshot::init(cfg, VocabSpec::new(vec!["a".into()], 2).unwrap()).unwrap();
        let before = snap.params().get(0).values().to_vec();
        let mut grads = zero_grads(snap.params());
        grads[0].iter_mut().for_each(|g| *g = 2.0);
        let mut opt = Adam::new(snap.params(), AdamConfig::default());
        opt.step(snap.params_mut(), &grads, 0.1);
        for (b, a) in before.iter().zip(snap.params().get(0).values()) {
            assert!((b - a - 0.1).abs() < 1e-6);
        }
        assert_eq!(snap.params().get(1).values().len(), snap.params().get(1).len());
    }
}
