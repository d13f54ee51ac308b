//! Adam with decoupled weight decay over the flattened parameter vector.

use serde::{Deserialize, Serialize};

use crate::encoders::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, n_params: usize) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            t: self.t,
        }
    }

    pub fn from_hyper(hyper: &serde_json::Value, m: Vec<f64>, v: Vec<f64>) -> serde_json::Result<Self> {
        let h: AdamHyper = serde_json::from_value(hyper.clone())?;
        Ok(AdamW {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
            weight_decay: h.weight_decay,
            t: h.t,
            m,
            v,
        })
    }

    /// `p ← p − lr·(m̂/(√v̂ + ε) + wd·p)`. A zero gradient with zero decay
    /// leaves every parameter bit-identical.
    pub fn update<P: Params>(&mut self, params: &mut P, grads: &P) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let g = grads.flatten();
        let mut p = params.flatten();
        assert_eq!(g.len(), self.m.len(), "optimizer sized for a different model");
        for i in 0..p.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let step = (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + self.eps) + self.weight_decay * p[i];
            p[i] -= self.lr * step;
        }
        params.assign_flat(&p);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::layers::Linear;
    use ndarray::{arr1, arr2};

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut p = Linear {
            w: arr2(&[[1.0, -2.0]]),
            b: arr1(&[0.5, 0.0]),
        };
        let g = Linear {
            w: arr2(&[[3.0, -0.25]]),
            b: arr1(&[0.0, 1e-3]),
        };
        let mut opt = AdamW::new(0.1, 0.0, 4);
        opt.update(&mut p, &g);
        // bias-corrected first step is lr·sign(g) up to ε
        assert!((p.w[[0, 0]] - 0.9).abs() < 1e-7);
        assert!((p.w[[0, 1]] + 1.9).abs() < 1e-7);
        assert_eq!(p.b[0], 0.5);
        assert!((p.b[1] + 0.1).abs() < 1e-4);
    }

    #[test]
    fn decoupled_decay_without_gradient() {
        let mut p = Linear {
            w: arr2(&[[2.0]]),
            b: arr1(&[0.0]),
        };
        let g = p.zeros_like();
        let mut opt = AdamW::new(0.1, 0.5, 2);
        opt.update(&mut p, &g);
        assert!((p.w[[0, 0]] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }
}
