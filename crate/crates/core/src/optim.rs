//! AdamW with decoupled weight decay.

use crate::model::{ParamLayout, Real};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWParams {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct AdamW<F> {
    hp: AdamWParams,
    m: Vec<F>,
    v: Vec<F>,
    /// 1 where weight decay applies (matrices and embeddings), else 0.
    decay_mask: Vec<bool>,
    step: u64,
}

impl<F: Real> AdamW<F> {
    pub fn new(layout: &ParamLayout, hp: AdamWParams) -> Self {
        let mut decay_mask = vec![false; layout.total()];
        for e in layout.entries() {
            if e.kind.decays() {
                decay_mask[e.offset..e.offset + e.len].fill(true);
            }
        }
        Self {
            hp,
            m: vec![F::zero(); layout.total()],
            v: vec![F::zero(); layout.total()],
            decay_mask,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [F], grads: &[F], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.hp.beta1;
        let b2 = self.hp.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (fb1, fb2) = (F::from_f64(b1).unwrap(), F::from_f64(b2).unwrap());
        let (one_b1, one_b2) = (F::from_f64(1.0 - b1).unwrap(), F::from_f64(1.0 - b2).unwrap());
        let step_size = F::from_f64(lr / bc1).unwrap();
        let inv_sqrt_bc2 = F::from_f64(1.0 / bc2.sqrt()).unwrap();
        let eps = F::from_f64(self.hp.eps).unwrap();
        let shrink = F::from_f64(1.0 - lr * self.hp.weight_decay).unwrap();
        for i in 0..params.len() {
            let g = grads[i];
            if self.decay_mask[i] {
                params[i] = params[i] * shrink;
            }
            self.m[i] = fb1 * self.m[i] + one_b1 * g;
            self.v[i] = fb2 * self.v[i] + one_b2 * g * g;
            let denom = self.v[i].sqrt() * inv_sqrt_bc2 + eps;
            params[i] = params[i] - step_size * self.m[i] / denom;
        }
    }
}
