use super::tensor::Tensor;
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Decoupled decay: each step subtracts `lr · weight_decay · param`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// Bias-corrected Adam with decoupled weight decay.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<S>>,
    second: Vec<Vec<S>>,
}

impl<S: Scalar> AdamState<S> {
    /// One pair of moment buffers per parameter tensor, sized by `lens`.
    pub fn new(config: AdamConfig, lens: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
            second: lens.iter().map(|&n| vec![S::zero(); n]).collect(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<S>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<S>] {
        &self.second
    }

    /// Applies one update at learning rate `lr` (overriding `config.lr`).
    pub fn update(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>], lr: f64) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.first) {
            if p.shape() != g.shape() || p.len() != m.len() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (S::lit(c.beta1), S::lit(c.beta2));
        let (one_b1, one_b2) = (S::lit(1.0 - c.beta1), S::lit(1.0 - c.beta2));
        let (bc1, bc2) = (S::lit(bc1), S::lit(bc2));
        let (lr_s, eps, wd) = (S::lit(lr), S::lit(c.epsilon), S::lit(c.weight_decay));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - lr_s * (mhat / (vhat.sqrt() + eps) + wd * *pv);
            }
        }
        Ok(())
    }
}
