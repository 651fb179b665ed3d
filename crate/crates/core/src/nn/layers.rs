use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::Scalar;
use crate::error::{Error, Result};

/// Layer-norm epsilon (BERT's value).
pub const LN_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Affine map `y = x·W + b`, `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Linear<S> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[input, output]),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor<S>) -> Tensor<S> {
        let mut y = x.matmul(&self.weight);
        let b = self.bias.data();
        for r in 0..y.rows() {
            for (v, &bv) in y.row_mut(r).iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: &Tensor<S>, dy: &Tensor<S>, grad: &mut Linear<S>) -> Tensor<S> {
        grad.weight.add_assign(&x.t_matmul(dy));
        let gb = grad.bias.data_mut();
        for r in 0..dy.rows() {
            for (g, &d) in gb.iter_mut().zip(dy.row(r)) {
                *g = *g + d;
            }
        }
        dy.matmul_t(&self.weight)
    }
}

/// Standalone layer normalization of one vector (variance with `1/d`).
pub fn layer_norm<S: Scalar>(x: &[S], gain: &[S], bias: &[S], eps: S) -> Vec<S> {
    let d = S::lit(x.len() as f64);
    let mean = x.iter().copied().sum::<S>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / d;
    let inv = S::one() / (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) * inv * g + b)
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<S> {
    pub gain: Tensor<S>,
    pub bias: Tensor<S>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<S> {
    xhat: Tensor<S>,
    inv_std: Vec<S>,
}

impl<S: Scalar> LayerNorm<S> {
    pub fn identity(dim: usize) -> Self {
        Self {
            gain: Tensor::full(&[dim], S::one()),
            bias: Tensor::zeros(&[dim]),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            gain: Tensor::zeros(&[dim]),
            bias: Tensor::zeros(&[dim]),
        }
    }

    /// Row-wise normalization of an `M × d` tensor.
    pub fn forward(&self, x: &Tensor<S>) -> (Tensor<S>, LayerNormCache<S>) {
        let (m, d) = (x.rows(), x.cols());
        let dn = S::lit(d as f64);
        let eps = S::lit(LN_EPS);
        let mut xhat = Tensor::zeros(&[m, d]);
        let mut y = Tensor::zeros(&[m, d]);
        let mut inv_std = Vec::with_capacity(m);
        for r in 0..m {
            let row = x.row(r);
            let mean = row.iter().copied().sum::<S>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / dn;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            let xh = xhat.row_mut(r);
            for (h, &v) in xh.iter_mut().zip(row) {
                *h = (v - mean) * inv;
            }
            let xh = xhat.row(r).to_vec();
            for ((o, h), (&g, &b)) in y
                .row_mut(r)
                .iter_mut()
                .zip(xh)
                .zip(self.gain.data().iter().zip(self.bias.data()))
            {
                *o = h * g + b;
            }
        }
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache<S>, dy: &Tensor<S>, grad: &mut LayerNorm<S>) -> Tensor<S> {
        let (m, d) = (dy.rows(), dy.cols());
        let dn = S::lit(d as f64);
        let mut dx = Tensor::zeros(&[m, d]);
        for r in 0..m {
            let xh = cache.xhat.row(r);
            let dyr = dy.row(r);
            {
                let gg = grad.gain.data_mut();
                for i in 0..d {
                    gg[i] = gg[i] + dyr[i] * xh[i];
                }
            }
            {
                let gb = grad.bias.data_mut();
                for i in 0..d {
                    gb[i] = gb[i] + dyr[i];
                }
            }
            let dxhat: Vec<S> = dyr.iter().zip(self.gain.data()).map(|(&a, &g)| a * g).collect();
            let sum_dxhat = dxhat.iter().copied().sum::<S>();
            let sum_dxhat_xhat = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum::<S>();
            let scale = cache.inv_std[r] / dn;
            for (i, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = scale * (dn * dxhat[i] - sum_dxhat - xh[i] * sum_dxhat_xhat);
            }
        }
        dx
    }
}

/// Tanh-approximation GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

pub fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::lit(0.5);
    let u = S::lit(GELU_C) * (x + S::lit(GELU_A) * x * x * x);
    let t = u.tanh();
    let du = S::lit(GELU_C) * (S::one() + S::lit(3.0 * GELU_A) * x * x);
    half * (S::one() + t) + half * x * (S::one() - t * t) * du
}

/// Per-column maximum over unmasked rows, with the winning row index per column.
/// Ties resolve to the lowest row index.
pub fn masked_max_pool<S: Scalar>(x: &Tensor<S>, mask: &[bool]) -> Result<(Vec<S>, Vec<usize>)> {
    if mask.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "pool mask has {} entries for {} rows",
            mask.len(),
            x.rows()
        )));
    }
    let first = mask.iter().position(|&m| m).ok_or(Error::EmptyPool)?;
    let mut best = x.row(first).to_vec();
    let mut arg = vec![first; x.cols()];
    for r in (first + 1)..x.rows() {
        if !mask[r] {
            continue;
        }
        for (c, &v) in x.row(r).iter().enumerate() {
            if v > best[c] {
                best[c] = v;
                arg[c] = r;
            }
        }
    }
    Ok((best, arg))
}

/// Routes `dy` to the argmax rows recorded by [`masked_max_pool`].
pub fn masked_max_pool_backward<S: Scalar>(argmax: &[usize], dy: &[S], rows: usize) -> Tensor<S> {
    let cols = dy.len();
    let mut dx = Tensor::zeros(&[rows, cols]);
    let data = dx.data_mut();
    for (c, (&r, &g)) in argmax.iter().zip(dy).enumerate() {
        data[r * cols + c] = data[r * cols + c] + g;
    }
    dx
}

/// In-place numerically stable softmax.
pub fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Negative log-likelihood of `label` under `softmax(logits)`, and its gradient
/// `softmax − one_hot(label)`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &[S], label: usize) -> Result<(S, Vec<S>)> {
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<S>().ln() + max;
    let loss = lse - logits[label];
    let mut grad: Vec<S> = logits.iter().map(|&z| (z - lse).exp()).collect();
    grad[label] = grad[label] - S::one();
    Ok((loss, grad))
}

/// Inverted dropout driven by its own seeded generator.
#[derive(Debug, Clone)]
pub struct Dropout {
    p: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(p: f64, seed: u64) -> Self {
        assert!((0.0..1.0).contains(&p), "dropout probability {p} outside [0, 1)");
        Self {
            p,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    /// Keep-mask scaled by `1/(1−p)`; `None` when `p == 0`.
    pub fn mask<S: Scalar>(&mut self, n: usize) -> Option<Vec<S>> {
        if self.p == 0.0 {
            return None;
        }
        let keep = S::lit(1.0 / (1.0 - self.p));
        Some(
            (0..n)
                .map(|_| {
                    if self.rng.gen::<f64>() < self.p {
                        S::zero()
                    } else {
                        keep
                    }
                })
                .collect(),
        )
    }
}

pub(crate) fn apply_mask<S: Scalar>(values: &mut [S], mask: Option<&[S]>) {
    if let Some(m) = mask {
        for (v, &k) in values.iter_mut().zip(m) {
            *v = *v * k;
        }
    }
}
