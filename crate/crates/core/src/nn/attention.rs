//! Multi-head scaled dot-product self-attention with key masking.

use super::instrument::{self, OpKind};
use super::layers::{apply_mask, softmax_in_place, Dropout, Linear};
use super::tensor::{dot, Tensor};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<S> {
    pub query: Linear<S>,
    pub key: Linear<S>,
    pub value: Linear<S>,
    pub output: Linear<S>,
    pub heads: usize,
}

impl<S: Scalar> AttentionParams<S> {
    pub fn zeros(dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!(
                "hidden size {dim} is not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            query: Linear::zeros(dim, dim),
            key: Linear::zeros(dim, dim),
            value: Linear::zeros(dim, dim),
            output: Linear::zeros(dim, dim),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.query.input_dim()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionCache<S> {
    x: Tensor<S>,
    q: Tensor<S>,
    k: Tensor<S>,
    v: Tensor<S>,
    /// Per head, `M × M` softmax weights before dropout.
    probs: Vec<Tensor<S>>,
    /// Per head, scaled keep-mask applied to `probs`.
    keep: Vec<Option<Vec<S>>>,
    ctx: Tensor<S>,
}

impl<S: Scalar> AttentionCache<S> {
    /// Softmax weights of head `h` (rows: queries, columns: keys).
    pub fn weights(&self, head: usize) -> &Tensor<S> {
        &self.probs[head]
    }
}

/// Self-attention over the `M` rows of `x`. Keys where `mask` is false get zero weight.
pub fn attention_forward<S: Scalar>(
    x: &Tensor<S>,
    mask: &[bool],
    params: &AttentionParams<S>,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Tensor<S>, AttentionCache<S>)> {
    let (m, d) = (x.rows(), x.cols());
    if d != params.dim() {
        return Err(Error::ShapeMismatch(format!(
            "attention expects width {}, got {d}",
            params.dim()
        )));
    }
    if mask.len() != m {
        return Err(Error::ShapeMismatch(format!("mask length {} for {m} rows", mask.len())));
    }
    if !mask.iter().any(|&b| b) {
        return Err(Error::EmptyAttentionWindow);
    }
    instrument::record_attention_call();

    let q = params.query.forward(x);
    let k = params.key.forward(x);
    let v = params.value.forward(x);
    let (heads, hd) = (params.heads, params.head_dim());
    let scale = S::one() / S::lit(hd as f64).sqrt();

    let mut ctx = Tensor::zeros(&[m, d]);
    let mut probs = Vec::with_capacity(heads);
    let mut keep = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut p = Tensor::zeros(&[m, m]);
        for i in 0..m {
            let qi = &q.row(i)[cols.clone()];
            let row = p.row_mut(i);
            let mut logits: Vec<S> = Vec::with_capacity(m);
            for j in (0..m).filter(|&j| mask[j]) {
                logits.push(dot(qi, &k.row(j)[cols.clone()]) * scale);
            }
            softmax_in_place(&mut logits);
            let mut it = logits.into_iter();
            for (j, slot) in row.iter_mut().enumerate() {
                *slot = if mask[j] {
                    it.next().expect("one weight per key")
                } else {
                    S::zero()
                };
            }
        }
        let mask_h = dropout.as_deref_mut().and_then(|dr| dr.mask::<S>(m * m));
        let mut pd = p.clone();
        apply_mask(pd.data_mut(), mask_h.as_deref());
        for i in 0..m {
            let prow = pd.row(i).to_vec();
            let out = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &w) in prow.iter().enumerate() {
                if w == S::zero() {
                    continue;
                }
                for (o, &vv) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o = *o + w * vv;
                }
            }
        }
        probs.push(p);
        keep.push(mask_h);
    }
    instrument::record(OpKind::Scores, (2 * m * m * d) as u64);

    let y = params.output.forward(&ctx);
    Ok((
        y,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            keep,
            ctx,
        },
    ))
}

/// Accumulates parameter gradients into `grad` and returns `dL/dx`.
pub fn attention_backward<S: Scalar>(
    params: &AttentionParams<S>,
    cache: &AttentionCache<S>,
    dy: &Tensor<S>,
    grad: &mut AttentionParams<S>,
) -> Tensor<S> {
    let (m, d) = (cache.x.rows(), cache.x.cols());
    let (heads, hd) = (params.heads, params.head_dim());
    let scale = S::one() / S::lit(hd as f64).sqrt();
    let dctx = params.output.backward(&cache.ctx, dy, &mut grad.output);

    let mut dq = Tensor::zeros(&[m, d]);
    let mut dk = Tensor::zeros(&[m, d]);
    let mut dv = Tensor::zeros(&[m, d]);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let p = &cache.probs[h];
        let keep = cache.keep[h].as_deref();
        for i in 0..m {
            let dci = dctx.row(i)[cols.clone()].to_vec();
            // dP'_ij = dctx_i · v_j ; dv_j += P'_ij dctx_i
            let mut dp = vec![S::zero(); m];
            for j in 0..m {
                let pij = p.row(i)[j];
                if pij == S::zero() {
                    continue;
                }
                let kij = keep.map_or(S::one(), |kp| kp[i * m + j]);
                dp[j] = dot(&dci, &cache.v.row(j)[cols.clone()]) * kij;
                let w = pij * kij;
                if w != S::zero() {
                    for (o, &g) in dv.row_mut(j)[cols.clone()].iter_mut().zip(&dci) {
                        *o = *o + w * g;
                    }
                }
            }
            let inner = (0..m).map(|j| p.row(i)[j] * dp[j]).sum::<S>();
            for j in 0..m {
                let pij = p.row(i)[j];
                if pij == S::zero() {
                    continue;
                }
                let ds = pij * (dp[j] - inner) * scale;
                let kj = cache.k.row(j)[cols.clone()].to_vec();
                for (o, &kv) in dq.row_mut(i)[cols.clone()].iter_mut().zip(&kj) {
                    *o = *o + ds * kv;
                }
                let qi = cache.q.row(i)[cols.clone()].to_vec();
                for (o, &qv) in dk.row_mut(j)[cols.clone()].iter_mut().zip(&qi) {
                    *o = *o + ds * qv;
                }
            }
        }
    }
    let mut dx = params.query.backward(&cache.x, &dq, &mut grad.query);
    dx.add_assign(&params.key.backward(&cache.x, &dk, &mut grad.key));
    dx.add_assign(&params.value.backward(&cache.x, &dv, &mut grad.value));
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn random_params(d: usize, heads: usize, rng: &mut ChaCha8Rng, std: f64) -> AttentionParams<f64> {
        let mut p = AttentionParams::zeros(d, heads).unwrap();
        let n = Normal::new(0.0, std).unwrap();
        for lin in [&mut p.query, &mut p.key, &mut p.value, &mut p.output] {
            lin.weight.data_mut().iter_mut().for_each(|w| *w = n.sample(rng));
            lin.bias.data_mut().iter_mut().for_each(|w| *w = n.sample(rng));
        }
        p
    }

    fn random_tensor(m: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = Normal::new(0.0, 1.0).unwrap();
        Tensor::new(vec![m, d], (0..m * d).map(|_| n.sample(rng)).collect()).unwrap()
    }

    /// Straightforward per-head, per-query loop written independently of the kernel above.
    fn naive_attention(x: &Tensor<f64>, mask: &[bool], p: &AttentionParams<f64>) -> Vec<Vec<f64>> {
        let (m, d) = (x.rows(), x.cols());
        let hd = d / p.heads;
        let proj = |lin: &Linear<f64>, row: &[f64]| -> Vec<f64> {
            (0..d)
                .map(|o| lin.bias.data()[o] + (0..d).map(|i| row[i] * lin.weight.data()[i * d + o]).sum::<f64>())
                .collect()
        };
        let qs: Vec<Vec<f64>> = (0..m).map(|i| proj(&p.query, x.row(i))).collect();
        let ks: Vec<Vec<f64>> = (0..m).map(|i| proj(&p.key, x.row(i))).collect();
        let vs: Vec<Vec<f64>> = (0..m).map(|i| proj(&p.value, x.row(i))).collect();
        let mut out = Vec::new();
        for i in 0..m {
            let mut ctx = vec![0.0; d];
            for h in 0..p.heads {
                let mut w = vec![0.0; m];
                let mut z = 0.0;
                for j in 0..m {
                    if !mask[j] {
                        continue;
                    }
                    let s: f64 =
                        (0..hd).map(|c| qs[i][h * hd + c] * ks[j][h * hd + c]).sum::<f64>() / (hd as f64).sqrt();
                    w[j] = s.exp();
                    z += w[j];
                }
                for j in 0..m {
                    for c in 0..hd {
                        ctx[h * hd + c] += w[j] / z * vs[j][h * hd + c];
                    }
                }
            }
            out.push(proj(&p.output, &ctx));
        }
        out
    }

    #[test]
    fn matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = random_params(8, 2, &mut rng, 0.5);
        let x = random_tensor(4, 8, &mut rng);
        for mask in [[true; 4], [true, false, true, false]] {
            let (y, _) = attention_forward(&x, &mask, &p, None).unwrap();
            let oracle = naive_attention(&x, &mask, &p);
            for i in 0..4 {
                for (a, b) in y.row(i).iter().zip(&oracle[i]) {
                    assert!((a - b).abs() <= 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn single_key_is_value_then_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = random_params(6, 3, &mut rng, 0.5);
        let x = random_tensor(1, 6, &mut rng);
        let (y, cache) = attention_forward(&x, &[true], &p, None).unwrap();
        for h in 0..3 {
            assert_eq!(cache.weights(h).data(), &[1.0]);
        }
        let expected = p.output.forward(&p.value.forward(&x));
        for (a, b) in y.data().iter().zip(expected.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_rows_give_identical_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(8, 4, &mut rng, 0.5);
        let row = random_tensor(1, 8, &mut rng);
        let x = Tensor::from_rows(&vec![row.data().to_vec(); 5]).unwrap();
        let (y, _) = attention_forward(&x, &[true; 5], &p, None).unwrap();
        for i in 1..5 {
            assert_eq!(y.row(i), y.row(0));
        }
    }

    #[test]
    fn masked_keys_get_zero_weight_and_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(8, 2, &mut rng, 0.5);
        let x = random_tensor(6, 8, &mut rng);
        let mask = [true, false, true, true, false, true];
        let (_, cache) = attention_forward(&x, &mask, &p, None).unwrap();
        for h in 0..2 {
            let w = cache.weights(h);
            for i in 0..6 {
                let s: f64 = w.row(i).iter().sum();
                assert!((s - 1.0).abs() <= 1e-5);
                assert_eq!(w.row(i)[1], 0.0);
                assert_eq!(w.row(i)[4], 0.0);
            }
        }
    }

    #[test]
    fn masked_content_does_not_leak() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_params(8, 2, &mut rng, 0.5);
        let x = random_tensor(5, 8, &mut rng);
        let mask = [true, true, false, true, false];
        let (y1, _) = attention_forward(&x, &mask, &p, None).unwrap();
        let mut x2 = x.clone();
        let other = random_tensor(2, 8, &mut rng);
        x2.row_mut(2).copy_from_slice(other.row(0));
        x2.row_mut(4).copy_from_slice(other.row(1));
        let (y2, _) = attention_forward(&x2, &mask, &p, None).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(y1.row(i), y2.row(i));
        }
    }

    #[test]
    fn all_masked_is_an_error() {
        let p = AttentionParams::<f32>::zeros(4, 2).unwrap();
        let x = Tensor::zeros(&[2, 4]);
        let err = attention_forward(&x, &[false, false], &p, None).unwrap_err();
        assert_eq!(err.kind(), "empty-attention-window");
        assert!(AttentionParams::<f32>::zeros(6, 4).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (m, d, heads) = (4, 8, 2);
            let base = random_params(d, heads, &mut rng, 0.4);
            let x = random_tensor(m, d, &mut rng);
            let r = random_tensor(m, d, &mut rng);
            let mask = [true, true, false, true];

            let flatten = |p: &AttentionParams<f64>, x: &Tensor<f64>| -> Vec<f64> {
                let mut v = x.data().to_vec();
                for lin in [&p.query, &p.key, &p.value, &p.output] {
                    v.extend_from_slice(lin.weight.data());
                    v.extend_from_slice(lin.bias.data());
                }
                v
            };
            let theta0 = flatten(&base, &x);
            let rep = grad_check(
                |t: &[f64]| {
                    let mut p = base.clone();
                    let xt = Tensor::new(vec![m, d], t[..m * d].to_vec()).unwrap();
                    let mut off = m * d;
                    for lin in [&mut p.query, &mut p.key, &mut p.value, &mut p.output] {
                        let nw = lin.weight.len();
                        lin.weight.data_mut().copy_from_slice(&t[off..off + nw]);
                        off += nw;
                        lin.bias.data_mut().copy_from_slice(&t[off..off + d]);
                        off += d;
                    }
                    let (y, cache) = attention_forward(&xt, &mask, &p, None).unwrap();
                    let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
                    let mut g = AttentionParams::zeros(d, heads).unwrap();
                    let dx = attention_backward(&p, &cache, &r, &mut g);
                    (loss, flatten(&g, &dx))
                },
                &theta0,
                1e-3,
                80,
                seed,
            );
            assert!(rep.max_rel_error <= 1e-4, "seed {seed}: {rep:?}");
        }
    }

    #[test]
    fn eval_mode_is_bit_reproducible() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(8, 2, &mut rng, 0.5);
        let x = random_tensor(3, 8, &mut rng);
        let (a, _) = attention_forward(&x, &[true; 3], &p, None).unwrap();
        let (b, _) = attention_forward(&x, &[true; 3], &p, None).unwrap();
        assert_eq!(a, b);
    }
}
