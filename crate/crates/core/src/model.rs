//! The classifier network.
//!
//! ```text
//! T-bit projections ─► bipolar scale ─► input linear (T→d)
//!   ─► local projection attention: groups of K tokens, self-attention + residual
//!      + layer norm, max-pool per group (skipped when K = 1)
//!   ─► + positional rows ─► L post-LN encoder blocks (attention, GELU FFN)
//!   ─► max-pool over groups ─► linear head ─► logits
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::instrument::{self, Site};
use crate::nn::layers::apply_mask;
use crate::nn::{
    attention_backward, attention_forward, gelu, gelu_grad, masked_max_pool, masked_max_pool_backward, AttentionCache,
    AttentionParams, Dropout, LayerNorm, LayerNormCache, Linear, Scalar, Tensor,
};
use crate::projection::BitProjection;

pub const INIT_STD: f64 = 0.02;

/// Architecture dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `T`, projection bits per token.
    pub projection_bits: usize,
    /// `d`.
    pub hidden: usize,
    /// `L`, encoder blocks.
    pub layers: usize,
    /// `H`.
    pub heads: usize,
    /// `K`, tokens per LPA group.
    pub group_factor: usize,
    /// `N_max`, padded token length.
    pub max_len: usize,
    /// `C`.
    pub classes: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    /// T=420, d=768, L=2, H=12, ffn=d, dropout 0.1.
    pub fn paper_default(classes: usize, max_len: usize, group_factor: usize) -> Self {
        Self {
            projection_bits: 420,
            hidden: 768,
            layers: 2,
            heads: 12,
            group_factor,
            max_len,
            classes,
            ffn_dim: 768,
            dropout: 0.1,
        }
    }

    pub fn max_groups(&self) -> usize {
        self.max_len / self.group_factor
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.projection_bits == 0 || self.hidden == 0 || self.ffn_dim == 0 {
            return bad("projection bits, hidden size and ffn size must be positive".into());
        }
        if self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("at least one encoder layer is required".into());
        }
        if self.group_factor == 0 || self.max_len == 0 || !self.max_len.is_multiple_of(self.group_factor) {
            return bad(format!(
                "max length {} must be a positive multiple of the group factor {}",
                self.max_len, self.group_factor
            ));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpaParams<S> {
    pub attention: AttentionParams<S>,
    pub norm: LayerNorm<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<S> {
    pub attention: AttentionParams<S>,
    pub attention_norm: LayerNorm<S>,
    pub ffn_in: Linear<S>,
    pub ffn_out: Linear<S>,
    pub ffn_norm: LayerNorm<S>,
}

/// All learned weights. Nothing here depends on a vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub input: Linear<S>,
    /// Absent when `K == 1`.
    pub lpa: Option<LpaParams<S>>,
    /// `max_groups × d`.
    pub pos_embed: Tensor<S>,
    pub encoder: Vec<EncoderLayer<S>>,
    pub head: Linear<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput<S> {
    pub logits: Vec<S>,
    /// LPA output, `(N_max/K) × d`.
    pub group_representations: Option<Tensor<S>>,
}

fn attn_zeros<S: Scalar>(cfg: &ModelConfig) -> AttentionParams<S> {
    AttentionParams::zeros(cfg.hidden, cfg.heads).expect("validated head count")
}

impl<S: Scalar> ModelParams<S> {
    /// Every tensor zero, layer-norm gains included; the shape of a gradient buffer.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        Ok(Self {
            input: Linear::zeros(cfg.projection_bits, d),
            lpa: (cfg.group_factor > 1).then(|| LpaParams {
                attention: attn_zeros(cfg),
                norm: LayerNorm::zeros(d),
            }),
            pos_embed: Tensor::zeros(&[cfg.max_groups(), d]),
            encoder: (0..cfg.layers)
                .map(|_| EncoderLayer {
                    attention: attn_zeros(cfg),
                    attention_norm: LayerNorm::zeros(d),
                    ffn_in: Linear::zeros(d, cfg.ffn_dim),
                    ffn_out: Linear::zeros(cfg.ffn_dim, d),
                    ffn_norm: LayerNorm::zeros(d),
                })
                .collect(),
            head: Linear::zeros(d, cfg.classes),
        })
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) weights and positional rows,
    /// zero biases, unit layer-norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |t: &mut Tensor<S>| {
            for v in t.data_mut() {
                let x = loop {
                    let x: f64 = normal.sample(&mut rng);
                    if x.abs() <= 2.0 * INIT_STD {
                        break x;
                    }
                };
                *v = S::lit(x);
            }
        };
        let attn = |a: &mut AttentionParams<S>, fill: &mut dyn FnMut(&mut Tensor<S>)| {
            for lin in [&mut a.query, &mut a.key, &mut a.value, &mut a.output] {
                fill(&mut lin.weight);
            }
        };
        fill(&mut p.input.weight);
        if let Some(lpa) = &mut p.lpa {
            attn(&mut lpa.attention, &mut fill);
            lpa.norm.gain.fill(S::one());
        }
        fill(&mut p.pos_embed);
        for layer in &mut p.encoder {
            attn(&mut layer.attention, &mut fill);
            fill(&mut layer.ffn_in.weight);
            fill(&mut layer.ffn_out.weight);
            layer.attention_norm.gain.fill(S::one());
            layer.ffn_norm.gain.fill(S::one());
        }
        fill(&mut p.head.weight);
        Ok(p)
    }

    /// Tensors in the canonical order used by serialization and the optimizer.
    pub fn tensors(&self) -> Vec<&Tensor<S>> {
        fn attn<'a, S>(a: &'a AttentionParams<S>, out: &mut Vec<&'a Tensor<S>>) {
            for lin in [&a.query, &a.key, &a.value, &a.output] {
                out.push(&lin.weight);
                out.push(&lin.bias);
            }
        }
        let mut out = vec![&self.input.weight, &self.input.bias];
        if let Some(lpa) = &self.lpa {
            attn(&lpa.attention, &mut out);
            out.push(&lpa.norm.gain);
            out.push(&lpa.norm.bias);
        }
        out.push(&self.pos_embed);
        for l in &self.encoder {
            attn(&l.attention, &mut out);
            out.extend([
                &l.attention_norm.gain,
                &l.attention_norm.bias,
                &l.ffn_in.weight,
                &l.ffn_in.bias,
                &l.ffn_out.weight,
                &l.ffn_out.bias,
                &l.ffn_norm.gain,
                &l.ffn_norm.bias,
            ]);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<S>> {
        fn attn<'a, S>(a: &'a mut AttentionParams<S>, out: &mut Vec<&'a mut Tensor<S>>) {
            for lin in [&mut a.query, &mut a.key, &mut a.value, &mut a.output] {
                out.push(&mut lin.weight);
                out.push(&mut lin.bias);
            }
        }
        let mut out = vec![&mut self.input.weight, &mut self.input.bias];
        if let Some(lpa) = &mut self.lpa {
            attn(&mut lpa.attention, &mut out);
            out.push(&mut lpa.norm.gain);
            out.push(&mut lpa.norm.bias);
        }
        out.push(&mut self.pos_embed);
        for l in &mut self.encoder {
            attn(&mut l.attention, &mut out);
            out.extend([
                &mut l.attention_norm.gain,
                &mut l.attention_norm.bias,
                &mut l.ffn_in.weight,
                &mut l.ffn_in.bias,
                &mut l.ffn_out.weight,
                &mut l.ffn_out.bias,
                &mut l.ffn_norm.gain,
                &mut l.ffn_norm.bias,
            ]);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn cast<T: Scalar>(&self, cfg: &ModelConfig) -> ModelParams<T> {
        let mut out = ModelParams::<T>::zeros(cfg).expect("config already validated");
        for (dst, src) in out.tensors_mut().into_iter().zip(self.tensors()) {
            *dst = src.cast();
        }
        out
    }

    pub fn to_flat(&self) -> Vec<S> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn load_flat(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "flat vector has {} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Multiplies every value by `factor`.
    pub fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v * factor);
        }
    }

    pub fn sum_squares(&self) -> S {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }
}

/// Maps bits to `±1/√T`, one row per token.
pub fn bipolar<S: Scalar>(projections: &[BitProjection], bits: usize) -> Tensor<S> {
    let hi = S::lit(1.0 / (bits as f64).sqrt());
    let lo = -hi;
    let mut x = Tensor::zeros(&[projections.len(), bits]);
    for (r, p) in projections.iter().enumerate() {
        for (v, b) in x.row_mut(r).iter_mut().zip(p.iter()) {
            *v = if b { hi } else { lo };
        }
    }
    x
}

/// One entry per group; `None` for fully masked groups.
type GroupTraces<S> = Vec<Option<GroupTrace<S>>>;

/// Intermediates of one LPA group.
#[derive(Debug, Clone)]
struct GroupTrace<S> {
    attention: AttentionCache<S>,
    drop: Option<Vec<S>>,
    norm: LayerNormCache<S>,
    argmax: Vec<usize>,
}

#[derive(Debug, Clone)]
struct LayerTrace<S> {
    attention: AttentionCache<S>,
    attention_drop: Option<Vec<S>>,
    attention_norm: LayerNormCache<S>,
    hidden: Tensor<S>,
    pre_activation: Tensor<S>,
    activation: Tensor<S>,
    ffn_drop: Option<Vec<S>>,
    ffn_norm: LayerNormCache<S>,
}

/// Everything `backward` needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<S> {
    bipolar: Tensor<S>,
    groups: GroupTraces<S>,
    input_drop: Option<Vec<S>>,
    layers: Vec<LayerTrace<S>>,
    pool_argmax: Vec<usize>,
    pooled: Tensor<S>,
    pooled_drop: Option<Vec<S>>,
}

fn group_rows<S: Scalar>(x: &Tensor<S>, start: usize, len: usize) -> Tensor<S> {
    let c = x.cols();
    Tensor::new(vec![len, c], x.data()[start * c..(start + len) * c].to_vec()).expect("row slice")
}

fn residual_dropout<S: Scalar>(
    base: &Tensor<S>,
    branch: &mut Tensor<S>,
    dropout: &mut Option<&mut Dropout>,
) -> (Tensor<S>, Option<Vec<S>>) {
    let drop = dropout.as_deref_mut().and_then(|d| d.mask::<S>(branch.len()));
    apply_mask(branch.data_mut(), drop.as_deref());
    let mut sum = base.clone();
    sum.add_assign(branch);
    (sum, drop)
}

impl<S: Scalar> ModelParams<S> {
    /// Bipolar-scaled bits through the input linear layer: `N × d`.
    pub fn embed_projections(&self, cfg: &ModelConfig, projections: &[BitProjection]) -> Result<Tensor<S>> {
        Ok(self.input.forward(&self.checked_bipolar(cfg, projections)?))
    }

    fn checked_bipolar(&self, cfg: &ModelConfig, projections: &[BitProjection]) -> Result<Tensor<S>> {
        if let Some(bad) = projections.iter().find(|p| p.len() != cfg.projection_bits) {
            return Err(Error::ShapeMismatch(format!(
                "projection has {} bits, model expects {}",
                bad.len(),
                cfg.projection_bits
            )));
        }
        if projections.is_empty() {
            return Err(Error::ShapeMismatch("no projection rows".into()));
        }
        Ok(bipolar(projections, cfg.projection_bits))
    }

    /// Compresses `N` token rows into `N/K` group rows. With `K == 1` this is the identity.
    pub fn lpa_forward(
        &self,
        cfg: &ModelConfig,
        embedded: &Tensor<S>,
        token_mask: &[bool],
        dropout: Option<&mut Dropout>,
    ) -> Result<(Tensor<S>, Vec<bool>)> {
        let (g, mask, _) = self.lpa_traced(cfg, embedded, token_mask, dropout)?;
        Ok((g, mask))
    }

    fn lpa_traced(
        &self,
        cfg: &ModelConfig,
        embedded: &Tensor<S>,
        token_mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(Tensor<S>, Vec<bool>, GroupTraces<S>)> {
        let k = cfg.group_factor;
        let n = embedded.rows();
        if !n.is_multiple_of(k) || token_mask.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{n} rows with {} mask entries cannot be split into groups of {k}",
                token_mask.len()
            )));
        }
        let Some(lpa) = &self.lpa else {
            return Ok((embedded.clone(), token_mask.to_vec(), Vec::new()));
        };
        let groups = n / k;
        let d = embedded.cols();
        let mut out = Tensor::zeros(&[groups, d]);
        let mut gmask = vec![false; groups];
        let mut traces = Vec::with_capacity(groups);
        instrument::with_site(Site::Lpa, || -> Result<()> {
            for g in 0..groups {
                let m = &token_mask[g * k..(g + 1) * k];
                if !m.iter().any(|&b| b) {
                    traces.push(None);
                    continue;
                }
                gmask[g] = true;
                let x = group_rows(embedded, g * k, k);
                let (mut a, attention) = attention_forward(&x, m, &lpa.attention, dropout.as_deref_mut())?;
                let (r, drop) = residual_dropout(&x, &mut a, &mut dropout);
                let (h, norm) = lpa.norm.forward(&r);
                let (pooled, argmax) = masked_max_pool(&h, m)?;
                out.row_mut(g).copy_from_slice(&pooled);
                traces.push(Some(GroupTrace {
                    attention,
                    drop,
                    norm,
                    argmax,
                }));
            }
            Ok(())
        })?;
        Ok((out, gmask, traces))
    }

    /// Inference forward pass (no dropout).
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        projections: &[BitProjection],
        token_mask: &[bool],
    ) -> Result<ModelOutput<S>> {
        self.forward_traced(cfg, projections, token_mask, None).map(|(o, _)| o)
    }

    /// Forward pass that keeps intermediates for [`ModelParams::backward`].
    /// Passing `dropout` puts the network in training mode.
    pub fn forward_traced(
        &self,
        cfg: &ModelConfig,
        projections: &[BitProjection],
        token_mask: &[bool],
        mut dropout: Option<&mut Dropout>,
    ) -> Result<(ModelOutput<S>, ForwardTrace<S>)> {
        if projections.len() != cfg.max_len || token_mask.len() != cfg.max_len {
            return Err(Error::ShapeMismatch(format!(
                "expected {} rows, got {} projections and {} mask entries",
                cfg.max_len,
                projections.len(),
                token_mask.len()
            )));
        }
        if !token_mask.iter().any(|&b| b) {
            return Err(Error::EmptyInput);
        }
        let bip = self.checked_bipolar(cfg, projections)?;
        let embedded = instrument::with_site(Site::InputProjection, || self.input.forward(&bip));
        let (groups, gmask, group_traces) = self.lpa_traced(cfg, &embedded, token_mask, dropout.as_deref_mut())?;

        let mut z = groups.clone();
        for g in 0..z.rows() {
            let pos = self.pos_embed.row(g).to_vec();
            for (v, p) in z.row_mut(g).iter_mut().zip(pos) {
                *v = *v + p;
            }
        }
        let input_drop = dropout.as_deref_mut().and_then(|d| d.mask::<S>(z.len()));
        apply_mask(z.data_mut(), input_drop.as_deref());

        let mut layers = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let (mut a, attention) = instrument::with_site(Site::Encoder, || {
                attention_forward(&z, &gmask, &layer.attention, dropout.as_deref_mut())
            })?;
            let (r1, attention_drop) = residual_dropout(&z, &mut a, &mut dropout);
            let (h, attention_norm) = layer.attention_norm.forward(&r1);
            let (pre, act, mut f) = instrument::with_site(Site::Ffn, || {
                let pre = layer.ffn_in.forward(&h);
                let mut act = pre.clone();
                act.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
                let f = layer.ffn_out.forward(&act);
                (pre, act, f)
            });
            let (r2, ffn_drop) = residual_dropout(&h, &mut f, &mut dropout);
            let (out, ffn_norm) = layer.ffn_norm.forward(&r2);
            layers.push(LayerTrace {
                attention,
                attention_drop,
                attention_norm,
                hidden: h,
                pre_activation: pre,
                activation: act,
                ffn_drop,
                ffn_norm,
            });
            z = out;
        }

        let (pooled, pool_argmax) = masked_max_pool(&z, &gmask)?;
        let mut pooled = Tensor::new(vec![1, pooled.len()], pooled)?;
        let pooled_drop = dropout.and_then(|d| d.mask::<S>(pooled.len()));
        apply_mask(pooled.data_mut(), pooled_drop.as_deref());
        let logits = instrument::with_site(Site::Head, || self.head.forward(&pooled)).into_data();

        Ok((
            ModelOutput {
                logits,
                group_representations: Some(groups),
            },
            ForwardTrace {
                bipolar: bip,
                groups: group_traces,
                input_drop,
                layers,
                pool_argmax,
                pooled,
                pooled_drop,
            },
        ))
    }

    /// Back-propagates `dlogits`, accumulating into `grads`.
    pub fn backward(&self, cfg: &ModelConfig, trace: &ForwardTrace<S>, dlogits: &[S], grads: &mut ModelParams<S>) {
        instrument::with_site(Site::Backward, || self.backward_inner(cfg, trace, dlogits, grads));
    }

    fn backward_inner(&self, cfg: &ModelConfig, trace: &ForwardTrace<S>, dlogits: &[S], grads: &mut ModelParams<S>) {
        let groups = cfg.max_groups();
        let d = cfg.hidden;
        let dy = Tensor::new(vec![1, dlogits.len()], dlogits.to_vec()).expect("logit gradient shape");
        let mut dpooled = self.head.backward(&trace.pooled, &dy, &mut grads.head).into_data();
        apply_mask(&mut dpooled, trace.pooled_drop.as_deref());
        let mut dz = masked_max_pool_backward(&trace.pool_argmax, &dpooled, groups);

        for ((layer, lt), lg) in self.encoder.iter().zip(&trace.layers).zip(&mut grads.encoder).rev() {
            let dr2 = layer.ffn_norm.backward(&lt.ffn_norm, &dz, &mut lg.ffn_norm);
            let mut df = dr2.clone();
            apply_mask(df.data_mut(), lt.ffn_drop.as_deref());
            let mut dact = layer.ffn_out.backward(&lt.activation, &df, &mut lg.ffn_out);
            for (g, &x) in dact.data_mut().iter_mut().zip(lt.pre_activation.data()) {
                *g = *g * gelu_grad(x);
            }
            let mut dh = dr2;
            dh.add_assign(&layer.ffn_in.backward(&lt.hidden, &dact, &mut lg.ffn_in));
            let dr1 = layer
                .attention_norm
                .backward(&lt.attention_norm, &dh, &mut lg.attention_norm);
            let mut da = dr1.clone();
            apply_mask(da.data_mut(), lt.attention_drop.as_deref());
            let mut dx = dr1;
            dx.add_assign(&attention_backward(
                &layer.attention,
                &lt.attention,
                &da,
                &mut lg.attention,
            ));
            dz = dx;
        }

        apply_mask(dz.data_mut(), trace.input_drop.as_deref());
        grads.pos_embed.add_assign(&dz);

        let de = match (&self.lpa, &mut grads.lpa) {
            (Some(lpa), Some(lg)) => {
                let k = cfg.group_factor;
                let mut de = Tensor::zeros(&[cfg.max_len, d]);
                for (g, gt) in trace.groups.iter().enumerate() {
                    let Some(gt) = gt else { continue };
                    let dh = masked_max_pool_backward(&gt.argmax, dz.row(g), k);
                    let dr = lpa.norm.backward(&gt.norm, &dh, &mut lg.norm);
                    let mut da = dr.clone();
                    apply_mask(da.data_mut(), gt.drop.as_deref());
                    let mut dx = dr;
                    dx.add_assign(&attention_backward(
                        &lpa.attention,
                        &gt.attention,
                        &da,
                        &mut lg.attention,
                    ));
                    de.data_mut()[g * k * d..(g + 1) * k * d].copy_from_slice(dx.data());
                }
                de
            }
            _ => dz,
        };
        let _ = self.input.backward(&trace.bipolar, &de, &mut grads.input);
    }
}
