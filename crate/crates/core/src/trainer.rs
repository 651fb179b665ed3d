//! Adam training loop with linear warmup and decay.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{encode_tokens, make_batches, Batch, LabeledExample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::nn::{softmax_cross_entropy, AdamConfig, AdamState, Dropout};
use crate::projection::Projector;

pub const DEFAULT_EPOCHS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub dropout: f64,
    /// Record metrics every this many steps (and after the last one).
    pub eval_every: usize,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.01,
            warmup_steps: 10_000,
            total_steps: 20_000,
            batch_size: 256,
            dropout: 0.1,
            eval_every: 1000,
            seed: 0,
            clip_norm: Some(1.0),
        }
    }
}

/// Optimizer steps needed for `epochs` passes over `examples` items.
pub fn steps_for_epochs(examples: usize, batch_size: usize, epochs: usize) -> usize {
    examples.div_ceil(batch_size.max(1)) * epochs
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        for (name, v) in [("lr", self.lr), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return bad("Adam betas must be below 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if self.total_steps == 0 {
            return bad("total steps must be positive".into());
        }
        if self.warmup_steps > self.total_steps {
            return bad(format!(
                "warmup steps {} exceed total steps {}",
                self.warmup_steps, self.total_steps
            ));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return bad("batch size and eval interval must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if let Some(c) = self.clip_norm {
            if !c.is_finite() || c <= 0.0 {
                return bad(format!("clip norm must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Learning rate after `step` updates: linear ramp to `lr` at `warmup_steps`,
/// then linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    if step >= cfg.total_steps {
        return 0.0;
    }
    if step < cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    cfg.lr * (cfg.total_steps - step) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64
}

/// One metrics record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub step: usize,
    pub lr: f64,
    /// Mean training loss since the previous record.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    /// Seconds since training started.
    pub wall_time: f64,
}

impl Metrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams<f32>,
    pub metrics: Vec<Metrics>,
    /// Mean batch loss of every step, in order.
    pub step_losses: Vec<f64>,
}

/// Forward, loss and backward over one batch; gradients are averaged over it.
/// Returns the mean loss.
pub fn batch_gradients(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    batch: &Batch,
    mut dropout: Option<&mut Dropout>,
    grads: &mut ModelParams<f32>,
) -> Result<f64> {
    let scale = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    for ((rows, mask), &label) in batch.projections.iter().zip(&batch.token_masks).zip(&batch.labels) {
        let (out, trace) = params.forward_traced(cfg, rows, mask, dropout.as_deref_mut())?;
        let (loss, mut dlogits) = softmax_cross_entropy(&out.logits, label)?;
        total += loss as f64;
        dlogits.iter_mut().for_each(|g| *g *= scale);
        params.backward(cfg, &trace, &dlogits, grads);
    }
    Ok(total / batch.len() as f64)
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut ModelParams<f32>, max_norm: f64) -> f64 {
    let norm = (grads.sum_squares() as f64).sqrt();
    if norm > max_norm {
        grads.scale((max_norm / norm) as f32);
    }
    norm
}

/// One optimizer step at learning rate `lr`. Returns the mean batch loss.
pub fn train_step(
    params: &mut ModelParams<f32>,
    cfg: &ModelConfig,
    adam: &mut AdamState<f32>,
    batch: &Batch,
    lr: f64,
    clip_norm: Option<f64>,
    dropout: Option<&mut Dropout>,
) -> Result<f64> {
    let mut grads = ModelParams::zeros(cfg)?;
    let loss = batch_gradients(params, cfg, batch, dropout, &mut grads)?;
    if !loss.is_finite() {
        return Err(Error::NanLoss {
            step: adam.step() as usize,
        });
    }
    if let Some(c) = clip_norm {
        clip_global_norm(&mut grads, c);
    }
    let g = grads.tensors();
    adam.update(&mut params.tensors_mut(), &g, lr)?;
    Ok(loss)
}

pub fn new_optimizer(params: &ModelParams<f32>, tc: &TrainConfig) -> AdamState<f32> {
    let lens: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    AdamState::new(tc.adam(), &lens)
}

/// Trains starting from `params`; `on_record` sees each metrics record as it is made.
pub fn train_with(
    mut params: ModelParams<f32>,
    cfg: &ModelConfig,
    projector: &Projector,
    train_set: &[LabeledExample],
    eval_set: Option<&[LabeledExample]>,
    tc: &TrainConfig,
    mut on_record: impl FnMut(&Metrics) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    tc.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let model_cfg = ModelConfig {
        dropout: tc.dropout,
        ..*cfg
    };
    let mut adam = new_optimizer(&params, tc);
    let mut dropout = Dropout::new(tc.dropout, tc.seed ^ 0xd80f_0a7e);
    let start = Instant::now();
    let mut metrics = Vec::new();
    let mut step_losses = Vec::with_capacity(tc.total_steps);
    let mut since_record = 0.0;
    let mut epoch = 0u64;
    'outer: loop {
        let shuffle = tc.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(epoch);
        for batch in make_batches(train_set, projector, &model_cfg, tc.batch_size, shuffle)? {
            let step = step_losses.len();
            let lr = lr_at(step + 1, tc);
            let loss = train_step(
                &mut params,
                &model_cfg,
                &mut adam,
                &batch,
                lr,
                tc.clip_norm,
                Some(&mut dropout),
            )
            .map_err(|e| match e {
                Error::NanLoss { .. } => Error::NanLoss { step: step + 1 },
                e => e,
            })?;
            step_losses.push(loss);
            since_record += loss;
            let done = step + 1;
            if done % tc.eval_every == 0 || done == tc.total_steps {
                let n = (done - 1) % tc.eval_every + 1;
                let accuracy = match eval_set {
                    Some(set) => Some(evaluate(&params, &model_cfg, projector, set)?),
                    None => None,
                };
                let record = Metrics {
                    step: done,
                    lr,
                    loss: since_record / n as f64,
                    accuracy,
                    wall_time: start.elapsed().as_secs_f64(),
                };
                on_record(&record)?;
                metrics.push(record);
                since_record = 0.0;
            }
            if done == tc.total_steps {
                break 'outer;
            }
        }
        epoch += 1;
    }
    Ok(TrainOutcome {
        params,
        metrics,
        step_losses,
    })
}

pub fn train(
    params: ModelParams<f32>,
    cfg: &ModelConfig,
    projector: &Projector,
    train_set: &[LabeledExample],
    eval_set: Option<&[LabeledExample]>,
    tc: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(params, cfg, projector, train_set, eval_set, tc, |_| Ok(()))
}

/// Writes each record as one JSON line.
pub fn ndjson_sink<W: Write + ?Sized>(out: &mut W) -> impl FnMut(&Metrics) -> Result<()> + '_ {
    move |m| {
        writeln!(out, "{}", m.to_json_line()).map_err(|e| Error::io("<metrics>", e))?;
        out.flush().map_err(|e| Error::io("<metrics>", e))
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<S: PartialOrd + Copy>(xs: &[S]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Predicted class and its softmax probability.
pub fn predict<S: AsRef<str>>(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    projector: &Projector,
    tokens: &[S],
) -> Result<(usize, f64)> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (rows, mask) = encode_tokens(tokens, projector, cfg.max_len)?;
    let mut logits = params.forward(cfg, &rows, &mask)?.logits;
    let class = argmax(&logits);
    crate::nn::layers::softmax_in_place(&mut logits);
    Ok((class, logits[class] as f64))
}

/// Fraction of examples whose argmax prediction matches the label.
pub fn evaluate(
    params: &ModelParams<f32>,
    cfg: &ModelConfig,
    projector: &Projector,
    examples: &[LabeledExample],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    for ex in examples {
        let (rows, mask) = encode_tokens(&ex.tokens, projector, cfg.max_len)?;
        if argmax(&params.forward(cfg, &rows, &mask)?.logits) == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic;
    use crate::projection::ProjectionConfig;

    fn small(k: usize) -> (ModelConfig, Projector) {
        let cfg = ModelConfig {
            projection_bits: 64,
            hidden: 32,
            layers: 1,
            heads: 2,
            group_factor: k,
            max_len: 8,
            classes: 4,
            ffn_dim: 32,
            dropout: 0.0,
        };
        (cfg, Projector::new(ProjectionConfig::new(64, 5, 1, 11).unwrap()))
    }

    fn overfit_config(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 3e-3,
            warmup_steps: steps.min(20),
            total_steps: steps,
            batch_size: 16,
            dropout: 0.0,
            eval_every: 20,
            weight_decay: 0.0,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_examples() {
        let tc = TrainConfig::default();
        assert_eq!(lr_at(0, &tc), 0.0);
        assert_eq!(lr_at(10_000, &tc), 1e-4);
        assert!((lr_at(15_000, &tc) - 5e-5).abs() < 1e-18);
        assert!((lr_at(5_000, &tc) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(20_000, &tc), 0.0);
        let peak = (0..=tc.total_steps).map(|s| lr_at(s, &tc)).fold(0.0, f64::max);
        assert_eq!(peak, 1e-4);
        for s in 1..=tc.total_steps {
            assert!((lr_at(s, &tc) - lr_at(s - 1, &tc)).abs() <= 1e-4 / 10_000.0 + 1e-18);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig {
                warmup_steps: 30_000,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                batch_size: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                dropout: 1.0,
                ..TrainConfig::default()
            },
        ];
        for tc in bad {
            assert_eq!(tc.validate().unwrap_err().kind(), "invalid-config");
        }
        assert_eq!(steps_for_epochs(10, 4, 5), 15);
    }

    #[test]
    fn zero_lr_step_keeps_params() {
        let (cfg, proj) = small(1);
        let ds = synthetic::dataset(8, 4, 0);
        let batch = make_batches(&ds.examples, &proj, &cfg, 8, 0).unwrap().remove(0);
        let mut params = ModelParams::<f32>::init(&cfg, 1).unwrap();
        let before = params.clone();
        let tc = TrainConfig::default();
        let mut adam = new_optimizer(&params, &tc);
        train_step(&mut params, &cfg, &mut adam, &batch, 0.0, tc.clip_norm, None).unwrap();
        assert_eq!(params.to_flat(), before.to_flat());
        assert_eq!(adam.step(), 1);
    }

    #[test]
    fn clipping_bounds_norm() {
        let (cfg, _) = small(1);
        let mut g = ModelParams::<f32>::init(&cfg, 3).unwrap();
        g.scale(100.0);
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!(((g.sum_squares() as f64).sqrt() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5f32, 0.9, 0.9, 0.1]), 1);
        assert_eq!(argmax(&[1.0f32, 1.0]), 0);
    }

    #[test]
    fn evaluate_rejects_empty_set() {
        let (cfg, proj) = small(1);
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        assert_eq!(evaluate(&p, &cfg, &proj, &[]).unwrap_err().kind(), "empty-dataset");
    }

    #[test]
    fn random_params_near_chance() {
        let (cfg, proj) = small(1);
        let ds = synthetic::dataset(1000, 4, 9);
        let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
        let acc = evaluate(&p, &cfg, &proj, &ds.examples).unwrap();
        assert!((0.15..=0.35).contains(&acc), "accuracy {acc}");
    }

    fn overfit(k: usize, steps: usize, batch_size: usize) -> TrainOutcome {
        let (cfg, proj) = small(k);
        let ds = synthetic::dataset(64, 4, 2);
        let params = ModelParams::init(&cfg, 7).unwrap();
        let tc = TrainConfig {
            batch_size,
            ..overfit_config(steps)
        };
        train(params, &cfg, &proj, &ds.examples, Some(&ds.examples), &tc).unwrap()
    }

    fn first_perfect(out: &TrainOutcome) -> Option<usize> {
        out.metrics.iter().find(|m| m.accuracy == Some(1.0)).map(|m| m.step)
    }

    #[test]
    fn tiny_overfit_without_grouping() {
        let out = overfit(1, 300, 16);
        assert!(first_perfect(&out).is_some(), "{:?}", out.metrics);
    }

    #[test]
    fn full_batch_loss_trend_is_monotone() {
        // Full batches keep the objective fixed from step to step.
        let out = overfit(1, 300, 64);
        let avg: Vec<f64> = out
            .step_losses
            .windows(20)
            .map(|w| w.iter().sum::<f64>() / 20.0)
            .collect();
        for (i, w) in avg.windows(2).enumerate() {
            assert!(w[1] <= w[0], "moving average rose at {i}: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn tiny_overfit_with_grouping() {
        let out = overfit(4, 600, 16);
        assert!(first_perfect(&out).is_some(), "{:?}", out.metrics);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (cfg, proj) = small(2);
            let ds = synthetic::dataset(32, 4, 1);
            let tc = TrainConfig {
                dropout: 0.1,
                total_steps: 12,
                eval_every: 4,
                ..overfit_config(12)
            };
            let out = train(
                ModelParams::init(&cfg, 3).unwrap(),
                &cfg,
                &proj,
                &ds.examples,
                Some(&ds.examples),
                &tc,
            )
            .unwrap();
            let log: Vec<Metrics> = out
                .metrics
                .into_iter()
                .map(|m| Metrics { wall_time: 0.0, ..m })
                .collect();
            (log, out.params.to_flat())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (cfg, proj) = small(1);
        let ds = synthetic::dataset(8, 4, 0);
        let mut params = ModelParams::<f32>::init(&cfg, 0).unwrap();
        params.head.weight.data_mut()[0] = f32::NAN;
        let err = train(params, &cfg, &proj, &ds.examples, None, &overfit_config(5)).unwrap_err();
        assert_eq!(err.kind(), "nan-loss");
        assert!(matches!(err, Error::NanLoss { step: 1 }));
    }

    #[test]
    fn metrics_serialize_as_ndjson() {
        let (cfg, proj) = small(1);
        let ds = synthetic::dataset(16, 4, 0);
        let tc = TrainConfig {
            total_steps: 5,
            eval_every: 2,
            ..overfit_config(5)
        };
        let mut buf = Vec::new();
        let out = train_with(
            ModelParams::init(&cfg, 0).unwrap(),
            &cfg,
            &proj,
            &ds.examples,
            None,
            &tc,
            ndjson_sink(&mut buf),
        )
        .unwrap();
        let lines: Vec<&str> = std::str::from_utf8(&buf).unwrap().lines().collect();
        assert_eq!(out.metrics.iter().map(|m| m.step).collect::<Vec<_>>(), vec![2, 4, 5]);
        assert_eq!(lines.len(), 3);
        let v: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert!(v.get("accuracy").is_none());
        assert_eq!(v["step"], 2);
    }
}
