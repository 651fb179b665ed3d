//! Closed-form parameter, byte and multiply-accumulate accounting.
//!
//! One MAC counts as one FLOP unit. Headline attention-score counts cover
//! `QKᵀ` and `PV` only; softmax, layer-norm and GELU work is reported
//! separately as element counts.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::nn::instrument::{OpCounts, OpKind, Site};

pub const BYTES_PER_FLOAT: u64 = 4;
pub const BYTES_PER_SEED: u64 = 4;
/// BERT-base WordPiece vocabulary, the default comparison point.
pub const REFERENCE_VOCAB: u64 = 30_000;

/// Parameter counts and bytes per subsystem.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FootprintReport {
    pub projection_params: u64,
    pub projection_bytes: u64,
    pub input_linear_params: u64,
    pub input_linear_bytes: u64,
    pub lpa_params: u64,
    pub lpa_bytes: u64,
    pub pos_embed_params: u64,
    pub pos_embed_bytes: u64,
    pub encoder_params: u64,
    pub encoder_bytes: u64,
    pub head_params: u64,
    pub head_bytes: u64,
    /// Learned float parameters (everything except projection seeds).
    pub float_params: u64,
    pub float_bytes: u64,
    pub total_bytes: u64,
    pub reference_vocab: u64,
    pub reference_dim: u64,
    pub embedding_table_equivalent_bytes: u64,
}

fn attention_params(d: u64) -> u64 {
    4 * (d * d + d)
}

fn layer_norm_params(d: u64) -> u64 {
    2 * d
}

/// Closed-form counts for `config`, compared against a `V × d` table with
/// `V = 30000` and `d = config.hidden`.
pub fn count_params(config: &ModelConfig) -> FootprintReport {
    count_params_with_reference(config, REFERENCE_VOCAB, config.hidden as u64)
}

pub fn count_params_with_reference(config: &ModelConfig, reference_vocab: u64, reference_dim: u64) -> FootprintReport {
    let t = config.projection_bits as u64;
    let d = config.hidden as u64;
    let f = config.ffn_dim as u64;
    let c = config.classes as u64;

    let input_linear = t * d + d;
    let lpa = if config.group_factor > 1 {
        attention_params(d) + layer_norm_params(d)
    } else {
        0
    };
    let pos_embed = config.max_groups() as u64 * d;
    let per_layer = attention_params(d) + 2 * layer_norm_params(d) + (d * f + f) + (f * d + d);
    let encoder = config.layers as u64 * per_layer;
    let head = d * c + c;
    let float_params = input_linear + lpa + pos_embed + encoder + head;
    let projection_bytes = BYTES_PER_SEED * t;

    FootprintReport {
        projection_params: t,
        projection_bytes,
        input_linear_params: input_linear,
        input_linear_bytes: BYTES_PER_FLOAT * input_linear,
        lpa_params: lpa,
        lpa_bytes: BYTES_PER_FLOAT * lpa,
        pos_embed_params: pos_embed,
        pos_embed_bytes: BYTES_PER_FLOAT * pos_embed,
        encoder_params: encoder,
        encoder_bytes: BYTES_PER_FLOAT * encoder,
        head_params: head,
        head_bytes: BYTES_PER_FLOAT * head,
        float_params,
        float_bytes: BYTES_PER_FLOAT * float_params,
        total_bytes: BYTES_PER_FLOAT * float_params + projection_bytes,
        reference_vocab,
        reference_dim,
        embedding_table_equivalent_bytes: BYTES_PER_FLOAT * reference_vocab * reference_dim,
    }
}

/// Embedding-table bytes against projection-seed bytes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintComparison {
    pub embedding_table_equivalent_bytes: u64,
    pub projection_bytes: u64,
    pub ratio: f64,
}

pub fn footprint_comparison(projection_bits: usize, reference_vocab: u64, reference_dim: u64) -> FootprintComparison {
    let table = BYTES_PER_FLOAT * reference_vocab * reference_dim;
    let proj = BYTES_PER_SEED * projection_bits as u64;
    FootprintComparison {
        embedding_table_equivalent_bytes: table,
        projection_bytes: proj,
        ratio: table as f64 / proj as f64,
    }
}

/// MAC counts for one forward pass over `seq_len` unmasked tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopReport {
    pub seq_len: u64,
    pub groups: u64,
    /// `N·T·d`.
    pub input_projection: u64,
    /// `(N/K)·2·K²·d`, zero for `K = 1`.
    pub lpa_attention_scores: u64,
    /// `L·2·(N/K)²·d`.
    pub encoder_attention_scores: u64,
    /// Q, K, V and output maps: `4·N·d²` in LPA (when `K > 1`) plus `L·4·(N/K)·d²`.
    pub attention_projections: u64,
    /// `L·2·(N/K)·d·ffn`.
    pub ffn: u64,
    /// `d·C`.
    pub head: u64,
    pub total_macs: u64,
    pub softmax_elements: u64,
    pub layer_norm_elements: u64,
    pub gelu_elements: u64,
    /// MACs plus the element-wise terms above.
    pub total_with_secondary: u64,
}

pub fn count_flops(config: &ModelConfig, seq_len: usize) -> Result<FlopReport> {
    let k = config.group_factor;
    if seq_len == 0 || k == 0 || !seq_len.is_multiple_of(k) || seq_len > config.max_len {
        return Err(Error::InvalidConfig(format!(
            "sequence length {seq_len} must be a positive multiple of K={k} and at most {}",
            config.max_len
        )));
    }
    let (n, k) = (seq_len as u64, k as u64);
    let t = config.projection_bits as u64;
    let d = config.hidden as u64;
    let f = config.ffn_dim as u64;
    let l = config.layers as u64;
    let h = config.heads as u64;
    let c = config.classes as u64;
    let groups = n / k;
    let lpa_on = k > 1;

    let input_projection = n * t * d;
    let lpa_attention_scores = if lpa_on { groups * 2 * k * k * d } else { 0 };
    let encoder_attention_scores = l * 2 * groups * groups * d;
    let attention_projections = if lpa_on { 4 * n * d * d } else { 0 } + l * 4 * groups * d * d;
    let ffn = l * 2 * groups * d * f;
    let head = d * c;
    let total_macs =
        input_projection + lpa_attention_scores + encoder_attention_scores + attention_projections + ffn + head;

    let softmax_elements = if lpa_on { h * groups * k * k } else { 0 } + l * h * groups * groups;
    let layer_norm_elements = if lpa_on { n * d } else { 0 } + l * 2 * groups * d;
    let gelu_elements = l * groups * f;

    Ok(FlopReport {
        seq_len: n,
        groups,
        input_projection,
        lpa_attention_scores,
        encoder_attention_scores,
        attention_projections,
        ffn,
        head,
        total_macs,
        softmax_elements,
        layer_norm_elements,
        gelu_elements,
        total_with_secondary: total_macs + softmax_elements + layer_norm_elements + gelu_elements,
    })
}

/// MAC totals measured by the forward-pass instrumentation, in [`FlopReport`] categories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeasuredMacs {
    pub input_projection: u64,
    pub lpa_attention_scores: u64,
    pub encoder_attention_scores: u64,
    pub attention_projections: u64,
    pub ffn: u64,
    pub head: u64,
}

impl MeasuredMacs {
    pub fn from_counts(c: &OpCounts) -> Self {
        Self {
            input_projection: c.macs(Site::InputProjection, OpKind::Dense),
            lpa_attention_scores: c.macs(Site::Lpa, OpKind::Scores),
            encoder_attention_scores: c.macs(Site::Encoder, OpKind::Scores),
            attention_projections: c.macs(Site::Lpa, OpKind::Dense) + c.macs(Site::Encoder, OpKind::Dense),
            ffn: c.macs(Site::Ffn, OpKind::Dense),
            head: c.macs(Site::Head, OpKind::Dense),
        }
    }

    pub fn total(&self) -> u64 {
        self.input_projection
            + self.lpa_attention_scores
            + self.encoder_attention_scores
            + self.attention_projections
            + self.ffn
            + self.head
    }
}

/// Everything `proformer report` prints, as one flat JSON object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub projection_bits: u64,
    pub hidden: u64,
    pub layers: u64,
    pub heads: u64,
    pub group_factor: u64,
    pub max_len: u64,
    pub classes: u64,
    pub ffn_dim: u64,
    #[serde(flatten)]
    pub footprint: FootprintReport,
    pub embedding_to_projection_ratio: f64,
    #[serde(flatten)]
    pub flops: FlopReport,
    /// `encoder_attention_scores` at `K = 1` divided by the value at this `K`.
    pub encoder_score_reduction_vs_k1: f64,
}

pub fn build_report(config: &ModelConfig, seq_len: usize, reference_vocab: u64, reference_dim: u64) -> Result<Report> {
    config.validate()?;
    let footprint = count_params_with_reference(config, reference_vocab, reference_dim);
    let cmp = footprint_comparison(config.projection_bits, reference_vocab, reference_dim);
    let flops = count_flops(config, seq_len)?;
    let baseline = count_flops(
        &ModelConfig {
            group_factor: 1,
            ..*config
        },
        seq_len,
    )?;
    Ok(Report {
        projection_bits: config.projection_bits as u64,
        hidden: config.hidden as u64,
        layers: config.layers as u64,
        heads: config.heads as u64,
        group_factor: config.group_factor as u64,
        max_len: config.max_len as u64,
        classes: config.classes as u64,
        ffn_dim: config.ffn_dim as u64,
        footprint,
        embedding_to_projection_ratio: cmp.ratio,
        encoder_score_reduction_vs_k1: baseline.encoder_attention_scores as f64 / flops.encoder_attention_scores as f64,
        flops,
    })
}
