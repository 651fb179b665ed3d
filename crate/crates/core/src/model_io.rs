//! Binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "PFMR"                      magic
//! u32 version                 currently 1
//! u64 body_len                bytes between this field and the CRC
//! body:
//!   model config              8 × u32 (T, d, L, H, K, N_max, C, ffn_dim), f64 dropout
//!   projection config         u32 T, u32 max_ngram, u32 skip, u64 global seed, T × u32 bit seeds
//!   u32 tensor count
//!   per tensor                u32 rank, rank × u32 dims, u64 element count, f32 values
//!   u32 label count
//!   per label                 u32 byte length, UTF-8 bytes
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Tensors appear in [`ModelParams::tensors`] order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::projection::{ProjectionConfig, Projector};

pub const MAGIC: &[u8; 4] = b"PFMR";
pub const FORMAT_VERSION: u32 = 1;

const PREAMBLE: usize = 4 + 4 + 8;
const CRC_LEN: usize = 4;
const MODEL_CONFIG_LEN: usize = 8 * 4 + 8;

/// A trained model with everything needed to run it.
#[derive(Debug, Clone, PartialEq)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub projection: ProjectionConfig,
    pub params: ModelParams<f32>,
    /// Class names, index-aligned with the logits.
    pub labels: Vec<String>,
}

impl SavedModel {
    pub fn new(
        config: ModelConfig,
        projection: ProjectionConfig,
        params: ModelParams<f32>,
        labels: Vec<String>,
    ) -> Result<Self> {
        let model = Self {
            config,
            projection,
            params,
            labels,
        };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        self.config.validate()?;
        if self.projection.bits() != self.config.projection_bits {
            return Err(Error::ShapeMismatch(format!(
                "projection has {} bits, model expects {}",
                self.projection.bits(),
                self.config.projection_bits
            )));
        }
        if self.labels.len() != self.config.classes {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} classes",
                self.labels.len(),
                self.config.classes
            )));
        }
        let expected = ModelParams::<f32>::zeros(&self.config)?;
        let ours = self.params.tensors();
        let theirs = expected.tensors();
        if ours.len() != theirs.len() || ours.iter().zip(&theirs).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::ShapeMismatch("parameters do not match the model config".into()));
        }
        Ok(())
    }

    pub fn projector(&self) -> Projector {
        Projector::new(self.projection.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check()?;
        let mut body = Vec::new();
        let c = &self.config;
        for v in [
            c.projection_bits,
            c.hidden,
            c.layers,
            c.heads,
            c.group_factor,
            c.max_len,
            c.classes,
            c.ffn_dim,
        ] {
            put_u32(&mut body, v)?;
        }
        body.extend_from_slice(&c.dropout.to_le_bytes());

        let p = &self.projection;
        put_u32(&mut body, p.bits())?;
        put_u32(&mut body, p.max_ngram())?;
        put_u32(&mut body, p.skip_distance())?;
        body.extend_from_slice(&p.global_seed().to_le_bytes());
        for s in p.bit_seeds() {
            body.extend_from_slice(&s.to_le_bytes());
        }

        let tensors = self.params.tensors();
        put_u32(&mut body, tensors.len())?;
        for t in tensors {
            put_u32(&mut body, t.shape().len())?;
            for &d in t.shape() {
                put_u32(&mut body, d)?;
            }
            body.extend_from_slice(&(t.len() as u64).to_le_bytes());
            for v in t.data() {
                body.extend_from_slice(&v.to_le_bytes());
            }
        }

        put_u32(&mut body, self.labels.len())?;
        for l in &self.labels {
            put_u32(&mut body, l.len())?;
            body.extend_from_slice(l.as_bytes());
        }

        let mut out = Vec::with_capacity(PREAMBLE + body.len() + CRC_LEN);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(body.len() as u64).to_le_bytes());
        out.extend_from_slice(&body);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() {
            return Err(Error::Truncated);
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < PREAMBLE + CRC_LEN {
            return Err(Error::Truncated);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let body_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expected = (PREAMBLE as u64)
            .saturating_add(body_len)
            .saturating_add(CRC_LEN as u64);
        if (bytes.len() as u64) < expected {
            return Err(Error::Truncated);
        }
        if bytes.len() as u64 > expected {
            return Err(Error::MalformedModel(format!(
                "{} trailing bytes after the checksum",
                bytes.len() as u64 - expected
            )));
        }
        let (data, tail) = bytes.split_at(bytes.len() - CRC_LEN);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(data);
        if stored != computed {
            return Err(Error::CrcMismatch { stored, computed });
        }
        parse_body(&data[PREAMBLE..])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

pub fn save_model(model: &SavedModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SavedModel> {
    SavedModel::load(path)
}

/// Bytes a file needs beyond the raw float parameters and the 4·T seed table.
pub fn fixed_overhead(model: &SavedModel) -> usize {
    let tensors = model.params.tensors();
    let tensor_headers: usize = tensors.iter().map(|t| 4 + 4 * t.shape().len() + 8).sum();
    let labels: usize = model.labels.iter().map(|l| 4 + l.len()).sum();
    PREAMBLE + MODEL_CONFIG_LEN + (3 * 4 + 8) + 4 + tensor_headers + 4 + labels + CRC_LEN
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::InvalidConfig(format!("{v} does not fit in 32 bits")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedModel(format!("body ends early at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn usize(&mut self) -> Result<usize> {
        self.u32().map(|v| v as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

fn malformed(e: Error) -> Error {
    match e {
        Error::MalformedModel(_) => e,
        other => Error::MalformedModel(other.to_string()),
    }
}

fn parse_body(body: &[u8]) -> Result<SavedModel> {
    let mut r = Reader { bytes: body, pos: 0 };
    let config = ModelConfig {
        projection_bits: r.usize()?,
        hidden: r.usize()?,
        layers: r.usize()?,
        heads: r.usize()?,
        group_factor: r.usize()?,
        max_len: r.usize()?,
        classes: r.usize()?,
        ffn_dim: r.usize()?,
        dropout: f64::from_bits(r.u64()?),
    };
    config.validate().map_err(malformed)?;

    let bits = r.usize()?;
    let max_ngram = r.usize()?;
    let skip = r.usize()?;
    let seed = r.u64()?;
    let seed_bytes = r.take(bits.checked_mul(4).ok_or_else(|| malformed(Error::Truncated))?)?;
    let seeds = seed_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let projection = ProjectionConfig::from_parts(bits, max_ngram, skip, seed, seeds).map_err(malformed)?;

    let mut params = ModelParams::<f32>::zeros(&config).map_err(malformed)?;
    let count = r.usize()?;
    let mut slots = params.tensors_mut();
    if count != slots.len() {
        return Err(Error::MalformedModel(format!(
            "{count} tensors stored, config needs {}",
            slots.len()
        )));
    }
    for (i, slot) in slots.iter_mut().enumerate() {
        let rank = r.usize()?;
        let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let len = r.u64()?;
        let product = dims.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d as u64));
        if product != Some(len) {
            return Err(Error::MalformedModel(format!(
                "tensor {i}: shape {dims:?} does not multiply to {len}"
            )));
        }
        if dims != slot.shape() {
            return Err(Error::MalformedModel(format!(
                "tensor {i}: stored shape {dims:?}, config needs {:?}",
                slot.shape()
            )));
        }
        for v in slot.data_mut() {
            *v = r.f32()?;
        }
    }
    drop(slots);

    let n_labels = r.usize()?;
    let labels = (0..n_labels)
        .map(|_| {
            let n = r.usize()?;
            String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::MalformedModel("label is not UTF-8".into()))
        })
        .collect::<Result<Vec<_>>>()?;
    if r.pos != body.len() {
        return Err(Error::MalformedModel(format!(
            "{} unread bytes in body",
            body.len() - r.pos
        )));
    }
    SavedModel::new(config, projection, params, labels).map_err(malformed)
}
