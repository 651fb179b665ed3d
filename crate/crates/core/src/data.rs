//! TSV corpora, tokenization and padded batches.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::projection::{BitProjection, Projector};

/// Short-text default padded length.
pub const SHORT_MAX_LEN: usize = 16;
/// Long-text default padded length.
pub const LONG_MAX_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledExample {
    pub label: usize,
    pub tokens: Vec<String>,
}

/// Examples plus the label vocabulary (index → name, sorted).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<LabeledExample>,
    pub labels: Vec<String>,
}

/// Lowercase, then split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase().split_whitespace().map(str::to_owned).collect()
}

fn parse_lines(text: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let Some((label, body)) = line.split_once('\t') else {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "missing TAB between label and text".into(),
            });
        };
        let label = label.trim();
        if label.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "empty label".into(),
            });
        }
        let tokens = tokenize(body);
        if tokens.is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: "no tokens".into(),
            });
        }
        rows.push((label.to_owned(), tokens));
    }
    if rows.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(rows)
}

/// Parses `label<TAB>text` lines; labels are indexed in lexicographic order.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let rows = parse_lines(text)?;
    let labels: Vec<String> = rows
        .iter()
        .map(|(l, _)| l.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let examples = rows
        .into_iter()
        .map(|(l, tokens)| LabeledExample {
            label: labels.binary_search(&l).expect("label collected above"),
            tokens,
        })
        .collect();
    Ok(Dataset { examples, labels })
}

/// Parses against an existing label vocabulary (e.g. a trained model's).
pub fn parse_dataset_with_labels(text: &str, labels: &[String]) -> Result<Vec<LabeledExample>> {
    parse_lines(text)?
        .into_iter()
        .map(|(l, tokens)| {
            let label = labels.iter().position(|x| *x == l).ok_or(Error::UnknownLabel(l))?;
            Ok(LabeledExample { label, tokens })
        })
        .collect()
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_dataset(&read(path.as_ref())?)
}

pub fn load_dataset_with_labels(path: impl AsRef<Path>, labels: &[String]) -> Result<Vec<LabeledExample>> {
    parse_dataset_with_labels(&read(path.as_ref())?, labels)
}

/// 16 for short texts (mean length ≤ 16 tokens), otherwise 128; rounded up to a multiple of `k`.
pub fn default_max_len(examples: &[LabeledExample], group_factor: usize) -> usize {
    let mean = examples.iter().map(|e| e.tokens.len()).sum::<usize>() as f64 / examples.len().max(1) as f64;
    let base = if mean <= SHORT_MAX_LEN as f64 {
        SHORT_MAX_LEN
    } else {
        LONG_MAX_LEN
    };
    base.div_ceil(group_factor) * group_factor
}

/// Padded rows and token mask for one example: the first `max_len` tokens
/// are projected, the rest of the rows are zero and masked.
pub fn encode_tokens<S: AsRef<str>>(
    tokens: &[S],
    projector: &Projector,
    max_len: usize,
) -> Result<(Vec<BitProjection>, Vec<bool>)> {
    let kept = &tokens[..tokens.len().min(max_len)];
    let mut rows = projector.project_sequence(kept)?;
    let mut mask = vec![true; rows.len()];
    rows.resize(max_len, BitProjection::zeros(projector.config().bits()));
    mask.resize(max_len, false);
    Ok((rows, mask))
}

/// `B × N_max` projection rows, masks and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub projections: Vec<Vec<BitProjection>>,
    pub token_masks: Vec<Vec<bool>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Seeded shuffle, then consecutive batches; the last one may be short.
pub fn make_batches(
    examples: &[LabeledExample],
    projector: &Projector,
    config: &ModelConfig,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<Vec<Batch>> {
    if examples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if batch_size == 0 {
        return Err(Error::InvalidConfig("batch size must be positive".into()));
    }
    if projector.config().bits() != config.projection_bits {
        return Err(Error::ShapeMismatch(format!(
            "projector makes {} bits, model expects {}",
            projector.config().bits(),
            config.projection_bits
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle_seed));
    order
        .chunks(batch_size)
        .map(|chunk| {
            let mut batch = Batch {
                projections: Vec::with_capacity(chunk.len()),
                token_masks: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
            };
            for &i in chunk {
                let ex = &examples[i];
                if ex.label >= config.classes {
                    return Err(Error::LabelOutOfRange {
                        label: ex.label,
                        classes: config.classes,
                    });
                }
                let (rows, mask) = encode_tokens(&ex.tokens, projector, config.max_len)?;
                batch.projections.push(rows);
                batch.token_masks.push(mask);
                batch.labels.push(ex.label);
            }
            Ok(batch)
        })
        .collect()
}

/// Seeded toy corpus: each class draws half its tokens from a private word
/// list and the rest from a shared filler list.
pub mod synthetic {
    use super::*;

    const NAMES: [&str; 8] = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"];

    fn word(rng: &mut ChaCha8Rng) -> String {
        const CONS: &[u8] = b"bcdfghjklmnprstvz";
        const VOW: &[u8] = b"aeiou";
        let syllables = rng.gen_range(2..=4);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(CONS[rng.gen_range(0..CONS.len())] as char);
            w.push(VOW[rng.gen_range(0..VOW.len())] as char);
        }
        w
    }

    pub fn label_name(class: usize) -> String {
        NAMES
            .get(class)
            .map_or_else(|| format!("class{class}"), |s| (*s).to_owned())
    }

    /// `(label, text)` pairs, classes assigned round-robin.
    pub fn generate(n: usize, classes: usize, seed: u64) -> Vec<(String, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vocab: Vec<Vec<String>> = (0..classes)
            .map(|_| (0..12).map(|_| word(&mut rng)).collect())
            .collect();
        let filler: Vec<String> = (0..30).map(|_| word(&mut rng)).collect();
        (0..n)
            .map(|i| {
                let class = i % classes;
                let len = rng.gen_range(3..=10);
                let tokens: Vec<&str> = (0..len)
                    .map(|_| {
                        if rng.gen_bool(0.5) {
                            vocab[class][rng.gen_range(0..vocab[class].len())].as_str()
                        } else {
                            filler[rng.gen_range(0..filler.len())].as_str()
                        }
                    })
                    .collect();
                (label_name(class), tokens.join(" "))
            })
            .collect()
    }

    pub fn to_tsv(rows: &[(String, String)]) -> String {
        rows.iter().map(|(l, t)| format!("{l}\t{t}\n")).collect()
    }

    pub fn dataset(n: usize, classes: usize, seed: u64) -> Dataset {
        parse_dataset(&to_tsv(&generate(n, classes, seed))).expect("generated corpus is well formed")
    }

    pub fn write_tsv(path: impl AsRef<Path>, rows: &[(String, String)]) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(to_tsv(rows).as_bytes()).map_err(|e| Error::io(path, e))
    }
}
