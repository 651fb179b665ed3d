//! Embedding-free word representations.
//!
//! Every token is mapped to a `T`-bit vector computed on the fly from hashed
//! character features, so the only stored state is one 32-bit seed per bit.
//!
//! Hashing scheme (stable across platforms and process restarts):
//!
//! * `h = xxh3_64(feature_utf8, seed = global_seed)` for each tagged feature string;
//! * `sign_t = +1` if `popcount(xxh3_64(h.to_le_bytes(), seed = bit_seeds[t]))` is even, else `-1`;
//! * bit `t` is set iff `sum_f sign_t(f) >= 0`.
//!
//! Bits are packed little-endian into `u64` words: bit `t` lives in word
//! `t / 64` at position `t % 64`.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xxhash_rust::xxh3::xxh3_64_with_seed;

use crate::error::{Error, Result};

pub const DEFAULT_BITS: usize = 420;
pub const DEFAULT_MAX_NGRAM: usize = 5;
pub const DEFAULT_SKIP_DISTANCE: usize = 1;

const BOUNDARY: char = '#';
const NGRAM_TAG: &str = "ngram:";
const SKIP_TAG: &str = "skip:";

/// Parameters of the projection. The `bit_seeds` are the only stored state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProjectionConfig {
    bits: usize,
    max_ngram: usize,
    skip_distance: usize,
    global_seed: u64,
    bit_seeds: Vec<u32>,
}

impl ProjectionConfig {
    pub fn new(bits: usize, max_ngram: usize, skip_distance: usize, global_seed: u64) -> Result<Self> {
        let bit_seeds = derive_bit_seeds(bits, global_seed);
        Self::from_parts(bits, max_ngram, skip_distance, global_seed, bit_seeds)
    }

    /// T=420, n-grams up to 5 characters, skip gap 1.
    pub fn paper_default(global_seed: u64) -> Self {
        Self::new(DEFAULT_BITS, DEFAULT_MAX_NGRAM, DEFAULT_SKIP_DISTANCE, global_seed)
            .expect("default projection config is valid")
    }

    /// Rebuilds a config from stored parts; the seeds must match what
    /// `global_seed` derives.
    pub fn from_parts(
        bits: usize,
        max_ngram: usize,
        skip_distance: usize,
        global_seed: u64,
        bit_seeds: Vec<u32>,
    ) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidConfig("projection bit-width must be positive".into()));
        }
        if max_ngram == 0 {
            return Err(Error::InvalidConfig("max_ngram must be positive".into()));
        }
        if bit_seeds.len() != bits {
            return Err(Error::InvalidConfig(format!(
                "expected {bits} bit seeds, got {}",
                bit_seeds.len()
            )));
        }
        if bit_seeds != derive_bit_seeds(bits, global_seed) {
            return Err(Error::InvalidConfig(
                "bit seeds are not derived from the global seed".into(),
            ));
        }
        Ok(Self {
            bits,
            max_ngram,
            skip_distance,
            global_seed,
            bit_seeds,
        })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn max_ngram(&self) -> usize {
        self.max_ngram
    }

    pub fn skip_distance(&self) -> usize {
        self.skip_distance
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn bit_seeds(&self) -> &[u32] {
        &self.bit_seeds
    }

    /// Hash of every field; used to key memoized projections.
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(32 + 4 * self.bits);
        bytes.extend_from_slice(&(self.bits as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.max_ngram as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.skip_distance as u64).to_le_bytes());
        bytes.extend_from_slice(&self.global_seed.to_le_bytes());
        for s in &self.bit_seeds {
            bytes.extend_from_slice(&s.to_le_bytes());
        }
        xxh3_64_with_seed(&bytes, 0)
    }
}

fn derive_bit_seeds(bits: usize, global_seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(global_seed);
    (0..bits).map(|_| rng.next_u32()).collect()
}

/// Stored parameter bytes of the projection layer: one `u32` seed per bit.
pub fn projection_footprint(config: &ProjectionConfig) -> usize {
    4 * config.bits
}

/// A packed `T`-bit word representation.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitProjection {
    len: usize,
    words: Vec<u64>,
}

impl BitProjection {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    /// Builds from packed words; tail bits beyond `len` must be zero.
    pub fn from_words(len: usize, words: Vec<u64>) -> Result<Self> {
        if words.len() != len.div_ceil(64) {
            return Err(Error::ShapeMismatch(format!(
                "{len} bits need {} words, got {}",
                len.div_ceil(64),
                words.len()
            )));
        }
        let tail = len % 64;
        if tail != 0 && words[words.len() - 1] >> tail != 0 {
            return Err(Error::ShapeMismatch("nonzero tail bits".into()));
        }
        Ok(Self { len, words })
    }

    pub fn from_bits(bits: &[bool]) -> Self {
        let mut p = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            p.set(i, b);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        (self.words[i / 64] >> (i % 64)) & 1 == 1
    }

    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit index {i} out of range {}", self.len);
        let mask = 1u64 << (i % 64);
        if value {
            self.words[i / 64] |= mask;
        } else {
            self.words[i / 64] &= !mask;
        }
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn hamming(&self, other: &Self) -> usize {
        assert_eq!(self.len, other.len);
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = bool> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }
}

/// Multiset of tagged feature strings (`"ngram:..."` or `"skip:..."`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FeatureSet {
    features: Vec<String>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.features.iter().map(String::as_str)
    }

    /// Multiplicity of each distinct feature.
    pub fn counts(&self) -> BTreeMap<&str, usize> {
        let mut m = BTreeMap::new();
        for f in &self.features {
            *m.entry(f.as_str()).or_insert(0) += 1;
        }
        m
    }
}

/// Character n-grams (1..=max_ngram) and skip-grams over `#token#`.
pub fn extract_features(token: &str, config: &ProjectionConfig) -> Result<FeatureSet> {
    let token = token.trim();
    if token.is_empty() {
        return Err(Error::EmptyToken { index: None });
    }
    let mut padded = Vec::with_capacity(token.chars().count() + 2);
    padded.push(BOUNDARY);
    padded.extend(token.chars());
    padded.push(BOUNDARY);

    let mut features = Vec::new();
    for n in 1..=config.max_ngram.min(padded.len()) {
        for window in padded.windows(n) {
            let mut f = String::with_capacity(NGRAM_TAG.len() + 4 * n);
            f.push_str(NGRAM_TAG);
            f.extend(window);
            features.push(f);
        }
    }
    let gap = config.skip_distance + 1;
    for i in 0..padded.len().saturating_sub(gap) {
        let mut f = String::with_capacity(SKIP_TAG.len() + 8);
        f.push_str(SKIP_TAG);
        f.push(padded[i]);
        f.push(padded[i + gap]);
        features.push(f);
    }
    Ok(FeatureSet { features })
}

/// Projects a single token to `T` bits. Pure function of `(token, config)`.
pub fn project_word(token: &str, config: &ProjectionConfig) -> Result<BitProjection> {
    let features = extract_features(token, config)?;
    let mut votes = vec![0i32; config.bits];
    for f in features.iter() {
        let h = xxh3_64_with_seed(f.as_bytes(), config.global_seed).to_le_bytes();
        for (vote, &seed) in votes.iter_mut().zip(&config.bit_seeds) {
            if xxh3_64_with_seed(&h, u64::from(seed)).count_ones().is_multiple_of(2) {
                *vote += 1;
            } else {
                *vote -= 1;
            }
        }
    }
    let mut out = BitProjection::zeros(config.bits);
    for (t, &v) in votes.iter().enumerate() {
        if v >= 0 {
            out.set(t, true);
        }
    }
    Ok(out)
}

/// Projects every token of a sequence; row `i` is `project_word(tokens[i])`.
pub fn project_sequence<S: AsRef<str>>(tokens: &[S], config: &ProjectionConfig) -> Result<Vec<BitProjection>> {
    tokens
        .iter()
        .enumerate()
        .map(|(i, t)| {
            project_word(t.as_ref(), config).map_err(|e| match e {
                Error::EmptyToken { .. } => Error::EmptyToken { index: Some(i) },
                other => other,
            })
        })
        .collect()
}

/// Projection with a read-through memo cache keyed by `(config fingerprint, token)`.
///
/// Safe to share between threads; outputs never depend on cache state.
#[derive(Debug)]
pub struct Projector {
    config: ProjectionConfig,
    fingerprint: u64,
    cache: Option<Mutex<HashMap<(u64, String), BitProjection>>>,
    computed: AtomicUsize,
}

impl Projector {
    pub fn new(config: ProjectionConfig) -> Self {
        Self::with_cache(config, true)
    }

    pub fn with_cache(config: ProjectionConfig, cached: bool) -> Self {
        Self {
            fingerprint: config.fingerprint(),
            config,
            cache: cached.then(|| Mutex::new(HashMap::new())),
            computed: AtomicUsize::new(0),
        }
    }

    pub fn config(&self) -> &ProjectionConfig {
        &self.config
    }

    /// Number of times `project_word` actually ran.
    pub fn words_computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    pub fn project(&self, token: &str) -> Result<BitProjection> {
        let Some(cache) = &self.cache else {
            self.computed.fetch_add(1, Ordering::Relaxed);
            return project_word(token, &self.config);
        };
        let key = (self.fingerprint, token.to_owned());
        if let Some(hit) = cache.lock().expect("projection cache poisoned").get(&key) {
            return Ok(hit.clone());
        }
        self.computed.fetch_add(1, Ordering::Relaxed);
        let bits = project_word(token, &self.config)?;
        cache
            .lock()
            .expect("projection cache poisoned")
            .entry(key)
            .or_insert_with(|| bits.clone());
        Ok(bits)
    }

    pub fn project_sequence<S: AsRef<str>>(&self, tokens: &[S]) -> Result<Vec<BitProjection>> {
        tokens
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.project(t.as_ref()).map_err(|e| match e {
                    Error::EmptyToken { .. } => Error::EmptyToken { index: Some(i) },
                    other => other,
                })
            })
            .collect()
    }
}
