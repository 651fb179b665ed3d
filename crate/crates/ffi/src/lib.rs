//! C interface to proformer.
//!
//! Every fallible function returns a [`PfStatus`]. On failure a message is
//! kept per thread and can be read with [`pf_last_error_message`]. Strings
//! handed out by the library must be released with [`pf_string_free`];
//! borrowed strings (labels, status names) live as long as their owner.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use proformer::accounting::{build_report, REFERENCE_VOCAB};
use proformer::data::tokenize;
use proformer::model::ModelConfig;
use proformer::model_io::SavedModel;
use proformer::projection::{ProjectionConfig, Projector};
use proformer::trainer::predict;
use proformer::Error;

/// Result codes. Zero is success.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    BufferTooSmall = 3,
    EmptyToken = 10,
    EmptyInput = 11,
    InvalidConfig = 12,
    ShapeMismatch = 13,
    Io = 20,
    CrcMismatch = 21,
    VersionUnsupported = 22,
    Truncated = 23,
    BadMagic = 24,
    MalformedModel = 25,
    Other = 90,
    Panic = 99,
}

impl From<&Error> for PfStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::EmptyToken { .. } => Self::EmptyToken,
            Error::EmptyInput | Error::EmptyPool | Error::EmptyAttentionWindow => Self::EmptyInput,
            Error::InvalidConfig(_) => Self::InvalidConfig,
            Error::ShapeMismatch(_) | Error::LabelOutOfRange { .. } => Self::ShapeMismatch,
            Error::Io { .. } => Self::Io,
            Error::CrcMismatch { .. } => Self::CrcMismatch,
            Error::VersionUnsupported(_) => Self::VersionUnsupported,
            Error::Truncated => Self::Truncated,
            Error::BadMagic => Self::BadMagic,
            Error::MalformedModel(_) => Self::MalformedModel,
            _ => Self::Other,
        }
    }
}

/// A loaded model. Create with [`pf_model_load`], release with [`pf_model_free`].
pub struct PfModel {
    model: SavedModel,
    projector: Projector,
    labels: Vec<CString>,
}

/// A standalone token projector.
pub struct PfProjector {
    projector: Projector,
}

/// Architecture description, mirrored from the model configuration.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfModelConfig {
    pub projection_bits: u32,
    pub hidden: u32,
    pub layers: u32,
    pub heads: u32,
    pub group_factor: u32,
    pub max_len: u32,
    pub classes: u32,
    pub ffn_dim: u32,
    pub dropout: f64,
}

impl From<&ModelConfig> for PfModelConfig {
    fn from(c: &ModelConfig) -> Self {
        Self {
            projection_bits: c.projection_bits as u32,
            hidden: c.hidden as u32,
            layers: c.layers as u32,
            heads: c.heads as u32,
            group_factor: c.group_factor as u32,
            max_len: c.max_len as u32,
            classes: c.classes as u32,
            ffn_dim: c.ffn_dim as u32,
            dropout: c.dropout,
        }
    }
}

impl From<&PfModelConfig> for ModelConfig {
    fn from(c: &PfModelConfig) -> Self {
        Self {
            projection_bits: c.projection_bits as usize,
            hidden: c.hidden as usize,
            layers: c.layers as usize,
            heads: c.heads as usize,
            group_factor: c.group_factor as usize,
            max_len: c.max_len as usize,
            classes: c.classes as usize,
            ffn_dim: c.ffn_dim as usize,
            dropout: c.dropout,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Failure(PfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(PfStatus::from(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> PfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            PfStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(PfStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(PfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(PfStatus::Other, "string contains NUL".into()))
}

/// Message for the most recent failure on this thread, or null. Valid until
/// the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn pf_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

const STATUS_NAMES: &[(PfStatus, &CStr)] = &[
    (PfStatus::Ok, c"ok"),
    (PfStatus::NullPointer, c"null-pointer"),
    (PfStatus::InvalidUtf8, c"invalid-utf8"),
    (PfStatus::BufferTooSmall, c"buffer-too-small"),
    (PfStatus::EmptyToken, c"empty-token"),
    (PfStatus::EmptyInput, c"empty-input"),
    (PfStatus::InvalidConfig, c"invalid-config"),
    (PfStatus::ShapeMismatch, c"shape-mismatch"),
    (PfStatus::Io, c"io"),
    (PfStatus::CrcMismatch, c"crc-mismatch"),
    (PfStatus::VersionUnsupported, c"version-unsupported"),
    (PfStatus::Truncated, c"truncated"),
    (PfStatus::BadMagic, c"bad-magic"),
    (PfStatus::MalformedModel, c"malformed-model"),
    (PfStatus::Other, c"other"),
    (PfStatus::Panic, c"panic"),
];

/// Stable name of a status code, e.g. `"crc-mismatch"`; `"unknown"` for
/// values outside [`PfStatus`].
#[no_mangle]
pub extern "C" fn pf_status_name(status: i32) -> *const c_char {
    STATUS_NAMES
        .iter()
        .find(|(s, _)| *s as i32 == status)
        .map_or(c"unknown", |(_, name)| *name)
        .as_ptr()
}

/// Library version string.
#[no_mangle]
pub extern "C" fn pf_version() -> *const c_char {
    static VERSION: &CStr = match CStr::from_bytes_with_nul(concat!(env!("CARGO_PKG_VERSION"), "\0").as_bytes()) {
        Ok(v) => v,
        Err(_) => c"unknown",
    };
    VERSION.as_ptr()
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_load(path: *const c_char, out: *mut *mut PfModel) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let model = SavedModel::load(path)?;
        let labels = model
            .labels
            .iter()
            .map(|l| {
                CString::new(l.as_str()).map_err(|_| Failure(PfStatus::MalformedModel, "label contains NUL".into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let projector = model.projector();
        *out = Box::into_raw(Box::new(PfModel {
            model,
            projector,
            labels,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must come from [`pf_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_model_free(model: *mut PfModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Copies the model's architecture into `out`.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_config(model: *const PfModel, out: *mut PfModelConfig) -> PfStatus {
    guard(|| {
        let m = handle(model, "model")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = PfModelConfig::from(&m.model.config);
        Ok(())
    })
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_num_classes(model: *const PfModel) -> usize {
    model.as_ref().map_or(0, |m| m.labels.len())
}

/// Name of class `index`, owned by the model; null if out of range.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_model_class_label(model: *const PfModel, index: usize) -> *const c_char {
    model
        .as_ref()
        .and_then(|m| m.labels.get(index))
        .map_or(ptr::null(), |s| s.as_ptr())
}

/// Classifies `text`; writes the class index and its softmax probability.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, outputs writable.
#[no_mangle]
pub unsafe extern "C" fn pf_model_predict(
    model: *const PfModel,
    text: *const c_char,
    out_class: *mut usize,
    out_confidence: *mut f64,
) -> PfStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let text = str_arg(text, "text")?;
        if out_class.is_null() || out_confidence.is_null() {
            return Err(null("output"));
        }
        let (class, confidence) = predict(&m.model.params, &m.model.config, &m.projector, &tokenize(text))?;
        *out_class = class;
        *out_confidence = confidence;
        Ok(())
    })
}

/// Writes the raw logits for `text` into `out[0..classes]`.
///
/// # Safety
/// `model` must be a live handle, `text` NUL-terminated, `out` valid for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn pf_model_logits(
    model: *const PfModel,
    text: *const c_char,
    out: *mut f32,
    len: usize,
) -> PfStatus {
    guard(|| {
        let m = handle(model, "model")?;
        let text = str_arg(text, "text")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let classes = m.model.config.classes;
        if len < classes {
            return Err(Failure(
                PfStatus::BufferTooSmall,
                format!("need {classes} floats, got {len}"),
            ));
        }
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(Error::EmptyInput.into());
        }
        let (rows, mask) = proformer::data::encode_tokens(&tokens, &m.projector, m.model.config.max_len)?;
        let logits = m.model.params.forward(&m.model.config, &rows, &mask)?.logits;
        std::slice::from_raw_parts_mut(out, classes).copy_from_slice(&logits);
        Ok(())
    })
}

/// Footprint and compute report for `config` at sequence length `seq_len`,
/// as a JSON string the caller frees with [`pf_string_free`].
///
/// # Safety
/// `config` must be readable; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn pf_report_json(
    config: *const PfModelConfig,
    seq_len: usize,
    out: *mut *mut c_char,
) -> PfStatus {
    guard(|| {
        let c = ModelConfig::from(handle(config, "config")?);
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let report = build_report(&c, seq_len, REFERENCE_VOCAB, c.hidden as u64)?;
        *out = owned_string(serde_json::to_string(&report).expect("report serializes"))?;
        Ok(())
    })
}

/// Creates a projector for `bits`-bit token signatures.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn pf_projector_new(
    bits: usize,
    max_ngram: usize,
    skip_distance: usize,
    seed: u64,
    out: *mut *mut PfProjector,
) -> PfStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let config = ProjectionConfig::new(bits, max_ngram, skip_distance, seed)?;
        *out = Box::into_raw(Box::new(PfProjector {
            projector: Projector::new(config),
        }));
        Ok(())
    })
}

/// Releases a projector. Null is ignored.
///
/// # Safety
/// `projector` must come from [`pf_projector_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn pf_projector_free(projector: *mut PfProjector) {
    if !projector.is_null() {
        drop(Box::from_raw(projector));
    }
}

/// Number of 64-bit words in one projection, or 0 for a null handle.
///
/// # Safety
/// `projector` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pf_projector_words(projector: *const PfProjector) -> usize {
    projector
        .as_ref()
        .map_or(0, |p| p.projector.config().bits().div_ceil(64))
}

/// Projects one token. Bit `i` is bit `i % 64` of word `i / 64`.
///
/// # Safety
/// `projector` must be a live handle, `token` NUL-terminated, `out` valid for `len` words.
#[no_mangle]
pub unsafe extern "C" fn pf_projector_project(
    projector: *const PfProjector,
    token: *const c_char,
    out: *mut u64,
    len: usize,
) -> PfStatus {
    guard(|| {
        let p = handle(projector, "projector")?;
        let token = str_arg(token, "token")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let bits = p.projector.project(token)?;
        let words = bits.words();
        if len < words.len() {
            return Err(Failure(
                PfStatus::BufferTooSmall,
                format!("need {} words, got {len}", words.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, words.len()).copy_from_slice(words);
        Ok(())
    })
}
