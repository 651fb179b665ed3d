use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use proformer::data::tokenize;
use proformer::model::{ModelConfig, ModelParams};
use proformer::model_io::SavedModel;
use proformer::projection::{project_word, ProjectionConfig};
use proformer::trainer::predict;
use proformer_ffi::*;

fn tiny_model() -> SavedModel {
    let config = ModelConfig {
        projection_bits: 70,
        hidden: 16,
        layers: 1,
        heads: 2,
        group_factor: 2,
        max_len: 8,
        classes: 3,
        ffn_dim: 16,
        dropout: 0.0,
    };
    SavedModel::new(
        config,
        ProjectionConfig::new(70, 5, 1, 9).unwrap(),
        ModelParams::init(&config, 2).unwrap(),
        vec!["neg".into(), "neu".into(), "pos".into()],
    )
    .unwrap()
}

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn load(path: &Path) -> *mut PfModel {
    let mut m = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    assert_eq!(unsafe { pf_model_load(p.as_ptr(), &mut m) }, PfStatus::Ok);
    assert!(!m.is_null());
    m
}

fn last_error() -> String {
    let p = pf_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_owned()
}

#[test]
fn predictions_match_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pfmr");
    let saved = tiny_model();
    saved.save(&path).unwrap();
    let m = load(&path);
    unsafe {
        assert_eq!(pf_model_num_classes(m), 3);
        assert_eq!(CStr::from_ptr(pf_model_class_label(m, 2)).to_str().unwrap(), "pos");
        assert!(pf_model_class_label(m, 3).is_null());

        let mut cfg = std::mem::zeroed::<PfModelConfig>();
        assert_eq!(pf_model_config(m, &mut cfg), PfStatus::Ok);
        assert_eq!(ModelConfig::from(&cfg), saved.config);

        let projector = saved.projector();
        for text in ["the movie was great", "Terrible, awful plot", "meh"] {
            let (class, conf) = predict(&saved.params, &saved.config, &projector, &tokenize(text)).unwrap();
            let (mut got_class, mut got_conf) = (usize::MAX, 0.0);
            let t = c(text);
            assert_eq!(
                pf_model_predict(m, t.as_ptr(), &mut got_class, &mut got_conf),
                PfStatus::Ok
            );
            assert_eq!((got_class, got_conf), (class, conf));

            let mut logits = [0f32; 3];
            assert_eq!(pf_model_logits(m, t.as_ptr(), logits.as_mut_ptr(), 3), PfStatus::Ok);
            let best = (0..3).fold(0, |b, i| if logits[i] > logits[b] { i } else { b });
            assert_eq!(best, class);
        }
        let mut short = [0f32; 2];
        let t = c("x");
        assert_eq!(
            pf_model_logits(m, t.as_ptr(), short.as_mut_ptr(), 2),
            PfStatus::BufferTooSmall
        );
        pf_model_free(m);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.pfmr");
    let mut bytes = tiny_model().to_bytes().unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 1;
    std::fs::write(&path, &bytes).unwrap();
    let mut m = ptr::null_mut();
    let p = c(path.to_str().unwrap());
    unsafe {
        assert_eq!(pf_model_load(p.as_ptr(), &mut m), PfStatus::CrcMismatch);
        assert!(m.is_null());
        assert!(last_error().contains("checksum"), "{}", last_error());
        let name = CStr::from_ptr(pf_status_name(PfStatus::CrcMismatch as i32));
        assert_eq!(name.to_str().unwrap(), "crc-mismatch");
        assert_eq!(CStr::from_ptr(pf_status_name(12345)).to_str().unwrap(), "unknown");

        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert_eq!(pf_model_load(p.as_ptr(), &mut m), PfStatus::Truncated);
        let missing = c("/definitely/missing.pfmr");
        assert_eq!(pf_model_load(missing.as_ptr(), &mut m), PfStatus::Io);
        assert_eq!(pf_model_load(ptr::null(), &mut m), PfStatus::NullPointer);
        assert_eq!(pf_model_load(p.as_ptr(), ptr::null_mut()), PfStatus::NullPointer);

        tiny_model().save(&path).unwrap();
        let m = load(&path);
        assert!(pf_last_error_message().is_null());
        let (mut class, mut conf) = (0, 0.0);
        let blank = c("   ");
        assert_eq!(
            pf_model_predict(m, blank.as_ptr(), &mut class, &mut conf),
            PfStatus::EmptyInput
        );
        let bad = [0xffu8, 0];
        assert_eq!(
            pf_model_predict(m, bad.as_ptr().cast(), &mut class, &mut conf),
            PfStatus::InvalidUtf8
        );
        pf_model_free(m);
        pf_model_free(ptr::null_mut());
    }
}

#[test]
fn projector_matches_library_bits() {
    let mut p = ptr::null_mut();
    unsafe {
        assert_eq!(pf_projector_new(130, 5, 1, 42, &mut p), PfStatus::Ok);
        assert_eq!(pf_projector_words(p), 3);
        let cfg = ProjectionConfig::new(130, 5, 1, 42).unwrap();
        for token in ["flight", "boston", "x"] {
            let mut words = [0u64; 3];
            let t = c(token);
            assert_eq!(pf_projector_project(p, t.as_ptr(), words.as_mut_ptr(), 3), PfStatus::Ok);
            assert_eq!(&words[..], project_word(token, &cfg).unwrap().words());
        }
        let mut one = [0u64; 1];
        let t = c("flight");
        assert_eq!(
            pf_projector_project(p, t.as_ptr(), one.as_mut_ptr(), 1),
            PfStatus::BufferTooSmall
        );
        let empty = c("");
        assert_eq!(
            pf_projector_project(p, empty.as_ptr(), one.as_mut_ptr(), 3),
            PfStatus::EmptyToken
        );
        pf_projector_free(p);

        let mut q = ptr::null_mut();
        assert_eq!(pf_projector_new(0, 5, 1, 42, &mut q), PfStatus::InvalidConfig);
        assert!(q.is_null());
    }
}

#[test]
fn report_json_round_trips() {
    let cfg = PfModelConfig {
        projection_bits: 420,
        hidden: 768,
        layers: 2,
        heads: 12,
        group_factor: 4,
        max_len: 64,
        classes: 21,
        ffn_dim: 768,
        dropout: 0.1,
    };
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(pf_report_json(&cfg, 64, &mut out), PfStatus::Ok);
        let v: serde_json::Value = serde_json::from_str(CStr::from_ptr(out).to_str().unwrap()).unwrap();
        pf_string_free(out);
        assert_eq!(v["projection_bytes"], 1680);
        assert_eq!(v["encoder_score_reduction_vs_k1"], 16.0);
        let bad = PfModelConfig { heads: 7, ..cfg };
        assert_eq!(pf_report_json(&bad, 64, &mut out), PfStatus::InvalidConfig);
        assert!(out.is_null());
    }
}
