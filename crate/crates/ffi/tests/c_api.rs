use std::ffi::{CStr, CString};
use std::ptr;

use scvfp_ffi::*;

fn last_error() -> String {
    let p = scvfp_last_error_message();
    assert!(!p.is_null());
    let s = unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned();
    unsafe { scvfp_string_free(p) };
    s
}

fn tiny_model(seed: u64) -> *mut ScvfpModel {
    let cfg = CString::new(r#"{"model":{"d":8,"seq_len":3,"heads":2,"blocks":1,"lambda":0.5}}"#).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { scvfp_model_new(cfg.as_ptr(), seed, &mut m) }, ScvfpStatus::Ok);
    assert!(!m.is_null());
    m
}

fn window(rows: usize, cols: usize) -> Vec<f64> {
    (0..rows * cols).map(|i| ((i * 37) % 11) as f64 / 5.0 - 1.0).collect()
}

#[test]
fn version_is_crate_version() {
    let v = unsafe { CStr::from_ptr(scvfp_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn model_lifecycle_and_prediction() {
    let m = tiny_model(3);
    let (mut d, mut len) = (0usize, 0usize);
    assert_eq!(unsafe { scvfp_model_dims(m, &mut d, &mut len) }, ScvfpStatus::Ok);
    assert_eq!((d, len), (8, 3));
    let mut count = 0u64;
    assert_eq!(unsafe { scvfp_model_param_count(m, &mut count) }, ScvfpStatus::Ok);
    assert_eq!(count, 1000);

    let w = window(3, 8);
    let mut pred = vec![0.0; 8];
    let st = unsafe { scvfp_model_predict_next(m, w.as_ptr(), 3, 8, pred.as_mut_ptr(), pred.len()) };
    assert_eq!(st, ScvfpStatus::Ok);
    assert!(pred.iter().all(|v| v.is_finite()));

    let mut roll = vec![0.0; 5 * 8];
    let st = unsafe { scvfp_model_rollout(m, w.as_ptr(), 3, 8, 5, roll.as_mut_ptr(), roll.len()) };
    assert_eq!(st, ScvfpStatus::Ok);
    assert_eq!(&roll[..8], pred.as_slice());
    unsafe { scvfp_model_free(m) };
}

#[test]
fn save_then_load_predicts_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.ckpt").to_str().unwrap()).unwrap();
    let m = tiny_model(9);
    assert_eq!(unsafe { scvfp_model_save(m, path.as_ptr()) }, ScvfpStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { scvfp_model_load(path.as_ptr(), &mut loaded) }, ScvfpStatus::Ok);
    let w = window(3, 8);
    let (mut a, mut b) = (vec![0.0; 8], vec![0.0; 8]);
    unsafe {
        scvfp_model_predict_next(m, w.as_ptr(), 3, 8, a.as_mut_ptr(), 8);
        scvfp_model_predict_next(loaded, w.as_ptr(), 3, 8, b.as_mut_ptr(), 8);
        scvfp_model_free(m);
        scvfp_model_free(loaded);
    }
    assert_eq!(a, b);
}

#[test]
fn errors_carry_codes_and_messages() {
    let m = tiny_model(1);
    let w = window(3, 6);
    let mut out = vec![0.0; 8];
    let st = unsafe { scvfp_model_predict_next(m, w.as_ptr(), 3, 6, out.as_mut_ptr(), 8) };
    assert_eq!(st, ScvfpStatus::ShapeMismatch);
    assert!(last_error().contains("width"));

    let w = window(3, 8);
    let st = unsafe { scvfp_model_predict_next(m, w.as_ptr(), 3, 8, out.as_mut_ptr(), 4) };
    assert_eq!(st, ScvfpStatus::ShapeMismatch);

    let st = unsafe { scvfp_model_predict_next(ptr::null(), w.as_ptr(), 3, 8, out.as_mut_ptr(), 8) };
    assert_eq!(st, ScvfpStatus::NullPointer);
    unsafe { scvfp_model_free(m) };

    let bad = CString::new(r#"{"model":{"dd":8}}"#).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { scvfp_model_new(bad.as_ptr(), 1, &mut h) }, ScvfpStatus::Config);
    assert!(h.is_null());

    let missing = CString::new("/nonexistent/dir/x.ckpt").unwrap();
    assert_eq!(unsafe { scvfp_model_load(missing.as_ptr(), &mut h) }, ScvfpStatus::Io);

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"nope").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { scvfp_model_load(junk.as_ptr(), &mut h) }, ScvfpStatus::Format);

    let mut v = 0.0;
    assert_eq!(unsafe { scvfp_metric_psnr(0.0, &mut v) }, ScvfpStatus::UndefinedMetric);
    assert_eq!(unsafe { scvfp_metric_psnr(65025.0, &mut v) }, ScvfpStatus::Ok);
    assert_eq!(v, 0.0);
    assert!(scvfp_last_error_message().is_null());
}

#[test]
fn metric_functions() {
    let (e, f) = ([1.0, 0.0], [1.0, 1.0]);
    let mut v = 0.0;
    assert_eq!(unsafe { scvfp_embedding_mse(e.as_ptr(), f.as_ptr(), 2, &mut v) }, ScvfpStatus::Ok);
    assert_eq!(v, 1.0);
    assert_eq!(unsafe { scvfp_cosine_similarity(e.as_ptr(), f.as_ptr(), 2, &mut v) }, ScvfpStatus::Ok);
    assert!((v - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    assert_eq!(unsafe { scvfp_metric_psnr(79.81, &mut v) }, ScvfpStatus::Ok);
    assert!((v - 29.11).abs() < 0.01);
}
