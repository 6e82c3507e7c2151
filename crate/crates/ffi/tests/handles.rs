use std::ffi::{CStr, CString};
use std::ptr;

use varfuse_ffi::*;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(vf_last_error()) }.to_string_lossy().into_owned()
}

#[test]
fn null_handles_are_rejected() {
    unsafe {
        assert_eq!(vf_config_set(ptr::null_mut(), c("seed").as_ptr(), c("1").as_ptr()), VfStatus::NullPointer);
        assert!(last_error().contains("cfg"));
        assert_eq!(vf_config_new(ptr::null(), ptr::null_mut()), VfStatus::NullPointer);
        assert_eq!(vf_dataset_write(ptr::null(), c("x").as_ptr()), VfStatus::NullPointer);
        vf_dataset_free(ptr::null_mut());
        vf_model_free(ptr::null_mut());
    }
}

#[test]
fn config_errors_leave_the_handle_unchanged() {
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(vf_config_new(ptr::null(), &mut cfg), VfStatus::Ok);
        assert_eq!(last_error(), "");
        assert_eq!(vf_config_set(cfg, c("lr").as_ptr(), c("-1").as_ptr()), VfStatus::Config);
        assert!(!last_error().is_empty());
        assert_eq!(vf_config_set(cfg, c("colour").as_ptr(), c("red").as_ptr()), VfStatus::Config);
        let bad = [0xffu8, 0];
        assert_eq!(vf_config_set(cfg, bad.as_ptr().cast(), c("1").as_ptr()), VfStatus::InvalidUtf8);
        assert_eq!(vf_config_load(cfg, c("/no/such/file").as_ptr()), VfStatus::Config);
        vf_config_free(cfg);
    }
}

#[test]
fn dataset_round_trip_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = c(dir.path().join("d.mmt").to_str().unwrap());
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(vf_dataset_synthetic(3, 12, 0.1, &mut ds), VfStatus::Ok);
        assert_eq!(vf_dataset_write(ds, path.as_ptr()), VfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(vf_dataset_read(path.as_ptr(), &mut back), VfStatus::Ok);
        let (mut n, mut t, mut i, mut k) = (0, 0, 0, 0);
        assert_eq!(vf_dataset_shape(back, &mut n, &mut t, &mut i, &mut k), VfStatus::Ok);
        assert_eq!((n, t, i, k), (12, 300, 4096, 23));
        assert_eq!(vf_dataset_shape(back, &mut n, ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), VfStatus::Ok);
        vf_dataset_free(ds);
        vf_dataset_free(back);
        std::fs::write(dir.path().join("bad.mmt"), b"NOPE").unwrap();
        let mut bad = ptr::null_mut();
        let bad_path = c(dir.path().join("bad.mmt").to_str().unwrap());
        assert_eq!(vf_dataset_read(bad_path.as_ptr(), &mut bad), VfStatus::Format);
        assert!(bad.is_null());
    }
}

#[test]
fn trained_model_predicts_and_evaluates() {
    let dir = tempfile::tempdir().unwrap();
    let out = c(dir.path().to_str().unwrap());
    unsafe {
        let mut cfg = ptr::null_mut();
        assert_eq!(vf_config_new(c("synthetic").as_ptr(), &mut cfg), VfStatus::Ok);
        for (k, v) in [("image_dim", "4096"), ("hidden_width", "4"), ("classifier_width", "4"), ("epochs", "1"), ("cycles", "1"), ("synthetic_records", "30")] {
            assert_eq!(vf_config_set(cfg, c(k).as_ptr(), c(v).as_ptr()), VfStatus::Ok, "{k}");
        }
        let mut scores = VfScores::default();
        assert_eq!(vf_train(cfg, c("t").as_ptr(), out.as_ptr(), &mut scores), VfStatus::Ok, "{}", last_error());
        let ck = c(dir.path().join("cycle0.ckpt").to_str().unwrap());
        let mut model = ptr::null_mut();
        assert_eq!(vf_model_load(ck.as_ptr(), &mut model), VfStatus::Ok);
        let mut ds = ptr::null_mut();
        assert_eq!(vf_dataset_synthetic(9, 10, 0.1, &mut ds), VfStatus::Ok);
        let mut eval = VfScores::default();
        assert_eq!(vf_model_evaluate(model, ds, 0.5, &mut eval), VfStatus::Ok);
        assert!((0.0..=1.0).contains(&eval.samples));
        let text = vec![0.1f32; 300];
        let image = vec![0.2f32; 4096];
        let mut logits = vec![f64::NAN; 23];
        assert_eq!(vf_model_predict(model, text.as_ptr(), image.as_ptr(), 1, logits.as_mut_ptr()), VfStatus::Ok);
        assert!(logits.iter().all(|v| v.is_finite()));
        vf_dataset_free(ds);
        vf_model_free(model);
        vf_config_free(cfg);
    }
}

#[test]
fn gradcheck_reports_counts() {
    let (mut checks, mut failed) = (0, 99);
    assert_eq!(unsafe { vf_gradcheck(0, &mut checks, &mut failed) }, VfStatus::Ok);
    assert!(checks > 30);
    assert_eq!(failed, 0);
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(vf_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
