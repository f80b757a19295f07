//! Exercises the C entry points the way a foreign binding would.

use bcl_ffi::*;
use std::ffi::{CStr, CString};

fn last_error() -> String {
    unsafe { CStr::from_ptr(bcl_last_error()).to_string_lossy().into_owned() }
}

#[test]
fn version_is_non_empty() {
    let v = unsafe { CStr::from_ptr(bcl_version()) };
    assert!(!v.to_bytes().is_empty());
}

#[test]
fn memtable_lifecycle_matches_core_semantics() {
    let mut handle: *mut BclMemTable = std::ptr::null_mut();
    let st = unsafe { bcl_memtable_new(3, 0.97, &mut handle) };
    assert_eq!(st, BclStatus::Ok);
    assert_eq!(unsafe { bcl_memtable_epoch(handle) }, -1);

    let losses = [1.0f64, 2.0, 3.0];
    assert_eq!(
        unsafe { bcl_memtable_record_epoch(handle, losses.as_ptr(), 3) },
        BclStatus::Ok
    );
    assert_eq!(unsafe { bcl_memtable_epoch(handle) }, 0);

    let mut scores = [0.0f64; 3];
    assert_eq!(
        unsafe { bcl_memtable_scores(handle, scores.as_mut_ptr(), 3) },
        BclStatus::Ok
    );
    assert_eq!(scores, [0.0, 0.5, 1.0]);

    // Save / load round trip through a temp file.
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("t.bin").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bcl_memtable_save(handle, path.as_ptr()) }, BclStatus::Ok);
    let mut loaded: *mut BclMemTable = std::ptr::null_mut();
    assert_eq!(
        unsafe { bcl_memtable_load(path.as_ptr(), 3, &mut loaded) },
        BclStatus::Ok
    );
    assert_eq!(unsafe { bcl_memtable_epoch(loaded) }, 0);
    // Wrong sample count is an error with a readable message.
    let mut bad: *mut BclMemTable = std::ptr::null_mut();
    assert_ne!(
        unsafe { bcl_memtable_load(path.as_ptr(), 4, &mut bad) },
        BclStatus::Ok
    );
    assert!(last_error().contains("samples"), "{}", last_error());

    unsafe {
        bcl_memtable_free(handle);
        bcl_memtable_free(loaded);
    }
}

#[test]
fn record_epoch_validates_losses() {
    let mut handle: *mut BclMemTable = std::ptr::null_mut();
    unsafe { bcl_memtable_new(2, 0.9, &mut handle) };
    let bad = [1.0f64, f64::NAN];
    let st = unsafe { bcl_memtable_record_epoch(handle, bad.as_ptr(), 2) };
    assert_eq!(st, BclStatus::RuntimeError);
    assert!(last_error().contains("non-finite"));
    unsafe { bcl_memtable_free(handle) };
}

#[test]
fn long_tailed_counts_closed_form() {
    let mut counts = [0usize; 10];
    let st = unsafe { bcl_long_tailed_counts(100, 10, 10.0, counts.as_mut_ptr()) };
    assert_eq!(st, BclStatus::Ok);
    assert_eq!(counts, [100, 77, 60, 46, 36, 28, 22, 17, 13, 10]);
    assert_eq!(
        unsafe { bcl_long_tailed_counts(100, 10, 0.5, counts.as_mut_ptr()) },
        BclStatus::InvalidArgument
    );
}

#[test]
fn boosted_augment_zero_score_is_identity_and_deterministic() {
    let mut px: Vec<u8> = (0..16 * 16 * 3).map(|i| (i % 255) as u8).collect();
    let orig = px.clone();
    let st = unsafe { bcl_boosted_augment(px.as_mut_ptr(), 16, 16, 0.0, 2, 9, 4, 1, 0) };
    assert_eq!(st, BclStatus::Ok);
    assert_eq!(px, orig);

    let mut a = orig.clone();
    let mut b = orig.clone();
    unsafe {
        bcl_boosted_augment(a.as_mut_ptr(), 16, 16, 1.0, 2, 9, 4, 1, 0);
        bcl_boosted_augment(b.as_mut_ptr(), 16, 16, 1.0, 2, 9, 4, 1, 0);
    }
    assert_eq!(a, b);
    assert_eq!(
        unsafe { bcl_boosted_augment(a.as_mut_ptr(), 16, 16, 1.5, 2, 9, 4, 1, 0) },
        BclStatus::RuntimeError
    );
}

#[test]
fn run_pretrain_from_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let ds = bcl_core::dataio::synth_balanced(3, 12, 8, 8, 1);
    let (lt, holdout) = bcl_core::dataio::make_long_tailed(&ds, 3.0, 1, Some(8)).unwrap();
    let train = dir.path().join("train.bin");
    let hold = dir.path().join("holdout.bin");
    bcl_core::dataio::save_dataset(&train, &lt).unwrap();
    bcl_core::dataio::save_dataset(&hold, &holdout).unwrap();
    let out = dir.path().join("run");
    let cfg = serde_json::json!({
        "method": "bcl-i",
        "data": {
            "train_path": train, "holdout_path": hold,
            "height": 8, "width": 8, "classes": 3
        },
        "model": {"channels": [4, 8], "hidden_dim": 8, "embed_dim": 4},
        "train": {"epochs": 2, "batch_size": 8, "lr_init": 0.05, "lr_final": 0.001},
        "seed": 11,
        "out_dir": out,
        "deterministic": true
    });
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&cfg).unwrap()).unwrap();
    let c_path = CString::new(cfg_path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { bcl_run_pretrain(c_path.as_ptr()) }, BclStatus::Ok);
    assert!(out.join("metrics.csv").exists());
    assert!(out.join("ckpt-final.bin").exists());

    let missing = CString::new("/nonexistent/cfg.json").unwrap();
    assert_eq!(
        unsafe { bcl_run_pretrain(missing.as_ptr()) },
        BclStatus::InvalidArgument
    );
}
