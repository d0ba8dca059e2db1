use std::ffi::{c_char, CStr, CString};
use std::ptr;

use avssl_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    unsafe {
        avssl_last_error_message(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

#[test]
fn cer_and_errors() {
    let r = CString::new("abc").unwrap();
    let h = CString::new("axc").unwrap();
    let mut out = 0.0;
    assert_eq!(unsafe { avssl_cer(r.as_ptr(), h.as_ptr(), &mut out) }, AvsslStatus::Ok);
    assert!((out - 1.0 / 3.0).abs() < 1e-15);

    let empty = CString::new("  ").unwrap();
    assert_eq!(unsafe { avssl_cer(empty.as_ptr(), h.as_ptr(), &mut out) }, AvsslStatus::UserError);
    assert!(last_error().contains("empty reference"));
    assert_eq!(unsafe { avssl_cer(ptr::null(), h.as_ptr(), &mut out) }, AvsslStatus::NullPointer);
    assert!(last_error().contains("reference"));
}

#[test]
fn ctc_and_prefix() {
    let h = 0.5f64.ln();
    let lp = [h; 4];
    let target = [0u32];
    let mut out = 0.0;
    let s = unsafe { avssl_ctc_loss(lp.as_ptr(), 2, 2, target.as_ptr(), 1, 1, &mut out) };
    assert_eq!(s, AvsslStatus::Ok);
    assert!((out + 0.75f64.ln()).abs() < 1e-12);
    let s = unsafe { avssl_ctc_prefix_logp(lp.as_ptr(), 2, 2, ptr::null(), 0, 1, &mut out) };
    assert_eq!(s, AvsslStatus::Ok);
    assert_eq!(out, 0.0);
    let bad = [1u32];
    let s = unsafe { avssl_ctc_loss(lp.as_ptr(), 2, 2, bad.as_ptr(), 1, 1, &mut out) };
    assert_eq!(s, AvsslStatus::UserError);
}

#[test]
fn schedules_and_masks() {
    assert_eq!(avssl_tau_schedule(0, 100, 0.999), 0.999);
    assert_eq!(avssl_tau_schedule(100, 100, 0.999), 1.0);
    let mut lr = 0.0;
    assert_eq!(unsafe { avssl_lr_at(3e-3, 40.0, 150.0, 20.0, &mut lr) }, AvsslStatus::Ok);
    assert!((lr - 1.5e-3).abs() < 1e-15);
    assert_eq!(unsafe { avssl_lr_at(3e-3, 200.0, 150.0, 20.0, &mut lr) }, AvsslStatus::UserError);

    let mut a = vec![0u8; 50];
    let mut b = vec![0u8; 50];
    unsafe {
        assert_eq!(avssl_sample_frame_mask(50, 0.2, 3, 7, a.as_mut_ptr()), AvsslStatus::Ok);
        assert_eq!(avssl_sample_frame_mask(50, 0.2, 3, 7, b.as_mut_ptr()), AvsslStatus::Ok);
        assert_eq!(avssl_sample_frame_mask(50, 1.5, 3, 7, b.as_mut_ptr()), AvsslStatus::InvalidArgument);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|&f| f <= 1));
    let mut all = vec![0u8; 10];
    unsafe { avssl_sample_frame_mask(10, 1.0, 3, 0, all.as_mut_ptr()) };
    assert!(all.iter().all(|&f| f == 1));
}

#[test]
fn manifest_handle_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = avssl::corpus::SyntheticConfig::new(4, vec!["en".into(), "es".into()], (0.2, 0.4), 1);
    let m = avssl::corpus::generate_synthetic_corpus(&cfg, dir.path()).unwrap();
    let path = CString::new(dir.path().join("manifest.jsonl").to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    unsafe {
        assert_eq!(avssl_manifest_load(path.as_ptr(), &mut handle), AvsslStatus::Ok);
        let mut n = 0usize;
        assert_eq!(avssl_manifest_len(handle, &mut n), AvsslStatus::Ok);
        assert_eq!(n, 4);
        let mut h = 0.0;
        assert_eq!(avssl_manifest_hours(handle, ptr::null(), &mut h), AvsslStatus::Ok);
        assert!((h - m.total_hours()).abs() < 1e-12);
        let es = CString::new("es").unwrap();
        assert_eq!(avssl_manifest_hours(handle, es.as_ptr(), &mut h), AvsslStatus::Ok);
        assert!(h > 0.0 && h < m.total_hours());
        let out = CString::new(dir.path().join("re.jsonl").to_str().unwrap()).unwrap();
        assert_eq!(avssl_manifest_sample_re(handle, 1e6, 0, out.as_ptr()), AvsslStatus::UserError);
        assert!(last_error().contains("hour budget"));
        avssl_manifest_free(handle);
    }
    let missing = CString::new("/nonexistent/manifest.jsonl").unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { avssl_manifest_load(missing.as_ptr(), &mut handle) }, AvsslStatus::Io);
    assert!(handle.is_null());
}

#[test]
fn recognizer_decodes_through_the_c_api() {
    use avssl::finetune::{run_finetuning, EncoderInit, FinetuneConfig, FinetuneOptions};
    let dir = tempfile::tempdir().unwrap();
    let cfg = avssl::corpus::SyntheticConfig::new(3, vec!["es".into()], (0.2, 0.32), 2);
    let m = avssl::corpus::generate_synthetic_corpus(&cfg, &dir.path().join("c")).unwrap();
    let mut fc = FinetuneConfig::desk();
    fc.epochs = 2;
    fc.warmup_epochs = 1.0;
    fc.heldout_fraction = 0.0;
    let out = run_finetuning(&fc, &m, &EncoderInit::Random, &dir.path().join("f"), &FinetuneOptions::default()).unwrap();
    let ck = CString::new(out.checkpoint.to_str().unwrap()).unwrap();
    let mp = CString::new(dir.path().join("c/manifest.jsonl").to_str().unwrap()).unwrap();
    unsafe {
        let mut rec = ptr::null_mut();
        assert_eq!(avssl_recognizer_load(ck.as_ptr(), ptr::null(), &mut rec), AvsslStatus::Ok);
        assert_eq!(avssl_recognizer_set_beam(rec, 2, 0.3), AvsslStatus::Ok);
        assert_eq!(avssl_recognizer_set_beam(rec, 0, 0.3), AvsslStatus::UserError);
        let mut man = ptr::null_mut();
        assert_eq!(avssl_manifest_load(mp.as_ptr(), &mut man), AvsslStatus::Ok);
        let mut need = 0usize;
        let s = avssl_recognizer_decode(rec, man, 0, ptr::null_mut(), 0, &mut need);
        assert_eq!(s, AvsslStatus::BufferTooSmall);
        assert!(need >= 1);
        let mut buf = vec![0 as c_char; need];
        assert_eq!(avssl_recognizer_decode(rec, man, 0, buf.as_mut_ptr(), need, ptr::null_mut()), AvsslStatus::Ok);
        assert_eq!(avssl_recognizer_decode(rec, man, 99, buf.as_mut_ptr(), need, ptr::null_mut()), AvsslStatus::InvalidArgument);
        let mut cer = -1.0;
        assert_eq!(avssl_recognizer_evaluate(rec, man, &mut cer), AvsslStatus::Ok);
        assert!(cer >= 0.0);
        avssl_manifest_free(man);
        avssl_recognizer_free(rec);
    }
}

#[test]
fn header_lists_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/avssl.h")).unwrap();
    for name in [
        "avssl_last_error_message",
        "avssl_manifest_load",
        "avssl_cer",
        "avssl_ctc_loss",
        "avssl_recognizer_decode",
        "AVSSL_STATUS_BUFFER_TOO_SMALL",
        "typedef struct AvsslRecognizer AvsslRecognizer",
    ] {
        assert!(header.contains(name), "{name}");
    }
    let v = unsafe { CStr::from_ptr(avssl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
