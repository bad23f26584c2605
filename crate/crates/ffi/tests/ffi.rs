use std::ffi::{CStr, CString};
use std::ptr;

use asym_lab_ffi::*;

fn last_error() -> String {
    let p = asym_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dim);
    for i in 0..rows {
        let row: Vec<f64> = (0..dim)
            .map(|j| ((seed as f64 + 1.3 * i as f64 + 0.7 * j as f64).sin()) + 0.01)
            .collect();
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        out.extend(row.iter().map(|v| v / n));
    }
    out
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(asym_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn encoder_round_trip_and_errors() {
    unsafe {
        let mut enc: *mut AsymEncoder = ptr::null_mut();
        assert_eq!(asym_encoder_new(48, 16, 8, 4, 7, &mut enc), AsymStatus::Ok);
        assert!(asym_last_error_message().is_null());
        let (mut input, mut out_dim) = (0usize, 0usize);
        assert_eq!(asym_encoder_dims(enc, &mut input, &mut out_dim), AsymStatus::Ok);
        assert_eq!((input, out_dim), (48, 4));

        let batch: Vec<f64> = (0..4 * 48).map(|i| (i as f64 * 0.37).cos()).collect();
        let mut z = vec![0.0; 16];
        assert_eq!(asym_encoder_encode(enc, batch.as_ptr(), 4, 2, z.as_mut_ptr(), 16), AsymStatus::Ok);
        for row in z.chunks(4) {
            let n: f64 = row.iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
        let mut single = vec![0.0; 4];
        assert_eq!(asym_encoder_encode(enc, batch.as_ptr(), 1, 0, single.as_mut_ptr(), 4), AsymStatus::Ok);

        assert_eq!(asym_encoder_encode(enc, batch.as_ptr(), 4, 2, z.as_mut_ptr(), 15), AsymStatus::InvalidArgument);
        assert!(last_error().contains("out_len"));
        assert_eq!(asym_encoder_encode(enc, batch.as_ptr(), 4, 3, z.as_mut_ptr(), 16), AsymStatus::InvalidArgument);
        assert_eq!(asym_encoder_encode(ptr::null(), batch.as_ptr(), 4, 2, z.as_mut_ptr(), 16), AsymStatus::NullPointer);
        asym_encoder_free(enc);
        asym_encoder_free(ptr::null_mut());
    }
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let path = CString::new("/nonexistent/checkpoint.bin").unwrap();
    let mut enc: *mut AsymEncoder = ptr::null_mut();
    let st = unsafe { asym_encoder_load(path.as_ptr(), &mut enc) };
    assert_eq!(st, AsymStatus::Io);
    assert!(enc.is_null());
}

#[test]
fn bank_and_loss() {
    unsafe {
        let mut bank: *mut AsymBank = ptr::null_mut();
        assert_eq!(asym_bank_new(8, 4, &mut bank), AsymStatus::Ok);
        let z = unit_rows(2, 4, 1);
        let zp = unit_rows(2, 4, 2);
        let mut loss = 0.0;
        assert_eq!(
            asym_info_nce(z.as_ptr(), zp.as_ptr(), 2, bank, 0.2, 0.0, &mut loss, ptr::null_mut()),
            AsymStatus::Degenerate
        );
        let neg = unit_rows(5, 4, 3);
        assert_eq!(asym_bank_enqueue(bank, neg.as_ptr(), 5), AsymStatus::Ok);
        assert_eq!(asym_bank_enqueue(bank, neg.as_ptr(), 5), AsymStatus::Ok);
        let mut fill = 0;
        assert_eq!(asym_bank_fill(bank, &mut fill), AsymStatus::Ok);
        assert_eq!(fill, 8);

        let mut grad = vec![0.0; 8];
        let (mut l0, mut l1) = (0.0, 0.0);
        assert_eq!(asym_info_nce(z.as_ptr(), zp.as_ptr(), 2, bank, 0.2, 0.0, &mut l0, grad.as_mut_ptr()), AsymStatus::Ok);
        assert_eq!(asym_info_nce(z.as_ptr(), zp.as_ptr(), 2, bank, 0.2, 1.0, &mut l1, ptr::null_mut()), AsymStatus::Ok);
        assert!(l0.is_finite() && l1 >= l0);
        assert!(grad.iter().any(|g| *g != 0.0));

        assert_eq!(
            asym_info_nce(z.as_ptr(), zp.as_ptr(), 2, bank, -1.0, 0.0, &mut l0, ptr::null_mut()),
            AsymStatus::InvalidArgument
        );
        let bad = [2.0; 4];
        assert_eq!(asym_bank_enqueue(bank, bad.as_ptr(), 1), AsymStatus::Integrity);
        asym_bank_free(bank);
    }
}

#[test]
fn variance_entry_points() {
    unsafe {
        let z = unit_rows(6, 3, 4);
        let mut cv = -1.0;
        assert_eq!(asym_cross_image_variance(z.as_ptr(), 6, 3, &mut cv), AsymStatus::Ok);
        assert!(cv > 0.0);

        let mut enc: *mut AsymEncoder = ptr::null_mut();
        assert_eq!(asym_encoder_new(3 * 8 * 8, 16, 8, 4, 3, &mut enc), AsymStatus::Ok);
        let images: Vec<f64> = (0..4 * 3 * 64).map(|i| 0.5 + 0.4 * (i as f64 * 0.11).sin()).collect();
        let recipe = CString::new("baseline").unwrap();
        let mut v = -1.0;
        assert_eq!(
            asym_intra_image_variance(enc, images.as_ptr(), 4, 8, recipe.as_ptr(), 4, 0, 1, &mut v),
            AsymStatus::Ok,
            "{}",
            last_error()
        );
        assert!(v > 0.0);
        let unknown = CString::new("sepia").unwrap();
        assert_eq!(
            asym_intra_image_variance(enc, images.as_ptr(), 4, 8, unknown.as_ptr(), 4, 0, 1, &mut v),
            AsymStatus::InvalidArgument
        );
        assert!(last_error().contains("sepia"));
        asym_encoder_free(enc);
    }
}

#[test]
fn scalar_theory_check_reports_both_forms() {
    let mut r = AsymTheoryResult::default();
    assert_eq!(unsafe { asym_theory_scalar_check(200_000, 1.0, 5, &mut r) }, AsymStatus::Ok);
    assert!((r.predicted - 5.625).abs() < 1e-12);
    assert!((r.predicted_full - 8.125).abs() < 1e-12);
    assert!((r.empirical - r.predicted_full).abs() < 0.05 * r.predicted_full);
    assert!(r.passed_full);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/asym_lab.h");
    for sym in [
        "asym_version",
        "asym_last_error_message",
        "asym_encoder_new",
        "asym_encoder_load",
        "asym_encoder_free",
        "asym_encoder_dims",
        "asym_encoder_encode",
        "asym_bank_new",
        "asym_bank_free",
        "asym_bank_enqueue",
        "asym_bank_fill",
        "asym_info_nce",
        "asym_cross_image_variance",
        "asym_intra_image_variance",
        "asym_theory_scalar_check",
        "ASYM_STATUS_PANIC",
    ] {
        assert!(header.contains(sym), "{sym} missing from header");
    }
}
