use std::ffi::{c_char, CString};
use std::ptr;

use prunekit_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { pk_last_error_message(buf.as_mut_ptr(), buf.len()) };
    let bytes: Vec<u8> = buf[..n.min(255)].iter().map(|&c| c as u8).collect();
    String::from_utf8(bytes).unwrap()
}

fn toy_model() -> *mut PkModel {
    let arch = CString::new("toy2").unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { pk_model_new(arch.as_ptr(), 3, 8, 8, 4, 7, &mut m) }, PkStatus::Ok);
    m
}

#[test]
fn model_roundtrip_prune_and_compact() {
    let m = toy_model();
    let mut before = PkAccounting::default();
    unsafe {
        assert_eq!(pk_model_accounting(m, &mut before), PkStatus::Ok);
        assert!(before.total_params > 0 && before.total_flops > 0);

        let (mut total, mut live) = (0usize, 0usize);
        assert_eq!(pk_model_filters(m, 0, &mut total, &mut live), PkStatus::Ok);
        assert_eq!((total, live), (8, 8));
        for j in 0..4 {
            assert_eq!(pk_model_prune_filter(m, 0, j), PkStatus::Ok);
        }
        let mut is_live = true;
        assert_eq!(pk_model_is_live(m, 0, 2, &mut is_live), PkStatus::Ok);
        assert!(!is_live);

        let mut after = PkAccounting::default();
        pk_model_accounting(m, &mut after);
        assert!(after.total_params < before.total_params);

        let (mut in_len, mut out_len) = (0usize, 0usize);
        assert_eq!(pk_model_io_len(m, &mut in_len, &mut out_len), PkStatus::Ok);
        assert_eq!((in_len, out_len), (192, 4));
        let x: Vec<f32> = (0..2 * in_len).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let mut y_masked = vec![0f32; 2 * out_len];
        assert_eq!(
            pk_model_forward(m, x.as_ptr(), x.len(), 2, y_masked.as_mut_ptr(), y_masked.len()),
            PkStatus::Ok
        );

        let mut c = ptr::null_mut();
        assert_eq!(pk_model_export_compact(m, &mut c), PkStatus::Ok);
        let mut compact = PkAccounting::default();
        pk_model_accounting(c, &mut compact);
        assert_eq!(compact, after);
        let mut y_compact = vec![0f32; 2 * out_len];
        assert_eq!(
            pk_model_forward(c, x.as_ptr(), x.len(), 2, y_compact.as_mut_ptr(), y_compact.len()),
            PkStatus::Ok
        );
        for (a, b) in y_masked.iter().zip(&y_compact) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }

        let dir = tempfile::tempdir().unwrap();
        let path = CString::new(dir.path().join("m.pkckpt").to_str().unwrap()).unwrap();
        assert_eq!(pk_model_save(m, path.as_ptr()), PkStatus::Ok);
        let mut loaded = ptr::null_mut();
        assert_eq!(pk_model_load(path.as_ptr(), &mut loaded), PkStatus::Ok);
        let mut la = PkAccounting::default();
        pk_model_accounting(loaded, &mut la);
        assert_eq!(la, after);

        pk_model_free(loaded);
        pk_model_free(c);
        pk_model_free(m);
    }
}

#[test]
fn errors_carry_status_and_message() {
    let m = toy_model();
    unsafe {
        let mut out = 0usize;
        assert_eq!(pk_model_num_conv(ptr::null(), &mut out), PkStatus::NullPointer);
        assert!(last_error().contains("null"));

        assert_eq!(pk_model_prune_filter(m, 9, 0), PkStatus::InvalidArgument);
        for j in 0..7 {
            assert_eq!(pk_model_prune_filter(m, 0, j), PkStatus::Ok);
        }
        assert_eq!(pk_model_prune_filter(m, 0, 7), PkStatus::InvalidArgument);
        assert!(last_error().contains("last live filter"));

        let x = [0f32; 10];
        let mut y = vec![0f32; 4];
        assert_eq!(
            pk_model_forward(m, x.as_ptr(), x.len(), 1, y.as_mut_ptr(), 4),
            PkStatus::Shape
        );

        let missing = CString::new("/nonexistent/dir/x.pkckpt").unwrap();
        let mut h = ptr::null_mut();
        assert_eq!(pk_model_load(missing.as_ptr(), &mut h), PkStatus::Io);
        assert!(h.is_null());

        let bad = CString::new("resnet").unwrap();
        assert_eq!(pk_model_new(bad.as_ptr(), 3, 8, 8, 4, 0, &mut h), PkStatus::Config);
        assert!(last_error().contains("resnet"));

        assert_eq!(pk_model_num_conv(m, &mut out), PkStatus::Ok);
        assert_eq!(out, 2);
        assert_eq!(pk_last_error_message(ptr::null_mut(), 0), 0);
        pk_model_free(m);
    }
}

#[test]
fn attention_values() {
    let map = [1.0f32, -2.0, 3.0, 0.0];
    let mut v = 0.0;
    unsafe {
        assert_eq!(
            pk_attention_of_map(map.as_ptr(), 4, PkAttentionFunction::Mean, 1.0, &mut v),
            PkStatus::Ok
        );
        assert!((v - 1.5).abs() < 1e-12);
        pk_attention_of_map(map.as_ptr(), 4, PkAttentionFunction::Sum, 2.0, &mut v);
        assert!((v - 14.0).abs() < 1e-12);
        pk_attention_of_map(map.as_ptr(), 4, PkAttentionFunction::Max, 1.0, &mut v);
        assert!((v - 3.0).abs() < 1e-12);
        assert_eq!(
            pk_attention_of_map(map.as_ptr(), 4, PkAttentionFunction::Mean, 0.0, &mut v),
            PkStatus::InvalidArgument
        );
        assert_eq!(
            pk_attention_of_map(map.as_ptr(), 0, PkAttentionFunction::Mean, 1.0, &mut v),
            PkStatus::InvalidArgument
        );
    }
}

fn obs(acc_loss: f64, params: i64) -> PkObservation {
    PkObservation {
        acc_loss,
        param_reduction: -1.0,
        flops_reduction: -1.0,
        current_params: params,
        current_flops: -1,
    }
}

#[test]
fn controller_hand_trace() {
    let mut c = ptr::null_mut();
    unsafe {
        assert_eq!(
            pk_controller_new(PkPolicyKind::AccuracyGuaranteed, 1.0, ptr::null(), 1000, &mut c),
            PkStatus::Ok
        );
        let mut d = PkDecision {
            action: PkAction::Continue,
            rollback_round: 0,
            termination: PkTermination::None,
            acceptable: false,
            next_t: 0.0,
            next_lambda: 0.0,
        };
        for (loss, t, size) in [(0.2, 0.005, 900), (0.5, 0.010, 800), (0.8, 0.015, 700)] {
            assert_eq!(pk_controller_observe(c, &obs(loss, size), &mut d), PkStatus::Ok);
            assert_eq!(d.action, PkAction::Continue);
            assert!((d.next_t - t).abs() < 1e-12);
        }
        assert_eq!(pk_controller_observe(c, &obs(1.4, 600), &mut d), PkStatus::Ok);
        assert_eq!(d.action, PkAction::Rollback);
        assert_eq!(d.rollback_round, 3);
        assert!((d.next_t - 0.0125).abs() < 1e-12);
        assert!((d.next_lambda - 0.0025).abs() < 1e-12);

        let (mut t, mut lambda, mut round) = (0.0, 0.0, 0u32);
        assert_eq!(pk_controller_state(c, &mut t, &mut lambda, &mut round), PkStatus::Ok);
        assert!((t - 0.0125).abs() < 1e-12);

        assert_eq!(pk_controller_observe(c, &obs(f64::NAN, 600), &mut d), PkStatus::Policy);
        pk_controller_free(c);
    }
}

#[test]
fn header_is_generated_and_compiles() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/prunekit.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "pk_model_load",
        "pk_controller_observe",
        "pk_last_error_message",
        "PK_STATUS_OK",
    ] {
        assert!(text.contains(sym), "{sym} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"prunekit.h\"\nint main(void) { PkModel *m = 0; pk_model_free(m); return PK_STATUS_OK; }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .status()
    {
        Ok(s) => assert!(s.success(), "header failed to compile"),
        Err(e) => eprintln!("cc unavailable, header syntax check skipped: {e}"),
    }
}
