use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use maskvar_ffi::*;

fn last_error() -> String {
    let p = mv_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn toy(seed: u64) -> *mut MvModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mv_model_new_toy(131, seed, &mut m) }, MvStatus::Ok);
    assert!(!m.is_null());
    m
}

#[test]
fn proposal_is_a_distribution() {
    let m = toy(1);
    let tokens = [3u32, 20, 5, 40, 7, 120, 9];
    let mut probs = [0.0; 7];
    assert_eq!(unsafe { mv_propose(m, tokens.as_ptr(), 7, probs.as_mut_ptr()) }, MvStatus::Ok);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(probs.iter().all(|&p| p > 0.0));
    assert_eq!(unsafe { mv_model_vocab_size(m) }, 131);
    unsafe { mv_model_free(m) };
}

#[test]
fn position_losses_are_positive_and_deterministic() {
    let (a, b) = (toy(4), toy(4));
    let tokens = [3u32, 20, 5, 40];
    let (mut la, mut lb) = ([0.0; 4], [0.0; 4]);
    unsafe {
        assert_eq!(mv_position_losses(a, tokens.as_ptr(), 4, la.as_mut_ptr()), MvStatus::Ok);
        assert_eq!(mv_position_losses(b, tokens.as_ptr(), 4, lb.as_mut_ptr()), MvStatus::Ok);
        mv_model_free(a);
        mv_model_free(b);
    }
    assert_eq!(la, lb);
    assert!(la.iter().all(|&l| l > 0.0));
}

#[test]
fn ratio_matches_worked_examples() {
    let (mut r, mut c) = (0.0, 0.0);
    let raw = [0.5, 0.25];
    assert_eq!(unsafe { mv_importance_ratio(raw.as_ptr(), 2, 4, 0.2, &mut r, &mut c) }, MvStatus::Ok);
    assert_eq!((r, c), (0.5, 0.8));
    let raw = [0.1];
    assert_eq!(unsafe { mv_importance_ratio(raw.as_ptr(), 1, 4, 0.2, &mut r, &mut c) }, MvStatus::Ok);
    assert!((r - 2.5).abs() < 1e-12);
    assert_eq!(c, 1.2);
}

#[test]
fn sampling_is_seeded() {
    let probs = [0.1, 0.2, 0.3, 0.4];
    let (mut p1, mut p2) = ([0usize; 2], [0usize; 2]);
    let mut raw = [0.0; 2];
    unsafe {
        assert_eq!(mv_sample_positions(probs.as_ptr(), 4, 2, 9, p1.as_mut_ptr(), raw.as_mut_ptr()), MvStatus::Ok);
        assert_eq!(mv_sample_positions(probs.as_ptr(), 4, 2, 9, p2.as_mut_ptr(), raw.as_mut_ptr()), MvStatus::Ok);
    }
    assert_eq!(p1, p2);
    assert_ne!(p1[0], p1[1]);
    assert_eq!(raw[0], probs[p1[0]]);
}

#[test]
fn schedule_and_learning_rate() {
    assert_eq!(mv_explore_p(1.0, 0.1, 100, 0), 1.0);
    assert!((mv_explore_p(1.0, 0.1, 100, 50) - 0.55).abs() < 1e-12);
    assert_eq!(mv_explore_p(1.0, 0.1, 100, 1000), 0.1);
    assert!(mv_explore_p(2.0, 0.1, 100, 0).is_nan());
    let m = toy(0);
    let mut lr = -1.0;
    assert_eq!(unsafe { mv_model_lr_at(m, 0, &mut lr) }, MvStatus::Ok);
    assert_eq!(lr, 0.0);
    unsafe { mv_model_free(m) };
}

#[test]
fn errors_carry_codes_and_messages() {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { mv_model_new_toy(131, 0, ptr::null_mut()) }, MvStatus::NullPointer);
    assert!(last_error().contains("out"));
    let missing = CString::new("/nonexistent/x.mvar").unwrap();
    assert_eq!(unsafe { mv_model_load(missing.as_ptr(), &mut m) }, MvStatus::Io);
    assert!(m.is_null());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.mvar");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { mv_model_load(junk.as_ptr(), &mut m) }, MvStatus::Format);

    let m = toy(0);
    let tokens = [500u32];
    let mut out = [0.0];
    assert_eq!(unsafe { mv_propose(m, tokens.as_ptr(), 1, out.as_mut_ptr()) }, MvStatus::InvalidArgument);
    assert!(last_error().contains("500"));
    assert_eq!(unsafe { mv_propose(m, ptr::null(), 0, out.as_mut_ptr()) }, MvStatus::InvalidArgument);
    assert_eq!(unsafe { mv_propose(ptr::null(), tokens.as_ptr(), 1, out.as_mut_ptr()) }, MvStatus::NullPointer);
    unsafe {
        mv_model_free(m);
        mv_model_free(ptr::null_mut());
        mv_string_free(ptr::null_mut());
    }
}

#[test]
fn oracle_returns_json() {
    let suite = CString::new("decomposition").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { mv_oracle_run(suite.as_ptr(), 0, &mut json) }, MvStatus::Ok);
    let text = unsafe { CStr::from_ptr(json) }.to_str().unwrap().to_string();
    unsafe { mv_string_free(json) };
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["suite"], "decomposition");
    assert_eq!(v["passed"], true);

    let bad = CString::new("nope").unwrap();
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { mv_oracle_run(bad.as_ptr(), 0, &mut json) }, MvStatus::InvalidArgument);
    assert!(json.is_null());
}

fn header_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("include")
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(header_dir().join("maskvar.h")).unwrap();
    for f in [
        "mv_last_error_message",
        "mv_model_new_toy",
        "mv_model_load",
        "mv_model_free",
        "mv_model_vocab_size",
        "mv_model_max_seq_len",
        "mv_propose",
        "mv_position_losses",
        "mv_model_lr_at",
        "mv_sample_positions",
        "mv_importance_ratio",
        "mv_explore_p",
        "mv_oracle_run",
        "mv_string_free",
    ] {
        assert!(h.contains(&format!(" {f}(")) || h.contains(&format!("*{f}(")), "{f} missing from header");
    }
    assert!(h.contains("typedef struct MvModel MvModel;"));
    assert!(h.contains("MV_STATUS_CHECK_FAILED = 6"));
}

/// Compiles and runs a C program against the header and the static
/// library when a C compiler is on the path.
#[test]
fn c_program_links_and_runs() {
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if Command::new(&cc).arg("--version").output().is_err() {
        eprintln!("skipping: no C compiler");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(Path::parent).unwrap();
    let lib = profile_dir.join("libmaskvar_ffi.a");
    if !lib.exists() {
        eprintln!("skipping: {} not built", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("smoke");
    let src = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/c/smoke.c");
    let status = Command::new(&cc)
        .args(["-std=c99", "-Wall", "-Werror", "-o"])
        .arg(&out)
        .arg(&src)
        .arg("-I")
        .arg(header_dir())
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .status()
        .unwrap();
    assert!(status.success(), "C build failed");
    let run = Command::new(&out).output().unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
