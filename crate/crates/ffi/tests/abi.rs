use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use sacp::aggregate::AggregatorSpec;
use sacp::baselines::split_cp_quantile;
use sacp::primitives::{Alpha, ScoreMatrix};
use sacp::sacp::{sacp_regress as lib_regress, select_p, PGrid, TargetGrid, TestInputs};
use sacp::scores::RegressionPredictions;
use sacp_ffi::*;

struct Handles {
    cal: *mut SacpCalibration,
    agg: *mut SacpAggregator,
}

impl Drop for Handles {
    fn drop(&mut self) {
        unsafe {
            sacp_calibration_free(self.cal);
            sacp_aggregator_free(self.agg);
        }
    }
}

fn handles(scores: &[f64], n: usize, k: usize, agg: &str) -> Handles {
    let mut h = Handles { cal: ptr::null_mut(), agg: ptr::null_mut() };
    let name = CString::new(agg).unwrap();
    unsafe {
        assert_eq!(sacp_calibration_new(scores.as_ptr(), n, k, &mut h.cal), SacpStatus::Ok);
        assert_eq!(sacp_aggregator_parse(name.as_ptr(), &mut h.agg), SacpStatus::Ok);
    }
    h
}

fn last_error() -> String {
    let p = sacp_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn residual_matrix(n: usize, k: usize) -> Vec<f64> {
    (0..n * k).map(|i| ((i * 7919) % 101) as f64 / 25.0 + 0.01).collect()
}

#[test]
fn single_model_classify_matches_split_cp() {
    let calib: Vec<f64> = (1..=19).map(|i| i as f64 / 20.0).collect();
    let h = handles(&calib, 19, 1, "sum");
    let test = [0.1, 0.5, 0.86, 0.95, 0.99];
    let mut mask = [0u8; 5];
    let status = unsafe { sacp_classify(h.cal, h.agg, 0.1, test.as_ptr(), 5, mask.as_mut_ptr()) };
    assert_eq!(status, SacpStatus::Ok);
    let q = split_cp_quantile(&calib, Alpha::new(0.1).unwrap());
    let expected: Vec<u8> = test.iter().map(|&s| u8::from(s <= q)).collect();
    assert_eq!(mask.to_vec(), expected);
}

#[test]
fn regress_matches_library() {
    let (n, k) = (60, 3);
    let scores = residual_matrix(n, k);
    let h = handles(&scores, n, k, "p=2");
    let preds = [0.0, 0.4, -0.3];
    let mut mask = vec![0u8; 101];
    let mut length = 0.0;
    let status = unsafe {
        sacp_regress(h.cal, h.agg, 0.1, preds.as_ptr(), -5.0, 5.0, 101, mask.as_mut_ptr(), &mut length)
    };
    assert_eq!(status, SacpStatus::Ok);
    let calib = ScoreMatrix::new(n, k, scores).unwrap();
    let grid = TargetGrid::new(-5.0, 5.0, 101).unwrap();
    let spec = AggregatorSpec::power(2.0).unwrap();
    let set = lib_regress(&calib, &RegressionPredictions::new(preds.to_vec()).unwrap(), &grid, &spec, Alpha::new(0.1).unwrap())
        .unwrap();
    assert_eq!(mask, set.mask.iter().map(|&b| u8::from(b)).collect::<Vec<_>>());
    assert_eq!(length, set.length);
    assert!(length > 0.0);
}

#[test]
fn select_p_matches_library() {
    let (n, k) = (80, 3);
    let scores = residual_matrix(n, k);
    let h = handles(&scores, n, k, "sum");
    let preds: Vec<f64> = (0..40 * k).map(|i| ((i * 31) % 17) as f64 / 10.0 - 0.8).collect();
    let mut chosen = ptr::null_mut();
    let status = unsafe {
        sacp_select_p_regression(h.cal, 0.1, preds.as_ptr(), 40, -6.0, 6.0, 121, -4.0, 4.0, 17, &mut chosen)
    };
    assert_eq!(status, SacpStatus::Ok);
    let mut buf = [0 as std::ffi::c_char; 32];
    let len = unsafe { sacp_aggregator_name(chosen, buf.as_mut_ptr(), buf.len()) };
    let name = unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string();
    assert_eq!(len, name.len());
    unsafe { sacp_aggregator_free(chosen) };

    let calib = ScoreMatrix::new(n, k, scores).unwrap();
    let tests: Vec<RegressionPredictions> =
        preds.chunks(k).map(|c| RegressionPredictions::new(c.to_vec()).unwrap()).collect();
    let grid = TargetGrid::new(-6.0, 6.0, 121).unwrap();
    let candidates = PGrid { lo: -4.0, hi: 4.0, count: 17, include_extremes: true }.candidates().unwrap();
    let sel = select_p(
        &calib,
        TestInputs::Regression { predictions: &tests, grid: &grid },
        &candidates,
        Alpha::new(0.1).unwrap(),
    )
    .unwrap();
    assert_eq!(name, sel.chosen.to_string());
}

#[test]
fn error_codes() {
    let mut cal = ptr::null_mut();
    let bad = [1.0, f64::NAN];
    unsafe {
        assert_eq!(sacp_calibration_new(ptr::null(), 2, 1, &mut cal), SacpStatus::NullPointer);
        assert!(last_error().contains("scores"));
        assert_eq!(sacp_calibration_new(bad.as_ptr(), 2, 1, &mut cal), SacpStatus::InvalidArgument);
        assert!(cal.is_null());
    }
    let h = handles(&[1.0, 2.0, 3.0], 3, 1, "sum");
    let mut accept = 0u8;
    let preds = [0.0];
    unsafe {
        assert_eq!(sacp_membership_exact(h.cal, h.agg, 0.0, preds.as_ptr(), 1.0, &mut accept), SacpStatus::InvalidArgument);
        assert!(last_error().contains("alpha"), "{}", last_error());
        assert_eq!(sacp_membership_exact(h.cal, ptr::null(), 0.1, preds.as_ptr(), 1.0, &mut accept), SacpStatus::NullPointer);
        // Success clears the previous message.
        assert_eq!(sacp_membership_exact(h.cal, h.agg, 0.1, preds.as_ptr(), 1.0, &mut accept), SacpStatus::Ok);
        assert!(sacp_last_error().is_null());
        // Three calibration points at alpha 0.1 accept everything.
        assert_eq!(accept, 1);
        assert_eq!(sacp_calibration_models(h.cal), 1);
    }
    let name = CString::new("p=0").unwrap();
    let mut agg = ptr::null_mut();
    assert_eq!(unsafe { sacp_aggregator_parse(name.as_ptr(), &mut agg) }, SacpStatus::InvalidArgument);
}

fn artifact_dir() -> PathBuf {
    // CARGO_TARGET_TMPDIR is <target>/tmp; libraries sit in <target>/<profile>.
    let target = Path::new(env!("CARGO_TARGET_TMPDIR")).parent().unwrap().to_path_buf();
    let exe = std::env::current_exe().unwrap();
    let profile = exe.parent().and_then(Path::parent).unwrap();
    if profile.join("libsacp_ffi.a").exists() {
        profile.to_path_buf()
    } else {
        target.join("debug")
    }
}

#[test]
fn c_program_links_against_header() {
    let lib = artifact_dir().join("libsacp_ffi.a");
    if Command::new("cc").arg("--version").output().is_err() || !lib.exists() {
        eprintln!("skipping: no C compiler or static library at {}", lib.display());
        return;
    }
    let dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let exe = Path::new(env!("CARGO_TARGET_TMPDIR")).join("sacp_smoke");
    let status = Command::new("cc")
        .arg(dir.join("tests/smoke.c"))
        .arg("-I")
        .arg(dir.join("include"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "smoke program exited with {:?}", out.status.code());
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok "));
}
