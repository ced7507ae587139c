//! C ABI over the `sacp` library.
//!
//! Every fallible function returns a [`SacpStatus`]; on failure a message is
//! available from [`sacp_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function. Matrices are row-major.
//! Panics never cross the boundary: they surface as `SACP_STATUS_INTERNAL`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sacp::aggregate::AggregatorSpec;
use sacp::primitives::{Alpha, ScoreMatrix, TestScoreProfile};
use sacp::sacp::{select_p, Calibrated, PGrid, TargetGrid, TestInputs};
use sacp::scores::RegressionPredictions;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SacpStatus {
    Ok = 0,
    NullPointer = 1,
    /// Bad dimensions, alpha outside (0, 1), invalid exponent, ...
    InvalidArgument = 2,
    Internal = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SacpAggregatorKind {
    Sum = 0,
    Power = 1,
    Min = 2,
    Max = 3,
}

/// Calibration score matrix (`n` rows, one column per model).
pub struct SacpCalibration {
    scores: ScoreMatrix,
}

/// An aggregation function.
pub struct SacpAggregator {
    spec: AggregatorSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

enum Failure {
    Null(&'static str),
    Invalid(String),
}

impl From<sacp::Error> for Failure {
    fn from(e: sacp::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type FfiResult = Result<(), Failure>;

fn guard(f: impl FnOnce() -> FfiResult) -> SacpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SacpStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SacpStatus::NullPointer
        }
        Ok(Err(Failure::Invalid(msg))) => {
            set_error(msg);
            SacpStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic");
            SacpStatus::Internal
        }
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn reference<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Failure> {
    a.checked_mul(b).ok_or_else(|| Failure::Invalid("dimensions overflow".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sacp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library on the same thread.
#[no_mangle]
pub extern "C" fn sacp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Copies an `n` x `k` row-major score matrix into a new handle.
///
/// # Safety
/// `scores` must point to `n * k` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sacp_calibration_new(
    scores: *const f64,
    n: usize,
    k: usize,
    out: *mut *mut SacpCalibration,
) -> SacpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let data = slice(scores, checked_len(n, k)?, "scores")?.to_vec();
        let scores = ScoreMatrix::new(n, k, data)?;
        *out = Box::into_raw(Box::new(SacpCalibration { scores }));
        Ok(())
    })
}

/// # Safety
/// `cal` must come from [`sacp_calibration_new`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sacp_calibration_free(cal: *mut SacpCalibration) {
    if !cal.is_null() {
        drop(Box::from_raw(cal));
    }
}

/// Number of models (score columns) in a calibration handle; 0 for NULL.
///
/// # Safety
/// `cal` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn sacp_calibration_models(cal: *const SacpCalibration) -> usize {
    cal.as_ref().map_or(0, |c| c.scores.cols())
}

/// `p` is read only for `Power`; a power of exactly 1 is the sum.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sacp_aggregator_new(
    kind: SacpAggregatorKind,
    p: f64,
    out: *mut *mut SacpAggregator,
) -> SacpStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let spec = match kind {
            SacpAggregatorKind::Sum => AggregatorSpec::SUM,
            SacpAggregatorKind::Power => AggregatorSpec::power(p)?,
            SacpAggregatorKind::Min => AggregatorSpec::MIN,
            SacpAggregatorKind::Max => AggregatorSpec::MAX,
        };
        *out = Box::into_raw(Box::new(SacpAggregator { spec }));
        Ok(())
    })
}

/// Parses `sum`, `min`, `max` or `p=<x>`.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sacp_aggregator_parse(text: *const c_char, out: *mut *mut SacpAggregator) -> SacpStatus {
    guard(|| {
        if text.is_null() {
            return Err(Failure::Null("text"));
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let text = CStr::from_ptr(text)
            .to_str()
            .map_err(|_| Failure::Invalid("aggregator name is not UTF-8".into()))?;
        let spec: AggregatorSpec = text.parse()?;
        *out = Box::into_raw(Box::new(SacpAggregator { spec }));
        Ok(())
    })
}

/// Writes the aggregator's canonical name into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full name length excluding the NUL.
///
/// # Safety
/// `agg` must be a live handle; `buf` must hold `len` bytes or be NULL with `len == 0`.
#[no_mangle]
pub unsafe extern "C" fn sacp_aggregator_name(agg: *const SacpAggregator, buf: *mut c_char, len: usize) -> usize {
    let Some(agg) = agg.as_ref() else { return 0 };
    let name = agg.spec.to_string();
    if !buf.is_null() && len > 0 {
        let n = name.len().min(len - 1);
        ptr::copy_nonoverlapping(name.as_ptr().cast::<c_char>(), buf, n);
        *buf.add(n) = 0;
    }
    name.len()
}

/// # Safety
/// `agg` must come from an aggregator constructor and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn sacp_aggregator_free(agg: *mut SacpAggregator) {
    if !agg.is_null() {
        drop(Box::from_raw(agg));
    }
}

/// Classification set. `test_scores` holds one row of K scores per class
/// (`n_classes` x K); `out_mask[c]` is set to 1 if class `c` is accepted.
///
/// # Safety
/// Handles must be live; buffers must have the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn sacp_classify(
    cal: *const SacpCalibration,
    agg: *const SacpAggregator,
    alpha: f64,
    test_scores: *const f64,
    n_classes: usize,
    out_mask: *mut u8,
) -> SacpStatus {
    guard(|| {
        let cal = reference(cal, "calibration")?;
        let agg = reference(agg, "aggregator")?;
        let k = cal.scores.cols();
        let scores = slice(test_scores, checked_len(n_classes, k)?, "test_scores")?;
        let mask = slice_mut(out_mask, n_classes, "out_mask")?;
        let engine = Calibrated::new(&cal.scores, agg.spec, Alpha::new(alpha)?);
        for (c, m) in mask.iter_mut().enumerate() {
            let profile = TestScoreProfile::new(scores[c * k..(c + 1) * k].to_vec())?;
            *m = u8::from(engine.accepts_profile(&profile)?);
        }
        Ok(())
    })
}

/// Regression set on the uniform grid `[grid_lo, grid_hi]` with `grid_len`
/// points, for absolute-residual scores. `predictions` holds one value per model.
///
/// # Safety
/// Handles must be live; `predictions` holds K doubles, `out_mask` `grid_len`
/// bytes; `out_length` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sacp_regress(
    cal: *const SacpCalibration,
    agg: *const SacpAggregator,
    alpha: f64,
    predictions: *const f64,
    grid_lo: f64,
    grid_hi: f64,
    grid_len: usize,
    out_mask: *mut u8,
    out_length: *mut f64,
) -> SacpStatus {
    guard(|| {
        let cal = reference(cal, "calibration")?;
        let agg = reference(agg, "aggregator")?;
        let preds = slice(predictions, cal.scores.cols(), "predictions")?;
        RegressionPredictions::new(preds.to_vec())?;
        let grid = TargetGrid::new(grid_lo, grid_hi, grid_len)?;
        let mask = slice_mut(out_mask, grid_len, "out_mask")?;
        let set = Calibrated::new(&cal.scores, agg.spec, Alpha::new(alpha)?).regress(preds, &grid);
        for (m, &a) in mask.iter_mut().zip(&set.mask) {
            *m = u8::from(a);
        }
        if !out_length.is_null() {
            *out_length = set.length;
        }
        Ok(())
    })
}

/// Exact membership of target `y` (no grid); writes 1 or 0 to `out_accept`.
///
/// # Safety
/// Handles must be live; `predictions` holds K doubles.
#[no_mangle]
pub unsafe extern "C" fn sacp_membership_exact(
    cal: *const SacpCalibration,
    agg: *const SacpAggregator,
    alpha: f64,
    predictions: *const f64,
    y: f64,
    out_accept: *mut u8,
) -> SacpStatus {
    guard(|| {
        let cal = reference(cal, "calibration")?;
        let agg = reference(agg, "aggregator")?;
        let preds = slice(predictions, cal.scores.cols(), "predictions")?;
        if out_accept.is_null() {
            return Err(Failure::Null("out_accept"));
        }
        if !y.is_finite() {
            return Err(Failure::Invalid("target must be finite".into()));
        }
        RegressionPredictions::new(preds.to_vec())?;
        let engine = Calibrated::new(&cal.scores, agg.spec, Alpha::new(alpha)?);
        *out_accept = u8::from(engine.accepts_target(preds, y));
        Ok(())
    })
}

/// Picks the exponent with the smallest average regression set length over
/// `n_test` unlabeled test points (`n_test` x K predictions). The candidates
/// are `p_count` evenly spaced exponents on `[p_lo, p_hi]` plus the sum, min
/// and max. The chosen aggregator is returned as a new handle.
///
/// # Safety
/// `cal` must be live; `predictions` holds `n_test * K` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sacp_select_p_regression(
    cal: *const SacpCalibration,
    alpha: f64,
    predictions: *const f64,
    n_test: usize,
    grid_lo: f64,
    grid_hi: f64,
    grid_len: usize,
    p_lo: f64,
    p_hi: f64,
    p_count: usize,
    out: *mut *mut SacpAggregator,
) -> SacpStatus {
    guard(|| {
        let cal = reference(cal, "calibration")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let k = cal.scores.cols();
        let flat = slice(predictions, checked_len(n_test, k)?, "predictions")?;
        let preds = flat
            .chunks_exact(k.max(1))
            .map(|row| RegressionPredictions::new(row.to_vec()))
            .collect::<sacp::Result<Vec<_>>>()?;
        let grid = TargetGrid::new(grid_lo, grid_hi, grid_len)?;
        let candidates = PGrid { lo: p_lo, hi: p_hi, count: p_count, include_extremes: true }.candidates()?;
        let inputs = TestInputs::Regression { predictions: &preds, grid: &grid };
        let sel = select_p(&cal.scores, inputs, &candidates, Alpha::new(alpha)?)?;
        *out = Box::into_raw(Box::new(SacpAggregator { spec: sel.chosen }));
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn errors_are_reported_per_thread() {
        let mut h = ptr::null_mut();
        let status = unsafe { sacp_aggregator_new(SacpAggregatorKind::Power, 0.0, &mut h) };
        assert_eq!(status, SacpStatus::InvalidArgument);
        assert!(h.is_null());
        let msg = unsafe { CStr::from_ptr(sacp_last_error()) }.to_str().unwrap().to_string();
        assert!(!msg.is_empty());
        std::thread::spawn(|| assert!(sacp_last_error().is_null())).join().unwrap();
    }

    #[test]
    fn version_is_nul_terminated() {
        let v = unsafe { CStr::from_ptr(sacp_version()) };
        assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    }
}
