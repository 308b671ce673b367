//! C ABI over the clicooper core.
//!
//! Every object crosses the boundary as an opaque handle created by a
//! `clc_*_new`/`load`/`build` function and released by the matching
//! `clc_*_free`. Fallible calls return a [`ClcStatus`]; on failure the
//! message is kept per thread and can be fetched with
//! [`clc_last_error_message`]. Strings handed out by this library must be
//! released with [`clc_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use clicooper::dp::{clip_l1, DpActivationBatch};
use clicooper::labelspace::LabelMap;
use clicooper::nn::{load_checkpoint, Segment};
use clicooper::pipeline::estimate_latency;
use clicooper::verifier::{verify, ChainManifest, VerificationReport};
use clicooper::{Error, TensorF64};

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Format = 5,
    DigestMismatch = 6,
    BufferTooSmall = 7,
    Internal = 8,
    Panic = 9,
}

/// Secret true-to-pseudo label map.
pub struct ClcLabelMap(LabelMap);

/// Cached DP activation release.
pub struct ClcDpCache(DpActivationBatch);

/// A network segment loaded from a checkpoint.
pub struct ClcSegment(Segment);

/// Outcome of a chain verification.
pub struct ClcReport(VerificationReport);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

fn status_of(e: &Error) -> ClcStatus {
    match e.root() {
        Error::Shape(_) => ClcStatus::Shape,
        Error::InvalidArgument(_) | Error::LabelOutOfRange { .. } => ClcStatus::InvalidArgument,
        Error::Io(_) => ClcStatus::Io,
        Error::Format(_) | Error::Json(_) | Error::Csv(_) => ClcStatus::Format,
        Error::DigestMismatch(_) => ClcStatus::DigestMismatch,
        _ => ClcStatus::Internal,
    }
}

struct Fail(ClcStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ClcStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ClcStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("panic inside clicooper");
            ClcStatus::Panic
        }
    }
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ClcStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn put<T>(out: *mut T, v: T, what: &str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null(what));
    }
    out.write(v);
    Ok(())
}

fn into_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(ClcStatus::Internal, "string contains NUL".into()))
}

/// Copy of the calling thread's last error message, or NULL when the last
/// call succeeded. Free with [`clc_string_free`].
#[no_mangle]
pub extern "C" fn clc_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| match &*e.borrow() {
        Some(m) => m.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clc_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Builds a label map with `q` classes and per-class expansion factors `g`.
///
/// # Safety
/// `g` must point to `q` readable values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_build(
    q: usize,
    g: *const usize,
    seed: u64,
    out: *mut *mut ClcLabelMap,
) -> ClcStatus {
    guard(|| {
        let g = slice(g, q, "g")?;
        let map = LabelMap::build(q, g, seed)?;
        put(out, Box::into_raw(Box::new(ClcLabelMap(map))), "out")
    })
}

/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_from_json(json: *const c_char, out: *mut *mut ClcLabelMap) -> ClcStatus {
    guard(|| {
        if json.is_null() {
            return Err(null("json"));
        }
        let s = CStr::from_ptr(json)
            .to_str()
            .map_err(|_| Fail(ClcStatus::InvalidArgument, "json is not UTF-8".into()))?;
        let map = LabelMap::from_json(s)?;
        put(out, Box::into_raw(Box::new(ClcLabelMap(map))), "out")
    })
}

/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_to_json(map: *const ClcLabelMap, out: *mut *mut c_char) -> ClcStatus {
    guard(|| {
        let map = borrow(map, "map")?;
        let s = into_c_string(map.0.to_json()?)?;
        put(out, s, "out")
    })
}

/// Number of pseudo classes, or 0 for a NULL handle.
///
/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_pseudo_count(map: *const ClcLabelMap) -> usize {
    map.as_ref().map_or(0, |m| m.0.pseudo_count())
}

/// # Safety
/// `map` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_gamma(map: *const ClcLabelMap) -> f64 {
    map.as_ref().map_or(f64::NAN, |m| m.0.gamma())
}

/// True class behind a pseudo class.
///
/// # Safety
/// `map` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_demask(map: *const ClcLabelMap, pseudo: usize, out: *mut usize) -> ClcStatus {
    guard(|| {
        let map = borrow(map, "map")?;
        put(out, map.0.demask(pseudo)?, "out")
    })
}

/// Writes the pseudo classes of `class` into `buf`. `len` receives the
/// count even when `cap` is too small.
///
/// # Safety
/// `map` must be a live handle, `buf` must have room for `cap` values and
/// `len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_forward(
    map: *const ClcLabelMap,
    class: usize,
    buf: *mut usize,
    cap: usize,
    len: *mut usize,
) -> ClcStatus {
    guard(|| {
        let map = borrow(map, "map")?;
        if class >= map.0.q() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: map.0.q(),
            }
            .into());
        }
        let ids = map.0.forward(class);
        put(len, ids.len(), "len")?;
        if ids.len() > cap {
            return Err(Fail(
                ClcStatus::BufferTooSmall,
                format!("need {} slots, have {cap}", ids.len()),
            ));
        }
        if !ids.is_empty() {
            if buf.is_null() {
                return Err(null("buf"));
            }
            ptr::copy_nonoverlapping(ids.as_ptr(), buf, ids.len());
        }
        Ok(())
    })
}

/// # Safety
/// `map` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clc_label_map_free(map: *mut ClcLabelMap) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// Loads a DP cache file; the stored digest is checked on load.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_load(path: *const c_char, out: *mut *mut ClcDpCache) -> ClcStatus {
    guard(|| {
        let cache = DpActivationBatch::load(&path_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(ClcDpCache(cache))), "out")
    })
}

/// # Safety
/// `cache` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_rows(cache: *const ClcDpCache) -> usize {
    cache.as_ref().map_or(0, |c| c.0.values.rows())
}

/// # Safety
/// `cache` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_cols(cache: *const ClcDpCache) -> usize {
    cache.as_ref().map_or(0, |c| c.0.values.cols())
}

/// Privacy budget of the release; +inf means no noise was added.
///
/// # Safety
/// `cache` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_epsilon(cache: *const ClcDpCache) -> f64 {
    cache.as_ref().map_or(f64::NAN, |c| c.0.params.epsilon())
}

/// Copies the 32-byte SHA-256 digest of the cached values.
///
/// # Safety
/// `cache` must be a live handle; `out` must have room for 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_digest(cache: *const ClcDpCache, out: *mut u8) -> ClcStatus {
    guard(|| {
        let cache = borrow(cache, "cache")?;
        if out.is_null() {
            return Err(null("out"));
        }
        ptr::copy_nonoverlapping(cache.0.digest.as_ptr(), out, 32);
        Ok(())
    })
}

/// # Safety
/// `cache` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clc_dp_cache_free(cache: *mut ClcDpCache) {
    if !cache.is_null() {
        drop(Box::from_raw(cache));
    }
}

/// Scales `row` in place onto the l1 ball of radius `radius`.
///
/// # Safety
/// `row` must point to `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn clc_clip_l1(row: *mut f64, len: usize, radius: f64) -> ClcStatus {
    guard(|| {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Fail(ClcStatus::InvalidArgument, format!("radius must be > 0, got {radius}")));
        }
        if len == 0 {
            return Ok(());
        }
        if row.is_null() {
            return Err(null("row"));
        }
        let row = std::slice::from_raw_parts_mut(row, len);
        let clipped = clip_l1(row, radius);
        row.copy_from_slice(&clipped);
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_segment_load(path: *const c_char, out: *mut *mut ClcSegment) -> ClcStatus {
    guard(|| {
        let seg = load_checkpoint(&path_arg(path, "path")?)?;
        put(out, Box::into_raw(Box::new(ClcSegment(seg))), "out")
    })
}

/// # Safety
/// `seg` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_segment_input_dim(seg: *const ClcSegment) -> usize {
    seg.as_ref().map_or(0, |s| s.0.input_dim())
}

/// # Safety
/// `seg` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_segment_output_dim(seg: *const ClcSegment) -> usize {
    seg.as_ref().map_or(0, |s| s.0.output_dim())
}

/// Forward pass over a row-major `rows x input_dim` batch into a
/// `rows x output_dim` buffer.
///
/// # Safety
/// `seg` must be a live handle; `x` must hold `rows * input_dim` values and
/// `out` must have room for `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn clc_segment_infer(
    seg: *const ClcSegment,
    x: *const f64,
    rows: usize,
    out: *mut f64,
    out_len: usize,
) -> ClcStatus {
    guard(|| {
        let seg = &borrow(seg, "seg")?.0;
        let input = slice(x, rows * seg.input_dim(), "x")?;
        let need = rows * seg.output_dim();
        if out_len < need {
            return Err(Fail(
                ClcStatus::BufferTooSmall,
                format!("need {need} output slots, have {out_len}"),
            ));
        }
        let y = seg.infer(&TensorF64::matrix(rows, seg.input_dim(), input.to_vec())?)?;
        if need > 0 {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(y.values().as_ptr(), out, need);
        }
        Ok(())
    })
}

/// # Safety
/// `seg` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clc_segment_free(seg: *mut ClcSegment) {
    if !seg.is_null() {
        drop(Box::from_raw(seg));
    }
}

/// Checks the released chain `trainers[0..n]` against the cache and the
/// public manifest at `manifest_path`. A failed check is not an error: the
/// call returns `Ok` and the verdict is read from the report.
///
/// # Safety
/// `trainers` must point to `n` live segment handles, `cache` must be a live
/// handle, `manifest_path` a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn clc_verify_chain(
    trainers: *const *const ClcSegment,
    n: usize,
    cache: *const ClcDpCache,
    manifest_path: *const c_char,
    eta_goal: f64,
    out: *mut *mut ClcReport,
) -> ClcStatus {
    guard(|| {
        let handles = slice(trainers, n, "trainers")?;
        let segs = handles
            .iter()
            .map(|&h| borrow(h, "trainer").map(|s| s.0.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let cache = borrow(cache, "cache")?;
        let manifest = ChainManifest::load(&path_arg(manifest_path, "manifest_path")?)?;
        let report = verify(&segs, &cache.0, &manifest, eta_goal, None)?;
        put(out, Box::into_raw(Box::new(ClcReport(report))), "out")
    })
}

/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_report_success(report: *const ClcReport) -> bool {
    report.as_ref().is_some_and(|r| r.0.is_success())
}

/// # Safety
/// `report` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn clc_report_link_count(report: *const ClcReport) -> usize {
    report.as_ref().map_or(0, |r| r.0.per_link.len())
}

/// Detection rate of the `i`-th checked link.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_report_link_eta(report: *const ClcReport, i: usize, out: *mut f64) -> ClcStatus {
    guard(|| {
        let report = borrow(report, "report")?;
        let link = report.0.per_link.get(i).ok_or_else(|| {
            Fail(
                ClcStatus::InvalidArgument,
                format!("link {i} out of range for {} links", report.0.per_link.len()),
            )
        })?;
        put(out, link.eta, "out")
    })
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_report_to_json(report: *const ClcReport, out: *mut *mut c_char) -> ClcStatus {
    guard(|| {
        let report = borrow(report, "report")?;
        let json = serde_json::to_string(&report.0).map_err(Error::from)?;
        put(out, into_c_string(json)?, "out")
    })
}

/// # Safety
/// `report` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn clc_report_free(report: *mut ClcReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Per-link transfer seconds `size / bandwidth + overhead` into
/// `per_link[0..n]`, and their sum into `total`.
///
/// # Safety
/// `sizes` must hold `n` values, `per_link` must have room for `n` values
/// and `total` must be writable.
#[no_mangle]
pub unsafe extern "C" fn clc_estimate_latency(
    sizes: *const f64,
    n: usize,
    bandwidth: f64,
    overhead: f64,
    per_link: *mut f64,
    total: *mut f64,
) -> ClcStatus {
    guard(|| {
        let sizes = slice(sizes, n, "sizes")?;
        let (each, sum) = estimate_latency(sizes, bandwidth, overhead)?;
        if n > 0 {
            if per_link.is_null() {
                return Err(null("per_link"));
            }
            ptr::copy_nonoverlapping(each.as_ptr(), per_link, n);
        }
        put(total, sum, "total")
    })
}
