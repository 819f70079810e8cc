//! C ABI over `priorwarp`.
//!
//! Objects cross the boundary as opaque handles created by `pw_*_new`,
//! `pw_*_read` or an operation, and released with the matching `pw_*_free`.
//! Every fallible call returns a [`PwStatus`]; on failure the message of the
//! last error on the calling thread is available from
//! [`pw_last_error_message`]. Panics never unwind into C: they are caught and
//! reported as [`PwStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use priorwarp::optimizer::{fit_case, FitConfig, FitReport};
use priorwarp::prior::init_prior;
use priorwarp::volume::{read_volume, write_volume, VolumeFile};
use priorwarp::{metrics, AnatomicalPrior, DeformParams, Dims, Error, LabelMap, TpsSystem};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PwStatus {
    Ok = 0,
    /// A required pointer was null.
    NullPointer = 1,
    /// An argument was out of range or shapes disagreed.
    Argument = 2,
    /// A file or text did not match its expected format.
    Format = 3,
    /// Non-finite values, a singular system or a diverged fit.
    Numeric = 4,
    Io = 5,
    /// A Rust panic was caught at the boundary.
    Panic = 6,
}

/// A label map: one class index per voxel, 0 for background.
pub struct PwLabels(LabelMap);

/// Prior logits, one channel per foreground class.
pub struct PwPrior(AnatomicalPrior);

/// Per-class shifts and control-point displacements.
pub struct PwParams(DeformParams);

/// Outcome of a fit, including its JSON serialization.
pub struct PwReport {
    report: FitReport,
    json: CString,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> PwStatus {
    match e {
        Error::Argument(_) => PwStatus::Argument,
        Error::Format { .. } => PwStatus::Format,
        Error::Numeric(_) | Error::Singular { .. } | Error::Divergence { .. } => PwStatus::Numeric,
        Error::Io(_) => PwStatus::Io,
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), PwStatus>) -> PwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PwStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => {
            set_error("panic inside priorwarp");
            PwStatus::Panic
        }
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, PwStatus>;
}

impl<T> OrStatus<T> for priorwarp::Result<T> {
    fn or_status(self) -> Result<T, PwStatus> {
        self.map_err(|e| {
            set_error(e.to_string());
            status_of(&e)
        })
    }
}

fn null(what: &str) -> PwStatus {
    set_error(format!("{what} is null"));
    PwStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, PwStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path<'a>(p: *const c_char) -> Result<&'a str, PwStatus> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error("path is not valid UTF-8");
        PwStatus::Argument
    })
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), PwStatus> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn dims_from(dims: *const usize) -> Result<Dims, PwStatus> {
    if dims.is_null() {
        return Err(null("dims"));
    }
    let d = std::slice::from_raw_parts(dims, 3);
    Ok(Dims::new(d[0], d[1], d[2]))
}

/// Library and format versions as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn pw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), " (volume format PWV1, params v1)\0").as_ptr().cast()
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length excluding the NUL.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pw_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let bytes = e.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Builds a label map from `h*w*d` labels laid out with `d` fastest.
///
/// # Safety
/// `dims` points to 3 values, `labels` to their product, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_new(dims: *const usize, labels: *const u8, out: *mut *mut PwLabels) -> PwStatus {
    guard(|| {
        let dims = dims_from(dims)?;
        dims.validate().or_status()?;
        if labels.is_null() {
            return Err(null("labels"));
        }
        let data = std::slice::from_raw_parts(labels, dims.voxels()).to_vec();
        put(out, PwLabels(LabelMap::from_labels(dims, data).or_status()?))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_read(path_: *const c_char, out: *mut *mut PwLabels) -> PwStatus {
    guard(|| {
        let labels = read_volume(path(path_)?).and_then(VolumeFile::into_labels).or_status()?;
        put(out, PwLabels(labels))
    })
}

/// # Safety
/// `labels` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_write(labels: *const PwLabels, path_: *const c_char) -> PwStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        write_volume(&VolumeFile::Labels(l.0.clone()), path(path_)?).or_status()
    })
}

/// Writes `(h, w, d)` into `dims`.
///
/// # Safety
/// `labels` is a live handle; `dims` points to 3 writable values.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_dims(labels: *const PwLabels, dims: *mut usize) -> PwStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        if dims.is_null() {
            return Err(null("dims"));
        }
        let d = l.0.dims().as_array();
        ptr::copy_nonoverlapping(d.as_ptr(), dims, 3);
        Ok(())
    })
}

/// Copies the labels into `buf`, which must hold `h*w*d` bytes.
///
/// # Safety
/// `labels` is a live handle; `buf` points to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_copy(labels: *const PwLabels, buf: *mut u8, len: usize) -> PwStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        if buf.is_null() {
            return Err(null("buf"));
        }
        let src = l.0.labels();
        if len < src.len() {
            set_error(format!("buffer holds {len} bytes, need {}", src.len()));
            return Err(PwStatus::Argument);
        }
        ptr::copy_nonoverlapping(src.as_ptr(), buf, src.len());
        Ok(())
    })
}

/// # Safety
/// `labels` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_labels_free(labels: *mut PwLabels) {
    if !labels.is_null() {
        drop(Box::from_raw(labels));
    }
}

/// Seeded near-uniform prior for `c_cls` classes.
///
/// # Safety
/// `dims` points to 3 values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_prior_random(c_cls: usize, dims: *const usize, seed: u64, out: *mut *mut PwPrior) -> PwStatus {
    guard(|| {
        let dims = dims_from(dims)?;
        put(out, PwPrior(init_prior(c_cls, dims, seed).or_status()?))
    })
}

/// Prior whose logits follow the signed distance to each class boundary.
///
/// # Safety
/// `labels` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_prior_from_labels(
    labels: *const PwLabels,
    c_cls: usize,
    slope: f64,
    cap: f64,
    out: *mut *mut PwPrior,
) -> PwStatus {
    guard(|| {
        let l = borrow(labels, "labels")?;
        put(out, PwPrior(AnatomicalPrior::from_labels_smooth(&l.0, c_cls, slope, cap).or_status()?))
    })
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_prior_read(path_: *const c_char, out: *mut *mut PwPrior) -> PwStatus {
    guard(|| put(out, PwPrior(AnatomicalPrior::load(path(path_)?).or_status()?)))
}

/// Writes the logits and their `.json` sidecar.
///
/// # Safety
/// `prior` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pw_prior_write(prior: *const PwPrior, path_: *const c_char) -> PwStatus {
    guard(|| borrow(prior, "prior")?.0.save(path(path_)?).or_status())
}

/// # Safety
/// `prior` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_prior_free(prior: *mut PwPrior) {
    if !prior.is_null() {
        drop(Box::from_raw(prior));
    }
}

/// Fits shifts and displacements of `prior` to `target`. `config_json` may
/// be null for the desk defaults, or a JSON object of fit options; missing
/// keys keep their desk values.
///
/// # Safety
/// Handles are live; `config_json` is null or NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_fit(
    target: *const PwLabels,
    prior: *const PwPrior,
    config_json: *const c_char,
    out: *mut *mut PwReport,
) -> PwStatus {
    guard(|| {
        let target = borrow(target, "target")?;
        let prior = borrow(prior, "prior")?;
        let cfg = if config_json.is_null() {
            FitConfig::desk()
        } else {
            let text = path(config_json)?;
            fit_config_from_json(text).or_status()?
        };
        let sys = TpsSystem::lattice(cfg.grid, target.0.dims()).or_status()?;
        let report = fit_case(&target.0, &prior.0, &sys, &cfg).or_status()?;
        let json = serde_json::to_string(&report).map_err(|e| {
            set_error(e.to_string());
            PwStatus::Numeric
        })?;
        put(
            out,
            PwReport {
                report,
                json: CString::new(json).expect("json has no nul"),
            },
        )
    })
}

fn fit_config_from_json(text: &str) -> priorwarp::Result<FitConfig> {
    let mut base = serde_json::to_value(FitConfig::desk()).expect("config serializes");
    let patch: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Format { field: "config", message: e.to_string() })?;
    let serde_json::Value::Object(patch) = patch else {
        return Err(Error::Format {
            field: "config",
            message: "expected a JSON object".into(),
        });
    };
    for (k, v) in patch {
        base.as_object_mut().expect("object").insert(k, v);
    }
    let cfg: FitConfig =
        serde_json::from_value(base).map_err(|e| Error::Format { field: "config", message: e.to_string() })?;
    cfg.validate()?;
    Ok(cfg)
}

/// Mean Dice of the fitted, deformed prior against the target.
///
/// # Safety
/// `report` is a live handle; `dice` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_report_final_dice(report: *const PwReport, dice: *mut f64) -> PwStatus {
    guard(|| {
        let r = borrow(report, "report")?;
        if dice.is_null() {
            return Err(null("dice"));
        }
        *dice = r.report.final_dice();
        Ok(())
    })
}

/// The report as JSON text, owned by the handle and valid until it is freed.
///
/// # Safety
/// `report` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn pw_report_json(report: *const PwReport) -> *const c_char {
    report.as_ref().map_or(ptr::null(), |r| r.json.as_ptr())
}

/// Fitted parameters as a new handle.
///
/// # Safety
/// `report` is a live handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_report_params(report: *const PwReport, out: *mut *mut PwParams) -> PwStatus {
    guard(|| {
        let r = &borrow(report, "report")?.report;
        put(
            out,
            PwParams(DeformParams {
                theta: r.theta.clone(),
                delta: r.delta.clone(),
                grid: r.grid.into(),
            }),
        )
    })
}

/// # Safety
/// `report` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_report_free(report: *mut PwReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_params_read(path_: *const c_char, out: *mut *mut PwParams) -> PwStatus {
    guard(|| put(out, PwParams(DeformParams::load(path(path_)?).or_status()?)))
}

/// # Safety
/// `params` is a live handle; `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pw_params_write(params: *const PwParams, path_: *const c_char) -> PwStatus {
    guard(|| borrow(params, "params")?.0.save(path(path_)?).or_status())
}

/// Warps a label map with the parameters and re-hardens it.
///
/// # Safety
/// Handles are live; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn pw_params_warp_labels(
    params: *const PwParams,
    labels: *const PwLabels,
    out: *mut *mut PwLabels,
) -> PwStatus {
    guard(|| {
        let p = borrow(params, "params")?;
        let l = borrow(labels, "labels")?;
        put(out, PwLabels(p.0.apply_labels(&l.0).or_status()?))
    })
}

/// # Safety
/// `params` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pw_params_free(params: *mut PwParams) {
    if !params.is_null() {
        drop(Box::from_raw(params));
    }
}

/// Mean DSC, HD95 and NSD over classes `1..=c_cls` at the first map's
/// spacing. HD95 and NSD are NaN when no class is present in both maps.
///
/// # Safety
/// Handles are live; the three outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn pw_eval(
    a: *const PwLabels,
    b: *const PwLabels,
    c_cls: usize,
    tau: f64,
    dsc: *mut f64,
    hd95: *mut f64,
    nsd: *mut f64,
) -> PwStatus {
    guard(|| {
        let a = borrow(a, "a")?;
        let b = borrow(b, "b")?;
        if dsc.is_null() || hd95.is_null() || nsd.is_null() {
            return Err(null("metric output"));
        }
        let r = metrics::evaluate(&a.0, &b.0, c_cls, tau, a.0.spacing()).or_status()?;
        *dsc = r.mean_dsc;
        *hd95 = r.mean_hd95.unwrap_or(f64::NAN);
        *nsd = r.mean_nsd.unwrap_or(f64::NAN);
        Ok(())
    })
}
