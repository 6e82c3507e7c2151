//! C ABI over `varfuse`.
//!
//! Every entry point returns a [`VfStatus`]. On failure the message is
//! available from [`vf_last_error`] on the same thread. Handles are opaque,
//! created by `*_new`/`*_read`/`*_load` functions and released with the
//! matching `*_free`. Model handles must stay on the thread that made them.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use varfuse::data::{generate_synthetic, read_container, write_container, Dataset, Record};
use varfuse::harness::{cmd_train, gradcheck, ExperimentConfig, Preset};
use varfuse::metrics::MetricsReport;
use varfuse::models::{load_checkpoint, Model};
use varfuse::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Dimension = 3,
    Domain = 4,
    Contract = 5,
    Format = 6,
    Schema = 7,
    Config = 8,
    Divergence = 9,
    Io = 10,
    Serialization = 11,
    Panic = 12,
}

/// The four F1 averages of a report.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct VfScores {
    pub micro: f64,
    pub macro_f1: f64,
    pub weighted: f64,
    pub samples: f64,
}

impl From<&MetricsReport> for VfScores {
    fn from(r: &MetricsReport) -> Self {
        VfScores {
            micro: r.micro,
            macro_f1: r.macro_,
            weighted: r.weighted,
            samples: r.samples,
        }
    }
}

pub struct VfConfig(ExperimentConfig);
pub struct VfDataset(Dataset);
pub struct VfModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Failure(VfStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Dimension { .. } => VfStatus::Dimension,
            Error::Domain(_) => VfStatus::Domain,
            Error::Contract(_) => VfStatus::Contract,
            Error::Format { .. } => VfStatus::Format,
            Error::Schema(_) => VfStatus::Schema,
            Error::Config(_) => VfStatus::Config,
            Error::Divergence { .. } => VfStatus::Divergence,
            Error::Io(_) => VfStatus::Io,
            _ => VfStatus::Serialization,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(VfStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VfStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            VfStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(&msg);
            VfStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(VfStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn handle<'a, H>(p: *const H, what: &str) -> Result<&'a H, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn handle_mut<'a, H>(p: *mut H, what: &str) -> Result<&'a mut H, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn emit<H>(out: *mut *mut H, value: H) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<H>(p: *mut H) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Message of the last failure on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn vf_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn vf_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// New configuration from a preset name, or the default when `name` is null.
///
/// # Safety
/// `name` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_config_new(name: *const c_char, out: *mut *mut VfConfig) -> VfStatus {
    guard(|| {
        let cfg = if name.is_null() {
            ExperimentConfig::default()
        } else {
            Preset::from_name(text(name, "name")?)?.config()
        };
        emit(out, VfConfig(cfg))
    })
}

/// Sets one `key = value` entry.
///
/// # Safety
/// `cfg` is a live handle; `key` and `value` are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vf_config_set(cfg: *mut VfConfig, key: *const c_char, value: *const c_char) -> VfStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let (k, v) = (text(key, "key")?, text(value, "value")?);
        let mut next = cfg.0.clone();
        next.set(k, v)?;
        next.validate()?;
        cfg.0 = next;
        Ok(())
    })
}

/// Applies a configuration file.
///
/// # Safety
/// `cfg` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vf_config_load(cfg: *mut VfConfig, path: *const c_char) -> VfStatus {
    guard(|| {
        let cfg = handle_mut(cfg, "cfg")?;
        let path = PathBuf::from(text(path, "path")?);
        let mut next = cfg.0.clone();
        next.apply_file(&path)?;
        cfg.0 = next;
        Ok(())
    })
}

/// # Safety
/// `cfg` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_config_free(cfg: *mut VfConfig) {
    free(cfg)
}

/// Reads an MMT1 container.
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_dataset_read(path: *const c_char, out: *mut *mut VfDataset) -> VfStatus {
    guard(|| {
        let ds = read_container(PathBuf::from(text(path, "path")?))?;
        emit(out, VfDataset(ds))
    })
}

/// Synthetic records at the full embedding widths.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_dataset_synthetic(
    seed: u64,
    records: usize,
    noise: f64,
    out: *mut *mut VfDataset,
) -> VfStatus {
    guard(|| emit(out, VfDataset(generate_synthetic(seed, records, noise)?)))
}

/// Writes an MMT1 container.
///
/// # Safety
/// `ds` is a live handle; `path` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vf_dataset_write(ds: *const VfDataset, path: *const c_char) -> VfStatus {
    guard(|| {
        let ds = handle(ds, "ds")?;
        write_container(PathBuf::from(text(path, "path")?), &ds.0)?;
        Ok(())
    })
}

/// Record count and widths. Any output pointer may be null.
///
/// # Safety
/// `ds` is a live handle; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn vf_dataset_shape(
    ds: *const VfDataset,
    records: *mut usize,
    text_dim: *mut usize,
    image_dim: *mut usize,
    n_classes: *mut usize,
) -> VfStatus {
    guard(|| {
        let ds = &handle(ds, "ds")?.0;
        for (p, v) in [
            (records, ds.len()),
            (text_dim, ds.text_dim),
            (image_dim, ds.image_dim),
            (n_classes, ds.n_classes),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_dataset_free(ds: *mut VfDataset) {
    free(ds)
}

/// Runs every configured cycle and writes the artifacts to `out_dir`.
/// `scores`, when non-null, receives the cycle means.
///
/// # Safety
/// `cfg` is a live handle; `out_dir` and `label` are NUL-terminated;
/// `scores` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn vf_train(
    cfg: *const VfConfig,
    label: *const c_char,
    out_dir: *const c_char,
    scores: *mut VfScores,
) -> VfStatus {
    guard(|| {
        let cfg = handle(cfg, "cfg")?;
        let report = cmd_train(&cfg.0, text(label, "label")?, &PathBuf::from(text(out_dir, "out_dir")?))?;
        if !scores.is_null() {
            *scores = VfScores::from(&report.aggregate);
        }
        Ok(())
    })
}

/// Model weights from a checkpoint written by training.
///
/// # Safety
/// `path` is NUL-terminated; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_model_load(path: *const c_char, out: *mut *mut VfModel) -> VfStatus {
    guard(|| {
        let ck = load_checkpoint(PathBuf::from(text(path, "path")?))?;
        emit(out, VfModel(ck.to_model()?))
    })
}

/// Text width, image width and class count of a model.
///
/// # Safety
/// `model` is a live handle; non-null outputs are writable.
#[no_mangle]
pub unsafe extern "C" fn vf_model_shape(
    model: *const VfModel,
    text_dim: *mut usize,
    image_dim: *mut usize,
    n_classes: *mut usize,
) -> VfStatus {
    guard(|| {
        let c = &handle(model, "model")?.0.config;
        for (p, v) in [(text_dim, c.text_dim), (image_dim, c.image_dim), (n_classes, c.n_classes)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Logits for `n` row-major records. `logits` holds `n · n_classes` values.
///
/// # Safety
/// `model` is a live handle; `text` holds `n · text_dim` floats, `image`
/// holds `n · image_dim` floats and `logits` has room for `n · n_classes`.
#[no_mangle]
pub unsafe extern "C" fn vf_model_predict(
    model: *const VfModel,
    text: *const f32,
    image: *const f32,
    n: usize,
    logits: *mut f64,
) -> VfStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        if n == 0 {
            return Ok(());
        }
        if text.is_null() || image.is_null() || logits.is_null() {
            return Err(null("input or output buffer"));
        }
        let c = &model.config;
        let (td, id, k) = (c.text_dim, c.image_dim, c.n_classes);
        let text = std::slice::from_raw_parts(text, n * td);
        let image = std::slice::from_raw_parts(image, n * id);
        let mut ds = Dataset::empty(td, id, k);
        ds.records = (0..n)
            .map(|i| Record {
                id: i.to_string(),
                text_emb: text[i * td..(i + 1) * td].to_vec(),
                image_emb: image[i * id..(i + 1) * id].to_vec(),
                labels: vec![0; k],
            })
            .collect();
        let indices: Vec<usize> = (0..n).collect();
        let out = model.predict_logits(&ds, &indices, 512)?;
        ptr::copy_nonoverlapping(out.as_ptr(), logits, out.len());
        Ok(())
    })
}

/// Scores of thresholded predictions over every record of `ds`.
///
/// # Safety
/// `model` and `ds` are live handles; `scores` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_model_evaluate(
    model: *const VfModel,
    ds: *const VfDataset,
    threshold: f64,
    scores: *mut VfScores,
) -> VfStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let ds = &handle(ds, "ds")?.0;
        if scores.is_null() {
            return Err(null("scores"));
        }
        let indices: Vec<usize> = (0..ds.len()).collect();
        *scores = VfScores::from(&model.evaluate(ds, &indices, threshold)?);
        Ok(())
    })
}

/// # Safety
/// `model` is null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vf_model_free(model: *mut VfModel) {
    free(model)
}

/// Runs the gradient-check suite. `failed` receives the number of failing
/// checks; the status is `Ok` even when some fail.
///
/// # Safety
/// `failed` is writable.
#[no_mangle]
pub unsafe extern "C" fn vf_gradcheck(seed: u64, checks: *mut u32, failed: *mut u32) -> VfStatus {
    guard(|| {
        let results = gradcheck::run_suite(seed, false)?;
        if !checks.is_null() {
            *checks = results.len() as u32;
        }
        if !failed.is_null() {
            *failed = results.iter().filter(|r| !r.passed()).count() as u32;
        }
        Ok(())
    })
}
