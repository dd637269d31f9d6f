//! C ABI for `copl-core`.
//!
//! Datasets and trained models cross the boundary as opaque handles
//! released with the matching `*_free`. Every fallible call
//! returns a status code; on failure the message is available from
//! [`copl_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use copl_core::classifier::{ClassifierConfig, Model};
use copl_core::conditioners::Method;
use copl_core::encoders::ClassEmbeddingTable;
use copl_core::eval::{
    harmonic_mean, run_ablation_global_vs_local, run_base_to_new, run_cross_dataset, run_incremental, train_base,
    MetricRow, Protocol, RunConfig,
};
use copl_core::gradcheck::run_suite;
use copl_core::numerics::Tensor;
use copl_core::synthdata::{generate, Dataset, DatasetDescriptor, FeatureCache, Split};
use copl_core::Error;

pub const COPL_OK: i32 = 0;
pub const COPL_ERR_NULL_POINTER: i32 = 1;
pub const COPL_ERR_INVALID_ARGUMENT: i32 = 2;
pub const COPL_ERR_NUMERICAL: i32 = 3;
pub const COPL_ERR_IO: i32 = 4;
pub const COPL_ERR_FORMAT: i32 = 5;
pub const COPL_ERR_SHAPE: i32 = 6;
pub const COPL_ERR_PANIC: i32 = 7;

/// Label spaces accepted by [`copl_model_classify`].
pub const COPL_SPLIT_BASE: i32 = 0;
pub const COPL_SPLIT_NEW: i32 = 1;
pub const COPL_SPLIT_ALL: i32 = 2;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_last_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFiniteLoss { .. }
            | Error::NonFiniteObjective
            | Error::NonFiniteInput
            | Error::DegenerateFeature
            | Error::DegenerateVector => COPL_ERR_NUMERICAL,
            Error::Io(_) => COPL_ERR_IO,
            Error::BadMagic
            | Error::Truncated { .. }
            | Error::RecordLengthMismatch { .. }
            | Error::DimInconsistent(_) => COPL_ERR_FORMAT,
            Error::ShapeMismatch(_) | Error::PromptLengthMismatch { .. } => COPL_ERR_SHAPE,
            _ => COPL_ERR_INVALID_ARGUMENT,
        };
        Fail(code, e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(COPL_ERR_NULL_POINTER, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(COPL_ERR_INVALID_ARGUMENT, msg.into())
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            clear_last_error();
            COPL_OK
        }
        Ok(Err(Fail(code, msg))) => {
            set_last_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_last_error(format!("internal panic: {msg}"));
            COPL_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn opt_json<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &str) -> Result<T, Fail> {
    if p.is_null() {
        return Ok(T::default());
    }
    let text = str_arg(p, what)?;
    serde_json::from_str(text).map_err(|e| invalid(format!("{what}: {e}")))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Generated or loaded samples with their class partition.
pub struct CoplDataset {
    inner: Dataset,
}

/// Learned prompt parameters together with the frozen encoders and class
/// embeddings of the dataset they were trained on.
pub struct CoplModel {
    model: Model,
    classes: ClassEmbeddingTable,
    base: Vec<usize>,
    new: Vec<usize>,
    gamma: f64,
}

/// One evaluation result. Absent accuracies are reported as NaN with the
/// matching `has_*` flag cleared.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoplMetricRow {
    pub seed: u64,
    pub has_seen: bool,
    pub seen_acc: f64,
    pub has_unseen: bool,
    pub unseen_acc: f64,
    pub has_hm: bool,
    pub hm: f64,
}

impl From<&MetricRow> for CoplMetricRow {
    fn from(r: &MetricRow) -> Self {
        Self {
            seed: r.seed,
            has_seen: r.seen_acc.is_some(),
            seen_acc: r.seen_acc.unwrap_or(f64::NAN),
            has_unseen: r.unseen_acc.is_some(),
            unseen_acc: r.unseen_acc.unwrap_or(f64::NAN),
            has_hm: r.hm.is_some(),
            hm: r.hm.unwrap_or(f64::NAN),
        }
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn copl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copy of the last error message on this thread, or NULL if the last call
/// succeeded. Release with [`copl_string_free`].
#[no_mangle]
pub extern "C" fn copl_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn copl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_harmonic_mean(a: f64, b: f64, out: *mut f64) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = harmonic_mean(a, b)?;
        Ok(())
    })
}

/// Generates a dataset from a JSON descriptor; NULL uses the defaults.
///
/// # Safety
/// `descriptor_json` must be NULL or a NUL-terminated string; `out` must be
/// valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_generate(descriptor_json: *const c_char, out: *mut *mut CoplDataset) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let desc: DatasetDescriptor = opt_json(descriptor_json, "descriptor")?;
        let inner = generate(&desc)?;
        *out = Box::into_raw(Box::new(CoplDataset { inner }));
        Ok(())
    })
}

/// Loads a CPFC1 feature cache. Classes are split into base and new by a
/// seeded partition with `split_fraction` base classes.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_load(
    path: *const c_char,
    split_fraction: f64,
    seed: u64,
    out: *mut *mut CoplDataset,
) -> i32 {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let cache = FeatureCache::load(&path)?;
        let inner = Dataset::from_cache(&cache, split_fraction, seed)?;
        *out = Box::into_raw(Box::new(CoplDataset { inner }));
        Ok(())
    })
}

/// Writes the dataset as a CPFC1 feature cache.
///
/// # Safety
/// `dataset` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_save(dataset: *const CoplDataset, path: *const c_char) -> i32 {
    guard(|| {
        let ds = handle(dataset, "dataset")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        ds.inner.to_cache().save(path)?;
        Ok(())
    })
}

/// Number of classes, base classes, samples, patches per sample and patch
/// dimension. Any output pointer may be NULL.
///
/// # Safety
/// `dataset` must be a live handle; non-NULL outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_shape(
    dataset: *const CoplDataset,
    num_classes: *mut usize,
    num_base: *mut usize,
    num_samples: *mut usize,
    patches: *mut usize,
    image_dim: *mut usize,
) -> i32 {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        let write = |p: *mut usize, v: usize| {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        };
        write(num_classes, ds.num_classes());
        write(num_base, ds.ids_in(Split::Base).len());
        write(num_samples, ds.samples.len());
        write(patches, ds.patches);
        write(image_dim, ds.image_dim);
        Ok(())
    })
}

/// Label of sample `index` and a pointer to its row-major `patches ×
/// image_dim` features, valid until the dataset is freed.
///
/// # Safety
/// `dataset` must be a live handle; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_sample(
    dataset: *const CoplDataset,
    index: usize,
    label: *mut usize,
    features: *mut *const f64,
) -> i32 {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        let label = out_ptr(label, "label")?;
        let features = out_ptr(features, "features")?;
        let s = ds
            .samples
            .get(index)
            .ok_or_else(|| invalid(format!("sample {index} out of range for {}", ds.samples.len())))?;
        *label = s.label;
        *features = s.patches.data().as_ptr();
        Ok(())
    })
}

/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn copl_dataset_free(dataset: *mut CoplDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn parse_method(s: &str) -> Result<Method, Fail> {
    s.parse().map_err(|e: Error| invalid(e.to_string()))
}

/// Trains `method` on the base classes. `run_config_json` is NULL for
/// defaults or a JSON object of run settings (`prompt_len`, `token_dim`,
/// `joint_dim`, `gamma`, `shots`, `sgd`, ...).
///
/// # Safety
/// `dataset` must be a live handle; strings NUL-terminated or NULL where
/// allowed; `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_model_train(
    dataset: *const CoplDataset,
    method: *const c_char,
    run_config_json: *const c_char,
    seed: u64,
    out: *mut *mut CoplModel,
) -> i32 {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        let method = parse_method(str_arg(method, "method")?)?;
        let cfg: RunConfig = opt_json(run_config_json, "run config")?;
        let out = out_ptr(out, "out")?;
        let trained = train_base(method, ds, &cfg, seed)?;
        *out = Box::into_raw(Box::new(CoplModel {
            model: trained.model,
            classes: trained.classes,
            base: ds.ids_in(Split::Base),
            new: ds.ids_in(Split::New),
            gamma: cfg.gamma,
        }));
        Ok(())
    })
}

/// Writes the learned parameters as a COPL1 checkpoint.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn copl_model_save_checkpoint(model: *const CoplModel, path: *const c_char) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        m.model.params.save(path)?;
        Ok(())
    })
}

/// Predicts a class id for a row-major `rows × cols` patch matrix within
/// the label space `split` (one of the `COPL_SPLIT_*` constants).
///
/// # Safety
/// `model` must be a live handle; `patches` must point to `rows * cols`
/// readable doubles; `class_id` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn copl_model_classify(
    model: *const CoplModel,
    patches: *const f64,
    rows: usize,
    cols: usize,
    split: i32,
    class_id: *mut usize,
) -> i32 {
    guard(|| {
        let m = handle(model, "model")?;
        if patches.is_null() {
            return Err(null("patches"));
        }
        let out = out_ptr(class_id, "class_id")?;
        let n = rows.checked_mul(cols).ok_or_else(|| invalid("rows * cols overflows"))?;
        let data = std::slice::from_raw_parts(patches, n).to_vec();
        let x = Tensor::matrix(rows, cols, data)?;
        let ids = match split {
            COPL_SPLIT_BASE => m.base.clone(),
            COPL_SPLIT_NEW => m.new.clone(),
            COPL_SPLIT_ALL => (0..m.classes.num_classes()).collect(),
            other => return Err(invalid(format!("unknown split {other}"))),
        };
        let clf = ClassifierConfig::new(m.gamma, ids)?;
        *out = m.model.classify(&x, &m.classes, &clf)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn copl_model_free(model: *mut CoplModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs one evaluation protocol for one seed and writes up to `capacity`
/// rows. The ablation protocol produces two rows (copl, copl_global) and
/// ignores `method`; `target` is required for `cross_dataset` only.
///
/// # Safety
/// Handles must be live (or NULL where allowed); strings NUL-terminated or
/// NULL where allowed; `rows` must have room for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn copl_eval_run(
    dataset: *const CoplDataset,
    target: *const CoplDataset,
    protocol: *const c_char,
    method: *const c_char,
    run_config_json: *const c_char,
    seed: u64,
    rows: *mut CoplMetricRow,
    capacity: usize,
    written: *mut usize,
) -> i32 {
    guard(|| {
        let ds = &handle(dataset, "dataset")?.inner;
        let protocol: Protocol = str_arg(protocol, "protocol")?
            .parse()
            .map_err(|e: Error| invalid(e.to_string()))?;
        let cfg: RunConfig = opt_json(run_config_json, "run config")?;
        let written = out_ptr(written, "written")?;
        let results: Vec<MetricRow> = match protocol {
            Protocol::AblationGlobalVsLocal => run_ablation_global_vs_local(ds, &cfg, seed)?.to_vec(),
            p => {
                let m = parse_method(str_arg(method, "method")?)?;
                match p {
                    Protocol::BaseToNew => vec![run_base_to_new(m, ds, &cfg, seed)?],
                    Protocol::Incremental => vec![run_incremental(m, ds, &cfg, seed)?],
                    _ => {
                        let t = &handle(target, "target")?.inner;
                        vec![run_cross_dataset(m, ds, t, &cfg, seed)?]
                    }
                }
            }
        };
        if results.len() > capacity {
            return Err(invalid(format!(
                "{} rows do not fit capacity {capacity}",
                results.len()
            )));
        }
        if rows.is_null() {
            return Err(null("rows"));
        }
        for (i, r) in results.iter().enumerate() {
            *rows.add(i) = CoplMetricRow::from(r);
        }
        *written = results.len();
        Ok(())
    })
}

/// Runs the gradient-check suite on `instances` seeds per method. `passed`
/// is set to whether every check is within tolerance; `max_rel_error` may
/// be NULL.
///
/// # Safety
/// `passed` must be valid for writes; `max_rel_error` NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn copl_gradcheck(instances: usize, passed: *mut bool, max_rel_error: *mut f64) -> i32 {
    guard(|| {
        let passed = out_ptr(passed, "passed")?;
        if instances == 0 {
            return Err(invalid("instances must be positive"));
        }
        let report = run_suite(instances, None)?;
        *passed = report.pass();
        if let Some(e) = max_rel_error.as_mut() {
            *e = report.max_rel_error();
        }
        Ok(())
    })
}
