//! C ABI for the densemtl library: dataset generation, training, checkpoint
//! loading, prediction, and evaluation behind opaque handles.
//!
//! Conventions:
//! - every function returns a [`DmtlStatus`]; non-zero means failure and
//!   [`dmtl_last_error`] holds a thread-local UTF-8 message;
//! - handles are created and destroyed only by this library;
//! - strings are NUL-terminated UTF-8; buffers are caller-allocated with
//!   row-major layout.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, c_float, c_uint};

use densemtl::config::RunConfig;
use densemtl::data::{gen_synthetic, load_dataset, DatasetManifest, Sample, SyntheticSpec};
use densemtl::depth_space::DepthMap;
use densemtl::training::{evaluate, fit, load_checkpoint, predict_sample, TrainState};
use densemtl::Error;

/// Status codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DmtlStatus {
    /// Success.
    DmtlOk = 0,
    /// Unclassified runtime failure (including caught panics).
    DmtlErrRuntime = 1,
    /// Invalid configuration.
    DmtlErrConfig = 2,
    /// Dataset, checkpoint, or other I/O failure.
    DmtlErrData = 3,
    /// Numerical divergence during training.
    DmtlErrDivergence = 4,
    /// A required pointer argument was NULL.
    DmtlErrNullArgument = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").expect("empty"));
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).expect("no interior NUL");
    });
}

fn status_of(e: &Error) -> DmtlStatus {
    match e {
        Error::Config(_) => DmtlStatus::DmtlErrConfig,
        Error::Divergence { .. } | Error::NonFinite(_) => DmtlStatus::DmtlErrDivergence,
        _ => DmtlStatus::DmtlErrData,
    }
}

fn run<F: FnOnce() -> Result<DmtlStatus, Error>>(f: F) -> DmtlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(s)) => s,
        Ok(Err(e)) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| (*s).to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in library call".into());
            set_error(&msg);
            DmtlStatus::DmtlErrRuntime
        }
    }
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn cstr<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, Error> {
    if ptr.is_null() {
        return Err(Error::InvalidInput(format!("{name} is NULL")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Error::InvalidInput(format!("{name} is not UTF-8")))
}

/// Returns the message of the most recent failure on this thread; the pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn dmtl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// A trained model plus the dataset statistics it needs for inference.
pub struct DmtlModel {
    state: TrainState<f32>,
    manifest: DatasetManifest,
}

/// Evaluation metrics; fields without a value (e.g. mIoU for a depth-only
/// model) are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct DmtlEvalReport {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub miou: f64,
    pub pixel_acc: f64,
}

/// Generates the deterministic synthetic dataset under `out_dir` with
/// `train_count` train and `val_count` val scenes.
///
/// # Safety
/// `out_dir` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn dmtl_gen_data(
    out_dir: *const c_char,
    seed: u64,
    train_count: usize,
    val_count: usize,
) -> DmtlStatus {
    run(|| {
        let out = Path::new(cstr(out_dir, "out_dir")?);
        let spec = SyntheticSpec::default();
        gen_synthetic(out, "train", seed, train_count, &spec)?;
        gen_synthetic(out, "val", seed, val_count, &spec)?;
        Ok(DmtlStatus::DmtlOk)
    })
}

fn load_model(checkpoint: &Path, data: &Path) -> Result<Box<DmtlModel>, Error> {
    let state = load_checkpoint::<f32>(checkpoint, None)?;
    let manifest = DatasetManifest::load(data)?;
    Ok(Box::new(DmtlModel { state, manifest }))
}

/// Trains a model on the dataset at `data_dir`, maintaining a run directory
/// at `out_dir`. `config_text` may be NULL (defaults) or flat `key = value`
/// text with dotted namespaces. On success `*out_model`, when non-NULL,
/// receives the trained model.
///
/// # Safety
/// Pointer arguments must be valid; `out_model` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn dmtl_train(
    data_dir: *const c_char,
    out_dir: *const c_char,
    config_text: *const c_char,
    out_model: *mut *mut DmtlModel,
) -> DmtlStatus {
    run(|| {
        let data = Path::new(cstr(data_dir, "data_dir")?);
        let out = Path::new(cstr(out_dir, "out_dir")?);
        let mut rc = RunConfig::default();
        if !config_text.is_null() {
            rc.apply_text(cstr(config_text, "config_text")?)?;
        }
        rc.validate()?;
        let manifest = DatasetManifest::load(data)?;
        let train = load_dataset(data, "train", &manifest)?;
        let val = load_dataset(data, "val", &manifest)?;
        std::fs::create_dir_all(out)?;
        std::fs::write(out.join("config.snapshot"), rc.snapshot())?;
        let (state, _report) = fit::<f32>(
            &rc.model,
            &rc.train,
            &manifest,
            &train,
            &val,
            Some(out),
            None,
        )?;
        if !out_model.is_null() {
            *out_model = Box::into_raw(Box::new(DmtlModel { state, manifest }));
        }
        Ok(DmtlStatus::DmtlOk)
    })
}

/// Loads a model from a checkpoint directory; `data_dir` supplies the dataset
/// statistics (normalization, depth range) used at inference time.
///
/// # Safety
/// Pointer arguments must be valid and `out_model` non-NULL.
#[no_mangle]
pub unsafe extern "C" fn dmtl_model_load(
    checkpoint_dir: *const c_char,
    data_dir: *const c_char,
    out_model: *mut *mut DmtlModel,
) -> DmtlStatus {
    run(|| {
        if out_model.is_null() {
            set_error("out_model is NULL");
            return Ok(DmtlStatus::DmtlErrNullArgument);
        }
        let ckpt = Path::new(cstr(checkpoint_dir, "checkpoint_dir")?);
        let data = Path::new(cstr(data_dir, "data_dir")?);
        *out_model = Box::into_raw(load_model(ckpt, data)?);
        Ok(DmtlStatus::DmtlOk)
    })
}

/// Releases a model handle; NULL is a no-op.
///
/// # Safety
/// `model` must have been produced by this library and not freed before.
#[no_mangle]
pub unsafe extern "C" fn dmtl_model_free(model: *mut DmtlModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of trainable generator parameters.
///
/// # Safety
/// `model` must be a valid handle.
#[no_mangle]
pub unsafe extern "C" fn dmtl_model_param_count(model: *const DmtlModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).state.gen_store.count_scalars()
}

/// Runs inference on one RGB image (`3*height*width` floats in `[0, 1]`,
/// channel-major). Writes metric depth in meters to `out_depth` and class ids
/// to `out_labels` (each `height*width`, row-major); either output may be
/// NULL to skip it.
///
/// # Safety
/// Buffers must match the stated sizes; the image size must equal the model's
/// configured input size.
#[no_mangle]
pub unsafe extern "C" fn dmtl_model_predict(
    model: *const DmtlModel,
    image: *const c_float,
    height: usize,
    width: usize,
    out_depth: *mut c_float,
    out_labels: *mut c_uint,
) -> DmtlStatus {
    run(|| {
        if model.is_null() || image.is_null() {
            set_error("model or image is NULL");
            return Ok(DmtlStatus::DmtlErrNullArgument);
        }
        let m = &*model;
        let cfg = &m.state.net_cfg;
        if (height, width) != (cfg.image_height, cfg.image_width) {
            return Err(Error::InvalidInput(format!(
                "expected a {}x{} image, got {height}x{width}",
                cfg.image_height, cfg.image_width
            )));
        }
        let pixels = std::slice::from_raw_parts(image, 3 * height * width);
        let mut rgb = ndarray::Array3::<f64>::zeros((height, width, 3));
        for c in 0..3 {
            for i in 0..height {
                for j in 0..width {
                    rgb[(i, j, c)] = f64::from(pixels[(c * height + i) * width + j]);
                }
            }
        }
        // prediction ignores ground truth; attach valid placeholders
        let sample = Sample {
            image: rgb,
            depth: DepthMap::dense(ndarray::Array2::from_elem(
                (height, width),
                m.manifest.d_min,
            )),
            labels: ndarray::Array2::zeros((height, width)),
            id: "ffi".into(),
        };
        let preds = predict_sample(
            &m.state.net,
            &m.state.gen_store,
            &m.manifest,
            m.state.cfg.depth_space,
            std::slice::from_ref(&sample),
        )?;
        let (depth, labels) = preds.into_iter().next().expect("one sample in, one out");
        if !out_depth.is_null() {
            let d = depth.ok_or_else(|| {
                Error::InvalidInput("model has no depth head".into())
            })?;
            let out = std::slice::from_raw_parts_mut(out_depth, height * width);
            for i in 0..height {
                for j in 0..width {
                    out[i * width + j] = d.values[(i, j)] as f32;
                }
            }
        }
        if !out_labels.is_null() {
            let l = labels.ok_or_else(|| {
                Error::InvalidInput("model has no segmentation head".into())
            })?;
            let out = std::slice::from_raw_parts_mut(out_labels, height * width);
            for i in 0..height {
                for j in 0..width {
                    out[i * width + j] = l[(i, j)];
                }
            }
        }
        Ok(DmtlStatus::DmtlOk)
    })
}

/// Evaluates the model over one dataset split and fills `out_report`.
///
/// # Safety
/// Pointer arguments must be valid and `out_report` non-NULL.
#[no_mangle]
pub unsafe extern "C" fn dmtl_model_evaluate(
    model: *const DmtlModel,
    data_dir: *const c_char,
    split: *const c_char,
    out_report: *mut DmtlEvalReport,
) -> DmtlStatus {
    run(|| {
        if model.is_null() || out_report.is_null() {
            set_error("model or out_report is NULL");
            return Ok(DmtlStatus::DmtlErrNullArgument);
        }
        let m = &*model;
        let data = Path::new(cstr(data_dir, "data_dir")?);
        let split = cstr(split, "split")?;
        let manifest = DatasetManifest::load(data)?;
        let samples = load_dataset(data, split, &manifest)?;
        let ev = evaluate(
            &m.state.net,
            &m.state.gen_store,
            &manifest,
            m.state.cfg.depth_space,
            &samples,
            m.state.cfg.batch_size,
        )?;
        let v = |x: Option<f64>| x.unwrap_or(f64::NAN);
        *out_report = DmtlEvalReport {
            abs_rel: v(ev.abs_rel),
            sq_rel: v(ev.sq_rel),
            rmse: v(ev.rmse),
            rmse_log: v(ev.rmse_log),
            delta1: v(ev.delta1),
            delta2: v(ev.delta2),
            delta3: v(ev.delta3),
            miou: v(ev.miou),
            pixel_acc: v(ev.pixel_acc),
        };
        Ok(DmtlStatus::DmtlOk)
    })
}
