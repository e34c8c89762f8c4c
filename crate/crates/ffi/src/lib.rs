//! C ABI over `scvfp-core`.
//!
//! Every fallible function returns a [`ScvfpStatus`]; on failure a message is
//! stored per thread and can be fetched with [`scvfp_last_error_message`].
//! Models are opaque [`ScvfpModel`] handles released with [`scvfp_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use scvfp::checkpoint::Checkpoint;
use scvfp::objective::{cosine_similarity, metric_psnr, squared_error};
use scvfp::rng::Rng;
use scvfp::{Error, ModelState, RunSpec, Tensor, TensorError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScvfpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Format = 5,
    Config = 6,
    UndefinedMetric = 7,
    NonFinite = 8,
    Panic = 9,
}

/// Opaque model handle.
pub struct ScvfpModel {
    spec: RunSpec,
    state: ModelState,
    rng_state: [u64; 4],
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(ScvfpStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Tensor(TensorError::NonFinite { .. }) | Error::NonFiniteLoss { .. } => ScvfpStatus::NonFinite,
            Error::Tensor(TensorError::Shape { .. }) => ScvfpStatus::ShapeMismatch,
            Error::Tensor(_) => ScvfpStatus::InvalidArgument,
            Error::Format(_) => ScvfpStatus::Format,
            Error::Io(_) => ScvfpStatus::Io,
            Error::Json(_) | Error::Config(_) => ScvfpStatus::Config,
            Error::Data(_) => ScvfpStatus::InvalidArgument,
            Error::UndefinedMetric(_) => ScvfpStatus::UndefinedMetric,
        };
        Failure(status, e.to_string())
    }
}

impl From<TensorError> for Failure {
    fn from(e: TensorError) -> Self {
        Error::from(e).into()
    }
}

fn fail(status: ScvfpStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> ScvfpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            ScvfpStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            ScvfpStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(fail(ScvfpStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(ScvfpStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(fail(ScvfpStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn model_arg<'a>(m: *const ScvfpModel) -> Result<&'a ScvfpModel, Failure> {
    m.as_ref().ok_or_else(|| fail(ScvfpStatus::NullPointer, "model is null"))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), Failure> {
    if p.is_null() {
        return Err(fail(ScvfpStatus::NullPointer, format!("{what} is null")));
    }
    p.write(v);
    Ok(())
}

unsafe fn copy_out(out: *mut f64, out_len: usize, src: &[f64]) -> Result<(), Failure> {
    if out.is_null() {
        return Err(fail(ScvfpStatus::NullPointer, "output buffer is null"));
    }
    if out_len < src.len() {
        return Err(fail(
            ScvfpStatus::ShapeMismatch,
            format!("output buffer holds {out_len} values, need {}", src.len()),
        ));
    }
    std::ptr::copy_nonoverlapping(src.as_ptr(), out, src.len());
    Ok(())
}

fn window_tensor(model: &ScvfpModel, data: &[f64], rows: usize, cols: usize) -> Result<Tensor, Failure> {
    if cols != model.state.config.d {
        return Err(fail(
            ScvfpStatus::ShapeMismatch,
            format!("window width {cols}, model width {}", model.state.config.d),
        ));
    }
    Ok(Tensor::new(&[rows, cols], data.to_vec())?)
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn scvfp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or null. Free the result
/// with [`scvfp_string_free`].
#[no_mangle]
pub extern "C" fn scvfp_last_error_message() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null_mut(), |c| c.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a pointer returned by this library.
#[no_mangle]
pub unsafe extern "C" fn scvfp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Initialises a model from a JSON run config (null for defaults) and seed.
///
/// # Safety
/// `config_json` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_new(config_json: *const c_char, seed: u64, out: *mut *mut ScvfpModel) -> ScvfpStatus {
    guard(|| {
        let mut spec = if config_json.is_null() {
            RunSpec::default()
        } else {
            RunSpec::from_json(str_arg(config_json, "config_json")?)?
        };
        spec.train.seed = seed;
        let mut rng = Rng::seed(seed);
        let state = ModelState::init(&spec.model, &mut rng)?;
        let model = Box::new(ScvfpModel {
            spec,
            state,
            rng_state: rng.state(),
        });
        write_out(out, Box::into_raw(model), "out")
    })
}

/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_load(path: *const c_char, out: *mut *mut ScvfpModel) -> ScvfpStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        let ck = Checkpoint::read(&path)?;
        let model = Box::new(ScvfpModel {
            spec: ck.spec,
            state: ck.state,
            rng_state: ck.rng_state,
        });
        write_out(out, Box::into_raw(model), "out")
    })
}

/// Writes the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_save(model: *const ScvfpModel, path: *const c_char) -> ScvfpStatus {
    guard(|| {
        let m = model_arg(model)?;
        let path = PathBuf::from(str_arg(path, "path")?);
        let ck = Checkpoint {
            spec: m.spec.clone(),
            state: m.state.clone(),
            epoch: 0,
            rng_state: m.rng_state,
        };
        Ok(ck.write(&path)?)
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_free(model: *mut ScvfpModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Embedding width `d` and window length `M`.
///
/// # Safety
/// `model` must be a live handle; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_dims(model: *const ScvfpModel, d: *mut usize, seq_len: *mut usize) -> ScvfpStatus {
    guard(|| {
        let m = model_arg(model)?;
        write_out(d, m.state.config.d, "d")?;
        write_out(seq_len, m.state.config.seq_len, "seq_len")
    })
}

/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_param_count(model: *const ScvfpModel, out: *mut u64) -> ScvfpStatus {
    guard(|| {
        let m = model_arg(model)?;
        write_out(out, m.state.element_count(), "out")
    })
}

/// Predicts the next embedding from a row-major `rows × cols` window into
/// `out` (at least `cols` values).
///
/// # Safety
/// `window` must hold `rows·cols` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_predict_next(
    model: *const ScvfpModel,
    window: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> ScvfpStatus {
    guard(|| {
        let m = model_arg(model)?;
        let w = window_tensor(m, slice_arg(window, rows.saturating_mul(cols), "window")?, rows, cols)?;
        let pred = m.state.predict(&w)?;
        copy_out(out, out_len, pred.data())
    })
}

/// Autoregressive rollout; writes `steps × cols` values row-major.
///
/// # Safety
/// `window` must hold `rows·cols` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn scvfp_model_rollout(
    model: *const ScvfpModel,
    window: *const f64,
    rows: usize,
    cols: usize,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> ScvfpStatus {
    guard(|| {
        let m = model_arg(model)?;
        let w = window_tensor(m, slice_arg(window, rows.saturating_mul(cols), "window")?, rows, cols)?;
        let roll = m.state.rollout(&w, steps)?;
        copy_out(out, out_len, roll.predictions.data())
    })
}

/// `‖e − ê‖²` over `len` values.
///
/// # Safety
/// `e` and `e_hat` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_embedding_mse(e: *const f64, e_hat: *const f64, len: usize, out: *mut f64) -> ScvfpStatus {
    guard(|| {
        let v = squared_error(slice_arg(e, len, "e")?, slice_arg(e_hat, len, "e_hat")?)?;
        write_out(out, v, "out")
    })
}

/// `10·log10(255²/mse)`; fails with `UndefinedMetric` unless `mse > 0`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_metric_psnr(mse: f64, out: *mut f64) -> ScvfpStatus {
    guard(|| write_out(out, metric_psnr(mse)?, "out"))
}

/// # Safety
/// `a` and `b` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn scvfp_cosine_similarity(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> ScvfpStatus {
    guard(|| write_out(out, cosine_similarity(slice_arg(a, len, "a")?, slice_arg(b, len, "b")?), "out"))
}
