//! C ABI over the turbogan library.
//!
//! Every function returns a [`TgStatus`]; on failure the message is kept per
//! thread and can be read with [`tg_last_error`]. Handles are opaque and must
//! be released with the matching `*_free` function. Panics never cross the
//! boundary; they surface as [`TgStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use turbogan::field::{MODANE_INTEGRAL_SCALE, MODANE_KOLMOGOROV_SCALE};
use turbogan::generator::{generate, Generator};
use turbogan::nn::{Checkpoint, ParamStore};
use turbogan::oracles::{OracleKind, OracleSpec};
use turbogan::stats::{stat_curves, zeta_fit};
use turbogan::{Error, FieldEnsemble, ScaleGrid};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    InvalidArgument = 1,
    DegenerateInput = 2,
    Format = 3,
    Io = 4,
    Divergence = 5,
    NullPointer = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgOracleKind {
    Gaussian = 0,
    Fbm = 1,
    Mrw = 2,
}

/// Opaque ensemble of `R` realizations of `N` samples.
pub struct TgEnsemble(FieldEnsemble);

/// Opaque trained generator.
pub struct TgGenerator {
    model: Generator,
    params: ParamStore<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> TgStatus {
    match e {
        Error::InvalidArgument(_) => TgStatus::InvalidArgument,
        Error::DegenerateInput(_) | Error::DegenerateScale { .. } => TgStatus::DegenerateInput,
        Error::Format { .. } | Error::FormatVersion { .. } => TgStatus::Format,
        Error::Io { .. } => TgStatus::Io,
        Error::Divergence { .. } => TgStatus::Divergence,
    }
}

enum Fail {
    Lib(Error),
    Null(&'static str),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            TgStatus::Ok
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer passed for {what}"));
            TgStatus::NullPointer
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            TgStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or(Fail::Null(what))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::InvalidArgument("path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a, T>(p: *mut T, len: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null("output handle"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len - 1` bytes). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn tg_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Samples an oracle ensemble. `hurst` is ignored for Gaussian noise;
/// `lambda2` and `correlation_length` only apply to MRW.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_synth(
    kind: TgOracleKind,
    hurst: f64,
    lambda2: f64,
    correlation_length: usize,
    realizations: usize,
    samples: usize,
    seed: u64,
    out: *mut *mut TgEnsemble,
) -> TgStatus {
    guard(|| {
        let kind = match kind {
            TgOracleKind::Gaussian => OracleKind::Gaussian,
            TgOracleKind::Fbm => OracleKind::Fbm { hurst },
            TgOracleKind::Mrw => OracleKind::Mrw {
                hurst,
                lambda2,
                correlation_length,
            },
        };
        let ens = OracleSpec {
            kind,
            realizations,
            samples,
            seed,
        }
        .generate()?;
        put(out, TgEnsemble(ens))
    })
}

/// Copies `realizations * samples` row-major values into a new ensemble.
///
/// # Safety
/// `data` must point to `realizations * samples` readable doubles.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_from_data(
    data: *const f64,
    realizations: usize,
    samples: usize,
    out: *mut *mut TgEnsemble,
) -> TgStatus {
    guard(|| {
        let n = realizations
            .checked_mul(samples)
            .ok_or_else(|| Error::InvalidArgument("ensemble size overflows".into()))?;
        let v = slice_arg(data, n, "data")?.to_vec();
        put(out, TgEnsemble(FieldEnsemble::new(v, realizations, samples)?))
    })
}

/// Reads `<path>.f32` and `<path>.meta`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_read(path: *const c_char, out: *mut *mut TgEnsemble) -> TgStatus {
    guard(|| {
        let p = path_arg(path)?;
        put(out, TgEnsemble(FieldEnsemble::read(&p)?))
    })
}

/// Writes `<path>.f32` and `<path>.meta`.
///
/// # Safety
/// `ens` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_write(ens: *const TgEnsemble, path: *const c_char) -> TgStatus {
    guard(|| {
        let e = non_null(ens, "ensemble")?;
        e.0.write(&path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `ens` must be a live handle; the output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_shape(
    ens: *const TgEnsemble,
    realizations: *mut usize,
    samples: *mut usize,
) -> TgStatus {
    guard(|| {
        let e = non_null(ens, "ensemble")?;
        let r = realizations.as_mut().ok_or(Fail::Null("realizations"))?;
        let n = samples.as_mut().ok_or(Fail::Null("samples"))?;
        *r = e.0.realizations();
        *n = e.0.samples();
        Ok(())
    })
}

/// Copies the row-major data into `buf`, which must hold exactly `R * N` values.
///
/// # Safety
/// `buf` must point to `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_data(ens: *const TgEnsemble, buf: *mut f64, len: usize) -> TgStatus {
    guard(|| {
        let e = non_null(ens, "ensemble")?;
        if len != e.0.data().len() {
            return Err(Error::InvalidArgument(format!(
                "buffer holds {len} values, ensemble has {}",
                e.0.data().len()
            ))
            .into());
        }
        out_slice(buf, len, "buffer")?.copy_from_slice(e.0.data());
        Ok(())
    })
}

/// # Safety
/// `ens` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_ensemble_free(ens: *mut TgEnsemble) {
    if !ens.is_null() {
        drop(Box::from_raw(ens));
    }
}

/// Ensemble-mean `log S_2`, skewness and `log(F/3)` at the given lags.
/// Each output array must hold `n_lags` values.
///
/// # Safety
/// `lags` must point to `n_lags` values and each output to `n_lags` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tg_stat_curves(
    ens: *const TgEnsemble,
    lags: *const usize,
    n_lags: usize,
    log_s2: *mut f64,
    skewness: *mut f64,
    log_flatness_over_3: *mut f64,
) -> TgStatus {
    guard(|| {
        let e = non_null(ens, "ensemble")?;
        let lags = slice_arg(lags, n_lags, "lags")?.to_vec();
        let grid = ScaleGrid::new(lags, MODANE_INTEGRAL_SCALE, MODANE_KOLMOGOROV_SCALE)?;
        let c = stat_curves(&e.0, &grid)?;
        out_slice(log_s2, n_lags, "log_s2")?.copy_from_slice(&c.log_s2);
        out_slice(skewness, n_lags, "skewness")?.copy_from_slice(&c.skewness);
        out_slice(log_flatness_over_3, n_lags, "log_flatness_over_3")?.copy_from_slice(&c.log_flatness_over_3);
        Ok(())
    })
}

/// Scaling exponents on the default lag grid, fitted over `[fit_min, fit_max]`.
///
/// # Safety
/// `orders` must point to `n_orders` values and `zeta` to `n_orders` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn tg_zeta_fit(
    ens: *const TgEnsemble,
    orders: *const f64,
    n_orders: usize,
    fit_min: f64,
    fit_max: f64,
    zeta: *mut f64,
) -> TgStatus {
    guard(|| {
        let e = non_null(ens, "ensemble")?;
        let orders = slice_arg(orders, n_orders, "orders")?;
        let grid = ScaleGrid::default_for(e.0.samples())?;
        let z = zeta_fit(&e.0, orders, [fit_min, fit_max], &grid)?;
        out_slice(zeta, n_orders, "zeta")?.copy_from_slice(&z.zeta);
        Ok(())
    })
}

/// Loads the generator stored in a training checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tg_generator_load(path: *const c_char, out: *mut *mut TgGenerator) -> TgStatus {
    guard(|| {
        let ck = Checkpoint::load(&path_arg(path)?)?;
        let (model, params) = turbogan::training::load_generator(&ck)?;
        put(out, TgGenerator { model, params })
    })
}

/// Generates `realizations` signals of `samples` values after trimming `border` samples.
///
/// # Safety
/// `gen` must be a live handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn tg_generator_generate(
    gen: *const TgGenerator,
    realizations: usize,
    samples: usize,
    border: usize,
    seed: u64,
    out: *mut *mut TgEnsemble,
) -> TgStatus {
    guard(|| {
        let g = non_null(gen, "generator")?;
        let ens = generate(&g.model, &g.params, realizations, samples, border, seed)?;
        put(out, TgEnsemble(ens))
    })
}

/// Trainable parameter count of a loaded generator.
///
/// # Safety
/// `gen` must be a live handle and `count` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tg_generator_param_count(gen: *const TgGenerator, count: *mut usize) -> TgStatus {
    guard(|| {
        let g = non_null(gen, "generator")?;
        *count.as_mut().ok_or(Fail::Null("count"))? = g.model.param_count();
        Ok(())
    })
}

/// # Safety
/// `gen` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tg_generator_free(gen: *mut TgGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}
