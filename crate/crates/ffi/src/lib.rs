//! C ABI over the `prcn` engine.
//!
//! Every fallible function returns a [`PrcnStatus`]; on failure the message
//! is kept per thread and read with [`prcn_last_error`]. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.
//! Panics never cross the boundary; they surface as
//! [`PrcnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use prcn::arch::ModelSpec;
use prcn::connectome::Connectome;
use prcn::experiment::load_checkpoint;
use prcn::invariance::{mc_var_max_uniform, var_max_closed_form};
use prcn::model::Model;
use prcn::pool_kernel::{indirect_cmp_backward, indirect_cmp_forward, ArgMaxMap, PoolPlan};
use prcn::rng::Rng;
use prcn::{Error, Shape, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PrcnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Corrupt = 5,
    NonFinite = 6,
    Io = 7,
    StaleCache = 8,
    Panic = 9,
    Other = 10,
}

/// A permanent channel shuffle with its pooling plan.
pub struct PrcnConnectome {
    conn: Connectome,
    plan: PoolPlan,
}

/// Argmax record of one channel max pool forward pass.
pub struct PrcnArgmax {
    map: ArgMaxMap,
}

/// A compiled or loaded network.
pub struct PrcnModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> PrcnStatus {
    match e {
        Error::Sizing(_) | Error::Shape(_) => PrcnStatus::Shape,
        Error::Config(_) | Error::Ensemble(_) | Error::Label { .. } => PrcnStatus::Config,
        Error::Corrupt(_) | Error::Parse { .. } | Error::Checksum { .. } => PrcnStatus::Corrupt,
        Error::NonFinite { .. } | Error::Divergence { .. } => PrcnStatus::NonFinite,
        Error::StaleCache(_) => PrcnStatus::StaleCache,
        Error::Io(_) | Error::Fetch(_) => PrcnStatus::Io,
        _ => PrcnStatus::Other,
    }
}

struct Fail(PrcnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PrcnStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PrcnStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PrcnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            PrcnStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            PrcnStatus::Panic
        }
    }
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

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn prcn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn prcn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

// ---- order statistics ---------------------------------------------------

/// Variance of the maximum of `n` independent U(0,1) draws.
///
/// # Safety
/// `out` must be a valid pointer to a `double`.
#[no_mangle]
pub unsafe extern "C" fn prcn_var_max_closed_form(n: usize, out: *mut f64) -> PrcnStatus {
    guard(|| {
        *out_ptr(out, "out")? = var_max_closed_form(n)?;
        Ok(())
    })
}

/// Monte Carlo estimate of the same variance with its standard error.
///
/// # Safety
/// `estimate` and `std_err` must be valid pointers to `double`s.
#[no_mangle]
pub unsafe extern "C" fn prcn_mc_var_max(
    n: usize,
    samples: usize,
    seed: u64,
    estimate: *mut f64,
    std_err: *mut f64,
) -> PrcnStatus {
    guard(|| {
        let (e, s) = (out_ptr(estimate, "estimate")?, out_ptr(std_err, "std_err")?);
        let mc = mc_var_max_uniform(n, samples, &mut Rng::new(seed))?;
        *e = mc.estimate;
        *s = mc.stderr;
        Ok(())
    })
}

// ---- connectomes --------------------------------------------------------

fn boxed_connectome(conn: Connectome) -> *mut PrcnConnectome {
    let plan = PoolPlan::from_connectome(&conn);
    Box::into_raw(Box::new(PrcnConnectome { conn, plan }))
}

/// Draws a connectome over `expansion` channels pooled in groups of `cmp`.
/// With `randomized == 0` the shuffle is the identity.
///
/// # Safety
/// `out` must be a valid pointer; on success it receives a new handle.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_build(
    seed: u64,
    expansion: usize,
    cmp: usize,
    randomized: bool,
    out: *mut *mut PrcnConnectome,
) -> PrcnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed_connectome(Connectome::build(seed, expansion, cmp, randomized)?);
        Ok(())
    })
}

/// # Safety
/// `conn` must come from this library and not be used afterwards. Null is
/// accepted.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_free(conn: *mut PrcnConnectome) {
    if !conn.is_null() {
        drop(Box::from_raw(conn));
    }
}

/// # Safety
/// `conn` must be a live handle and the out pointers valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_dims(
    conn: *const PrcnConnectome,
    expansion: *mut usize,
    cmp: *mut usize,
    outputs: *mut usize,
) -> PrcnStatus {
    guard(|| {
        let c = &handle(conn, "conn")?.conn;
        *out_ptr(expansion, "expansion")? = c.expansion();
        *out_ptr(cmp, "cmp")? = c.cmp();
        *out_ptr(outputs, "outputs")? = c.outputs();
        Ok(())
    })
}

/// Copies the permutation into `perm[0..expansion]`.
///
/// # Safety
/// `perm` must point to `len` writable `size_t`s.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_perm(
    conn: *const PrcnConnectome,
    perm: *mut usize,
    len: usize,
) -> PrcnStatus {
    guard(|| {
        let c = &handle(conn, "conn")?.conn;
        if len != c.expansion() {
            return Err(invalid(format!("buffer of {len} for a permutation of {}", c.expansion())));
        }
        slice_mut(perm, len, "perm")?.copy_from_slice(c.perm());
        Ok(())
    })
}

/// Stable hash of the applied index map.
///
/// # Safety
/// `conn` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_hash(conn: *const PrcnConnectome, out: *mut u64) -> PrcnStatus {
    guard(|| {
        *out_ptr(out, "out")? = handle(conn, "conn")?.conn.index_hash();
        Ok(())
    })
}

/// Writes the versioned blob. Call with `buf == NULL` to query the size
/// through `written`.
///
/// # Safety
/// `buf` must point to `cap` writable bytes when non-null; `written` valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_serialize(
    conn: *const PrcnConnectome,
    buf: *mut u8,
    cap: usize,
    written: *mut usize,
) -> PrcnStatus {
    guard(|| {
        let blob = handle(conn, "conn")?.conn.serialize();
        *out_ptr(written, "written")? = blob.len();
        if buf.is_null() {
            return Ok(());
        }
        if cap < blob.len() {
            return Err(invalid(format!("buffer of {cap} bytes, blob needs {}", blob.len())));
        }
        slice_mut(buf, blob.len(), "buf")?.copy_from_slice(&blob);
        Ok(())
    })
}

/// # Safety
/// `buf` must point to `len` readable bytes; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_connectome_deserialize(
    buf: *const u8,
    len: usize,
    out: *mut *mut PrcnConnectome,
) -> PrcnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed_connectome(Connectome::deserialize(slice(buf, len, "buf")?)?);
        Ok(())
    })
}

// ---- channel max pool ---------------------------------------------------

/// Channel max pool of `x` laid out `(n, expansion, plane)` into `out`
/// laid out `(n, outputs, plane)`. The argmax record for the backward
/// pass is returned through `argmax` and must be freed by the caller.
///
/// # Safety
/// `x` and `out` must hold `n·expansion·plane` and `n·outputs·plane`
/// doubles; `argmax` must be valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_cmp_forward(
    conn: *const PrcnConnectome,
    x: *const f64,
    n: usize,
    plane: usize,
    out: *mut f64,
    argmax: *mut *mut PrcnArgmax,
) -> PrcnStatus {
    guard(|| {
        let c = handle(conn, "conn")?;
        let argmax = out_ptr(argmax, "argmax")?;
        let x = slice(x, n * c.conn.expansion() * plane, "x")?;
        let (y, map) = indirect_cmp_forward(x, n, plane, &c.plan)?;
        slice_mut(out, y.len(), "out")?.copy_from_slice(&y);
        *argmax = Box::into_raw(Box::new(PrcnArgmax { map }));
        Ok(())
    })
}

/// Routes `grad_out` back to the winning channels; `grad_x` is overwritten.
///
/// # Safety
/// Buffers sized as for [`prcn_cmp_forward`] with the same `n` and `plane`.
#[no_mangle]
pub unsafe extern "C" fn prcn_cmp_backward(
    conn: *const PrcnConnectome,
    argmax: *const PrcnArgmax,
    grad_out: *const f64,
    grad_x: *mut f64,
) -> PrcnStatus {
    guard(|| {
        let c = handle(conn, "conn")?;
        let m = &handle(argmax, "argmax")?.map;
        let g = slice(grad_out, m.n * m.outputs * m.plane, "grad_out")?;
        let gx = indirect_cmp_backward(g, m, &c.plan)?;
        slice_mut(grad_x, gx.len(), "grad_x")?.copy_from_slice(&gx);
        Ok(())
    })
}

/// # Safety
/// `argmax` must come from this library and not be used afterwards. Null
/// is accepted.
#[no_mangle]
pub unsafe extern "C" fn prcn_argmax_free(argmax: *mut PrcnArgmax) {
    if !argmax.is_null() {
        drop(Box::from_raw(argmax));
    }
}

// ---- models -------------------------------------------------------------

/// Compiles a named preset such as `"convnet36"` or `"prcn(12,3)"`.
///
/// # Safety
/// `name` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_model_compile(name: *const c_char, seed: u64, out: *mut *mut PrcnModel) -> PrcnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let spec: ModelSpec = c_str(name, "name")?.parse()?;
        *out = Box::into_raw(Box::new(PrcnModel { model: spec.compile(seed)? }));
        Ok(())
    })
}

/// Loads a checkpoint written by the training tools.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_model_load(path: *const c_char, out: *mut *mut PrcnModel) -> PrcnStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let (model, _) = load_checkpoint(Path::new(c_str(path, "path")?))?;
        *out = Box::into_raw(Box::new(PrcnModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards. Null
/// is accepted.
#[no_mangle]
pub unsafe extern "C" fn prcn_model_free(model: *mut PrcnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Input `(channels, height, width)`, class count and trainable
/// parameter count.
///
/// # Safety
/// `model` must be a live handle and every out pointer valid.
#[no_mangle]
pub unsafe extern "C" fn prcn_model_info(
    model: *const PrcnModel,
    channels: *mut usize,
    height: *mut usize,
    width: *mut usize,
    classes: *mut usize,
    params: *mut usize,
) -> PrcnStatus {
    guard(|| {
        let m = &handle(model, "model")?.model;
        *out_ptr(channels, "channels")? = m.input.0;
        *out_ptr(height, "height")? = m.input.1;
        *out_ptr(width, "width")? = m.input.2;
        *out_ptr(classes, "classes")? = m.classes;
        *out_ptr(params, "params")? = m.param_count();
        Ok(())
    })
}

/// Eval-mode logits for `n` samples; `logits` receives `n·classes` values.
///
/// # Safety
/// `model` must be a live handle not used concurrently; `x` must hold
/// `n·c·h·w` doubles and `logits` `n·classes`.
#[no_mangle]
pub unsafe extern "C" fn prcn_model_predict(
    model: *mut PrcnModel,
    x: *const f64,
    n: usize,
    logits: *mut f64,
) -> PrcnStatus {
    guard(|| {
        let m = &mut model.as_mut().ok_or_else(|| null("model"))?.model;
        if n == 0 {
            return Err(invalid("empty batch"));
        }
        let (c, h, w) = m.input;
        let shape = Shape::new(n, c, h, w);
        let input = Tensor::from_vec(shape, slice(x, shape.len(), "x")?.to_vec())?;
        let y = m.predict(&input)?;
        slice_mut(logits, n * m.classes, "logits")?.copy_from_slice(y.data());
        Ok(())
    })
}
