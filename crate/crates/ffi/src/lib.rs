//! C ABI over `motionkit`.
//!
//! Every fallible entry point returns an [`MkStatus`]; on failure the message
//! is retrievable with [`mk_last_error_message`] on the same thread. Objects
//! cross the boundary as opaque handles released by their `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use motionkit::flow::{coarse_flow, compose_flow, identity_flow, warp_features, FlowField, MotionMask};
use motionkit::geometry::{heatmap_to_affine, tps_fit, Heatmap, KeypointSet, Transform};
use motionkit::pipeline::{params_from_checkpoint, params_to_checkpoint, Model, Params, PipelineConfig};
use motionkit::pnm::{read_pnm, write_pnm};
use motionkit::synthbench::{expression_code, psnr};
use motionkit::tensor::Tensor;
use motionkit::Error;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Numeric = 3,
    Config = 4,
    Parse = 5,
    Io = 6,
    Panic = 7,
    BufferTooSmall = 8,
}

/// Dense float64 tensor, row-major.
pub struct MkTensor(Tensor);

/// Affine or thin-plate-spline transform (driving to source coordinates).
pub struct MkTransform(Transform);

/// Absolute sampling coordinates per output pixel.
pub struct MkFlow(FlowField);

/// Generator model with its parameters.
pub struct MkModel {
    model: Model,
    params: Params,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> MkStatus {
    match e {
        Error::Domain(_) => MkStatus::InvalidArgument,
        Error::Numeric(_) => MkStatus::Numeric,
        Error::Config(_) => MkStatus::Config,
        Error::Parse { .. } | Error::Json(_) => MkStatus::Parse,
        Error::Io(_) => MkStatus::Io,
    }
}

struct Fail(MkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(MkStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MkStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            MkStatus::Panic
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out_ptr<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, Fail> {
    let slot = p.as_mut().ok_or_else(|| null(what))?;
    *slot = ptr::null_mut();
    Ok(slot)
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

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MkStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

// ------------------------------------------------------------------ errors

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn mk_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static, NUL-terminated library version.
#[no_mangle]
pub extern "C" fn mk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ------------------------------------------------------------------ tensors

/// Copies `data` (product of `shape` entries) into a new tensor.
///
/// # Safety
/// `shape` holds `rank` entries, `data` holds their product, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    out: *mut *mut MkTensor,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let shape = slice(shape, rank, "shape")?;
        let n: usize = shape.iter().product();
        let data = slice(data, n, "data")?;
        *out = boxed(MkTensor(Tensor::from_vec(shape, data.to_vec())?));
        Ok(())
    })
}

/// # Safety
/// `t` is null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_free(t: *mut MkTensor) {
    free(t)
}

/// Number of dimensions, 0 for a null handle.
///
/// # Safety
/// `t` is null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_rank(t: *const MkTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rank())
}

/// Number of elements, 0 for a null handle.
///
/// # Safety
/// `t` is null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_len(t: *const MkTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.len())
}

/// Writes the extents into `shape`, which holds `cap` entries.
///
/// # Safety
/// `shape` is writable for `cap` entries.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_shape(t: *const MkTensor, shape: *mut usize, cap: usize) -> MkStatus {
    guard(|| {
        let t = &deref(t, "tensor")?.0;
        copy_out(t.shape(), shape, cap)
    })
}

/// Copies the elements into `data`, which holds `cap` values.
///
/// # Safety
/// `data` is writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn mk_tensor_copy_data(t: *const MkTensor, data: *mut f64, cap: usize) -> MkStatus {
    guard(|| {
        let t = &deref(t, "tensor")?.0;
        copy_out(t.data(), data, cap)
    })
}

unsafe fn copy_out<T: Copy>(src: &[T], dst: *mut T, cap: usize) -> Result<(), Fail> {
    if cap < src.len() {
        return Err(Fail(
            MkStatus::BufferTooSmall,
            format!("buffer holds {cap} entries, need {}", src.len()),
        ));
    }
    if src.is_empty() {
        return Ok(());
    }
    if dst.is_null() {
        return Err(null("buffer"));
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    Ok(())
}

/// Reads a binary PGM (as `[1,H,W]`) or PPM (as `[3,H,W]`) with values in [0,1].
///
/// # Safety
/// `path` is a NUL-terminated string, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_image_read(path: *const c_char, out: *mut *mut MkTensor) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let p = str_arg(path, "path")?;
        *out = boxed(MkTensor(read_pnm(Path::new(p))?));
        Ok(())
    })
}

/// Writes a `[1,H,W]` or `[3,H,W]` tensor as 8-bit PGM/PPM.
///
/// # Safety
/// `path` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mk_image_write(path: *const c_char, image: *const MkTensor) -> MkStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        write_pnm(Path::new(p), &deref(image, "image")?.0)?;
        Ok(())
    })
}

/// Peak signal-to-noise ratio in dB; identical inputs give 99.
///
/// # Safety
/// Handles are live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_psnr(a: *const MkTensor, b: *const MkTensor, peak: f64, out: *mut f64) -> MkStatus {
    guard(|| {
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        *out = psnr(&deref(a, "a")?.0, &deref(b, "b")?.0, peak)?;
        Ok(())
    })
}

// ------------------------------------------------------------------ geometry

/// Parses transform JSON (`"type": "affine"` or `"tps"`).
///
/// # Safety
/// `json` is NUL-terminated, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_transform_from_json(json: *const c_char, out: *mut *mut MkTransform) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(MkTransform(Transform::from_json(str_arg(json, "json")?)?));
        Ok(())
    })
}

/// Serializes a transform; release the result with [`mk_string_free`].
///
/// # Safety
/// `t` is live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_transform_to_json(t: *const MkTransform, out: *mut *mut c_char) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let s = deref(t, "transform")?.0.to_json();
        *out = CString::new(s).expect("JSON has no NUL").into_raw();
        Ok(())
    })
}

/// # Safety
/// `t` is null or a live transform handle.
#[no_mangle]
pub unsafe extern "C" fn mk_transform_free(t: *mut MkTransform) {
    free(t)
}

/// Maps a point given in normalized coordinates.
///
/// # Safety
/// `t` is live, `out_xy` is writable for two values.
#[no_mangle]
pub unsafe extern "C" fn mk_transform_apply(t: *const MkTransform, x: f64, y: f64, out_xy: *mut f64) -> MkStatus {
    guard(|| {
        let t = &deref(t, "transform")?.0;
        if out_xy.is_null() {
            return Err(null("out_xy"));
        }
        let p = t.apply([x, y]);
        *out_xy = p[0];
        *out_xy.add(1) = p[1];
        Ok(())
    })
}

/// Fits the spline with `T(driving_i) = source_i`. Points are `n` interleaved
/// `(x, y)` pairs.
///
/// # Safety
/// Both point arrays hold `2 * n` values, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_tps_fit(
    driving: *const f64,
    source: *const f64,
    n: usize,
    reg: f64,
    out: *mut *mut MkTransform,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let pts = |p, what| -> Result<KeypointSet, Fail> {
            let s = slice(p, 2 * n, what)?;
            Ok(KeypointSet::new(s.chunks_exact(2).map(|c| [c[0], c[1]]).collect())?)
        };
        let t = tps_fit(&pts(driving, "driving")?, &pts(source, "source")?, reg)?;
        *out = boxed(MkTransform(Transform::Tps(t)));
        Ok(())
    })
}

/// Affine frame of a heatmap tensor `[H,W]` of nonnegative weights.
///
/// # Safety
/// `heatmap` is live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_affine_from_heatmap(
    heatmap: *const MkTensor,
    eps_cov: f64,
    out: *mut *mut MkTransform,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let h = Heatmap::from_weights(deref(heatmap, "heatmap")?.0.clone())?;
        *out = boxed(MkTransform(Transform::Affine(heatmap_to_affine(&h, eps_cov)?)));
        Ok(())
    })
}

// ------------------------------------------------------------------ flows

/// Identity flow of the given extent.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_flow_identity(height: usize, width: usize, out: *mut *mut MkFlow) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(MkFlow(identity_flow(height, width)?));
        Ok(())
    })
}

/// Samples a transform on the pixel grid.
///
/// # Safety
/// `t` is live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_flow_from_transform(
    t: *const MkTransform,
    height: usize,
    width: usize,
    out: *mut *mut MkFlow,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(MkFlow(coarse_flow(&deref(t, "transform")?.0, height, width)?));
        Ok(())
    })
}

/// `(1 - M) * base + M * motion` with `mask` an `[H,W]` tensor in [0,1].
///
/// # Safety
/// Handles are live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_flow_compose(
    mask: *const MkTensor,
    base: *const MkFlow,
    motion: *const MkFlow,
    out: *mut *mut MkFlow,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = MotionMask::new(deref(mask, "mask")?.0.clone())?;
        *out = boxed(MkFlow(compose_flow(&m, &deref(base, "base")?.0, &deref(motion, "motion")?.0)?));
        Ok(())
    })
}

/// Backward-warps a `[C,H,W]` tensor.
///
/// # Safety
/// Handles are live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_warp(input: *const MkTensor, flow: *const MkFlow, out: *mut *mut MkTensor) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        *out = boxed(MkTensor(warp_features(&deref(input, "input")?.0, &deref(flow, "flow")?.0)?));
        Ok(())
    })
}

/// # Safety
/// `f` is null or a live flow handle.
#[no_mangle]
pub unsafe extern "C" fn mk_flow_free(f: *mut MkFlow) {
    free(f)
}

// ------------------------------------------------------------------ model

/// Builds a model from config JSON (null for defaults) with freshly
/// initialized parameters.
///
/// # Safety
/// `config_json` is null or NUL-terminated, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_model_new(config_json: *const c_char, seed: u64, out: *mut *mut MkModel) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let cfg = if config_json.is_null() {
            PipelineConfig::default()
        } else {
            PipelineConfig::from_json(str_arg(config_json, "config_json")?)?
        };
        let model = Model::new(cfg)?;
        let params = model.init_params(seed);
        *out = boxed(MkModel { model, params });
        Ok(())
    })
}

/// Replaces the parameters with a checkpoint's contents.
///
/// # Safety
/// `bytes` holds `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn mk_model_load_checkpoint(m: *mut MkModel, bytes: *const u8, len: usize) -> MkStatus {
    guard(|| {
        let m = m.as_mut().ok_or_else(|| null("model"))?;
        m.params = params_from_checkpoint(&m.model, slice(bytes, len, "bytes")?)?;
        Ok(())
    })
}

/// Serialized parameters. Pass a null buffer to query the size in `len`.
///
/// # Safety
/// `buf` is null or writable for `*len` bytes; `len` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_model_save_checkpoint(m: *const MkModel, buf: *mut u8, len: *mut usize) -> MkStatus {
    guard(|| {
        let m = deref(m, "model")?;
        let len = len.as_mut().ok_or_else(|| null("len"))?;
        let bytes = params_to_checkpoint(&m.params)?;
        let cap = *len;
        *len = bytes.len();
        if buf.is_null() {
            return Ok(());
        }
        copy_out(&bytes, buf, cap)
    })
}

/// Generates the driving-pose image for a `[3,H,W]` source.
///
/// # Safety
/// Handles are live, `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mk_model_generate(
    m: *const MkModel,
    source: *const MkTensor,
    transform: *const MkTransform,
    openness: f64,
    out: *mut *mut MkTensor,
) -> MkStatus {
    guard(|| {
        let out = out_ptr(out, "out")?;
        let m = deref(m, "model")?;
        if !(0.0..=1.0).contains(&openness) {
            return Err(Fail(MkStatus::InvalidArgument, format!("openness must lie in [0, 1], got {openness}")));
        }
        let img = m.model.generate(
            &m.params,
            &deref(source, "source")?.0,
            &deref(transform, "transform")?.0,
            &expression_code(openness),
        )?;
        *out = boxed(MkTensor(img));
        Ok(())
    })
}

/// # Safety
/// `m` is null or a live model handle.
#[no_mangle]
pub unsafe extern "C" fn mk_model_free(m: *mut MkModel) {
    free(m)
}
