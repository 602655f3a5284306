//! C ABI for safemerge.
//!
//! Checkpoints cross the boundary as opaque `SmCheckpoint` handles that the
//! caller frees with [`sm_checkpoint_free`]. Every fallible function
//! returns an [`SmStatus`]; on failure, [`sm_last_error`] describes the
//! most recent error on the calling thread. Panics are caught and reported
//! as `SM_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use safemerge::criterion::merge_loss;
use safemerge::data::load_qa_jsonl;
use safemerge::merge::{merge_with_recipe, MergeRecipe};
use safemerge::tensor_store::{load_checkpoint, save_checkpoint, validate_compat, Checkpoint, Tensor};
use safemerge::toy_lm::ToyLmConfig;
use safemerge::Error;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmStatus {
    SmOk = 0,
    SmErrNull = 1,
    SmErrValidation = 2,
    SmErrIo = 3,
    SmErrFormat = 4,
    SmErrIncompatible = 5,
    SmErrPanic = 6,
    SmErrBufferTooSmall = 7,
}

/// Opaque checkpoint handle.
pub struct SmCheckpoint {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

fn status_of(err: &Error) -> SmStatus {
    match err {
        Error::Io { .. } => SmStatus::SmErrIo,
        Error::Format { .. } => SmStatus::SmErrFormat,
        Error::Incompatible(_) => SmStatus::SmErrIncompatible,
        Error::Invalid(_) | Error::Optimizer(_) => SmStatus::SmErrValidation,
    }
}

enum Fail {
    Null(&'static str),
    Lib(Error),
    Status(SmStatus, String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SmStatus::SmOk
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SmStatus::SmErrNull
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Fail::Status(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("panic inside safemerge");
            SmStatus::SmErrPanic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Status(SmStatus::SmErrValidation, format!("{what} is not valid UTF-8")))
}

unsafe fn ckpt_arg<'a>(p: *const SmCheckpoint, what: &'static str) -> Result<&'a Checkpoint, Fail> {
    p.as_ref().map(|c| &c.inner).ok_or(Fail::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or(Fail::Null(what))
}

fn into_handle(c: Checkpoint) -> *mut SmCheckpoint {
    Box::into_raw(Box::new(SmCheckpoint { inner: c }))
}

/// Message for the last failed call on this thread. Empty after a
/// successful call. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn sm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates an empty checkpoint.
///
/// # Safety
/// `out` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_new(out: *mut *mut SmCheckpoint) -> SmStatus {
    guard(|| {
        *out_arg(out, "out")? = into_handle(Checkpoint::new());
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_load(path: *const c_char, out: *mut *mut SmCheckpoint) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let c = load_checkpoint(PathBuf::from(str_arg(path, "path")?))?;
        *out = into_handle(c);
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_save(ckpt: *const SmCheckpoint, path: *const c_char) -> SmStatus {
    guard(|| {
        save_checkpoint(ckpt_arg(ckpt, "ckpt")?, PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `ckpt` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_free(ckpt: *mut SmCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// # Safety
/// `ckpt` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_num_tensors(ckpt: *const SmCheckpoint, out: *mut usize) -> SmStatus {
    guard(|| {
        *out_arg(out, "out")? = ckpt_arg(ckpt, "ckpt")?.len();
        Ok(())
    })
}

/// # Safety
/// `ckpt` must be a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_num_params(ckpt: *const SmCheckpoint, out: *mut usize) -> SmStatus {
    guard(|| {
        *out_arg(out, "out")? = ckpt_arg(ckpt, "ckpt")?.num_params();
        Ok(())
    })
}

/// Copies the name of tensor `index` (sorted order) into `buf` with a NUL
/// terminator. `needed` receives the required size including the NUL;
/// a too-small buffer returns `SM_ERR_BUFFER_TOO_SMALL` with `needed` set.
///
/// # Safety
/// `buf` must hold `buf_len` bytes (may be null when `buf_len` is 0);
/// `needed` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_tensor_name(
    ckpt: *const SmCheckpoint,
    index: usize,
    buf: *mut c_char,
    buf_len: usize,
    needed: *mut usize,
) -> SmStatus {
    guard(|| {
        let c = ckpt_arg(ckpt, "ckpt")?;
        let needed = out_arg(needed, "needed")?;
        let name = c.tensors.keys().nth(index).ok_or_else(|| {
            Fail::Status(
                SmStatus::SmErrValidation,
                format!("tensor index {index} out of range ({} tensors)", c.len()),
            )
        })?;
        *needed = name.len() + 1;
        if buf_len < *needed || buf.is_null() {
            return Err(Fail::Status(
                SmStatus::SmErrBufferTooSmall,
                format!("name needs {} bytes", *needed),
            ));
        }
        ptr::copy_nonoverlapping(name.as_ptr(), buf.cast::<u8>(), name.len());
        *buf.add(name.len()) = 0;
        Ok(())
    })
}

fn find<'a>(c: &'a Checkpoint, name: &str) -> Result<&'a Tensor, Fail> {
    c.get(name)
        .ok_or_else(|| Fail::Status(SmStatus::SmErrValidation, format!("no tensor named {name:?}")))
}

/// Element count and rank of a tensor.
///
/// # Safety
/// `name` NUL-terminated; `len` and `ndim` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_tensor_info(
    ckpt: *const SmCheckpoint,
    name: *const c_char,
    len: *mut usize,
    ndim: *mut usize,
) -> SmStatus {
    guard(|| {
        let t = find(ckpt_arg(ckpt, "ckpt")?, str_arg(name, "name")?)?;
        *out_arg(len, "len")? = t.len();
        *out_arg(ndim, "ndim")? = t.shape().len();
        Ok(())
    })
}

/// Copies a tensor's shape into `shape` (`ndim` entries) and its data into
/// `data` (`len` entries); either output may be null to skip it. The sizes
/// must match [`sm_checkpoint_tensor_info`].
///
/// # Safety
/// Non-null outputs must hold the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_tensor_read(
    ckpt: *const SmCheckpoint,
    name: *const c_char,
    shape: *mut usize,
    ndim: usize,
    data: *mut f32,
    len: usize,
) -> SmStatus {
    guard(|| {
        let t = find(ckpt_arg(ckpt, "ckpt")?, str_arg(name, "name")?)?;
        if !shape.is_null() {
            if ndim != t.shape().len() {
                return Err(Fail::Status(SmStatus::SmErrBufferTooSmall, "shape buffer size mismatch".into()));
            }
            ptr::copy_nonoverlapping(t.shape().as_ptr(), shape, ndim);
        }
        if !data.is_null() {
            if len != t.len() {
                return Err(Fail::Status(SmStatus::SmErrBufferTooSmall, "data buffer size mismatch".into()));
            }
            ptr::copy_nonoverlapping(t.data().as_ptr(), data, len);
        }
        Ok(())
    })
}

/// Inserts or replaces a tensor.
///
/// # Safety
/// `shape` holds `ndim` entries and `data` holds `len` entries; both may be
/// null when their count is 0.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoint_insert(
    ckpt: *mut SmCheckpoint,
    name: *const c_char,
    shape: *const usize,
    ndim: usize,
    data: *const f32,
    len: usize,
) -> SmStatus {
    guard(|| {
        let c = ckpt.as_mut().ok_or(Fail::Null("ckpt"))?;
        let name = str_arg(name, "name")?;
        let slice = |p: *const usize, n: usize| if n == 0 { &[][..] } else { std::slice::from_raw_parts(p, n) };
        if (ndim > 0 && shape.is_null()) || (len > 0 && data.is_null()) {
            return Err(Fail::Null("shape/data"));
        }
        let shape = slice(shape, ndim).to_vec();
        let values = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
        c.inner.insert(name, Tensor::new(shape, values)?);
        Ok(())
    })
}

/// Sets `out` to whether the two checkpoints have identical names and
/// shapes. On a mismatch `sm_last_error` describes it.
///
/// # Safety
/// Both handles live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_checkpoints_compatible(
    a: *const SmCheckpoint,
    b: *const SmCheckpoint,
    out: *mut bool,
) -> SmStatus {
    let mut reason = None;
    let status = guard(|| {
        let report = validate_compat(ckpt_arg(a, "a")?, ckpt_arg(b, "b")?);
        *out_arg(out, "out")? = report.compatible;
        if !report.compatible {
            reason = Some(report.to_string());
        }
        Ok(())
    });
    // a mismatch is not an error, but the reason stays readable
    if let Some(msg) = reason {
        set_error(msg);
    }
    status
}

/// Merges `experts` into `base` following a recipe JSON document and
/// returns a new handle.
///
/// # Safety
/// `experts` points to `n_experts` live handles; `recipe_json`
/// NUL-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sm_merge(
    base: *const SmCheckpoint,
    experts: *const *const SmCheckpoint,
    n_experts: usize,
    recipe_json: *const c_char,
    out: *mut *mut SmCheckpoint,
) -> SmStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let base = ckpt_arg(base, "base")?;
        if n_experts > 0 && experts.is_null() {
            return Err(Fail::Null("experts"));
        }
        let handles = if n_experts == 0 { &[][..] } else { std::slice::from_raw_parts(experts, n_experts) };
        let experts = handles
            .iter()
            .map(|&h| ckpt_arg(h, "expert"))
            .collect::<Result<Vec<_>, _>>()?;
        let recipe = MergeRecipe::from_json(str_arg(recipe_json, "recipe_json")?)?;
        *out = into_handle(merge_with_recipe(base, &experts, &recipe)?);
        Ok(())
    })
}

/// Evaluates `L_safety + alpha * L_expert` of a toy-LM checkpoint on two
/// QA JSONL files. The model configuration is read from the checkpoint
/// metadata. Any of the outputs may be null.
///
/// # Safety
/// Paths NUL-terminated; non-null outputs writable.
#[no_mangle]
pub unsafe extern "C" fn sm_merge_loss(
    ckpt: *const SmCheckpoint,
    safety_jsonl: *const c_char,
    expert_jsonl: *const c_char,
    alpha: f64,
    l_safety: *mut f64,
    l_expert: *mut f64,
    l_merge: *mut f64,
) -> SmStatus {
    guard(|| {
        let c = ckpt_arg(ckpt, "ckpt")?;
        let cfg = ToyLmConfig::from_metadata(&c.metadata)?;
        let ds = load_qa_jsonl(str_arg(safety_jsonl, "safety_jsonl")?, cfg.vocab_size)?;
        let de = load_qa_jsonl(str_arg(expert_jsonl, "expert_jsonl")?, cfg.vocab_size)?;
        let r = merge_loss(c, &cfg, &ds, &de, alpha)?;
        for (p, v) in [(l_safety, r.l_safety), (l_expert, r.l_expert), (l_merge, r.l_merge)] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}
