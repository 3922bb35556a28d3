//! C ABI over `wfe-core`: load a checkpoint, decode token ids, read the
//! frequency estimate, and score ROUGE.
//!
//! Every function returns a [`WfeStatus`]. On failure a message is kept per
//! thread and can be read with [`wfe_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use wfe_core::beam::{decode, DecodeMode, DecodeOptions};
use wfe_core::checkpoint::Checkpoint;
use wfe_core::metrics::{rouge_pair, Basis, RougeVariant};
use wfe_core::model::Seq2Seq;
use wfe_core::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WfeStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    State = 6,
    BufferTooSmall = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WfeDecodeMode {
    Baseline = 0,
    Wfe = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WfeRougeVariant {
    One = 0,
    Two = 1,
    L = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WfeBasis {
    Recall = 0,
    F1 = 1,
}

/// Opaque model handle.
pub struct WfeModel {
    inner: Seq2Seq,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> WfeStatus {
    match e {
        Error::Io { .. } => WfeStatus::Io,
        Error::Format { .. } => WfeStatus::Format,
        Error::Shape { .. } => WfeStatus::Shape,
        Error::State(_) => WfeStatus::State,
        _ => WfeStatus::InvalidArgument,
    }
}

struct Fail(WfeStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(WfeStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> WfeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            WfeStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            WfeStatus::Panic
        }
    }
}

unsafe fn ids(ptr: *const u32, len: usize) -> Result<Vec<usize>, Fail> {
    if len == 0 {
        return Ok(Vec::new());
    }
    if ptr.is_null() {
        return Err(null("source ids"));
    }
    Ok(slice::from_raw_parts(ptr, len).iter().map(|&t| t as usize).collect())
}

unsafe fn text<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| Fail(WfeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn wfe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn wfe_model_load(path: *const c_char, out: *mut *mut WfeModel) -> WfeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = text(path, "path")?;
        let (inner, _) = Checkpoint::load(Path::new(path))?.into_model()?;
        *out = Box::into_raw(Box::new(WfeModel { inner }));
        Ok(())
    })
}

/// Releases a handle; null is ignored.
///
/// # Safety
/// `model` must come from [`wfe_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn wfe_model_free(model: *mut WfeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Target vocabulary size and whether the estimation head is present.
///
/// # Safety
/// Pointers must be valid; `has_wfe` may be null.
#[no_mangle]
pub unsafe extern "C" fn wfe_model_info(
    model: *const WfeModel,
    vocab_size: *mut usize,
    has_wfe: *mut bool,
) -> WfeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if vocab_size.is_null() {
            return Err(null("vocab_size"));
        }
        *vocab_size = m.inner.config().tgt_vocab_size;
        if !has_wfe.is_null() {
            *has_wfe = m.inner.has_wfe();
        }
        Ok(())
    })
}

/// Beam-decodes `src` and writes the best output (without BOS/EOS) to `out`.
/// `max_len` 0 selects the default. When `out_cap` is too small, `*out_len`
/// holds the needed length and the status is `BufferTooSmall`.
///
/// # Safety
/// `src` must hold `src_len` ids, `out` room for `out_cap` ids; `score` may be null.
#[no_mangle]
pub unsafe extern "C" fn wfe_model_decode(
    model: *const WfeModel,
    src: *const u32,
    src_len: usize,
    beam: usize,
    mode: WfeDecodeMode,
    max_len: usize,
    out: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    score: *mut f64,
) -> WfeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        let src = ids(src, src_len)?;
        let opts = DecodeOptions {
            beam,
            mode: match mode {
                WfeDecodeMode::Baseline => DecodeMode::Baseline,
                WfeDecodeMode::Wfe => DecodeMode::Wfe,
            },
            max_len: (max_len > 0).then_some(max_len),
            ..Default::default()
        };
        let result = decode(&m.inner, &src, &opts, None)?;
        let best = result.best();
        let tokens = best.output();
        *out_len = tokens.len();
        if !score.is_null() {
            *score = best.score;
        }
        if tokens.len() > out_cap {
            return Err(Fail(
                WfeStatus::BufferTooSmall,
                format!("output needs {} ids, buffer holds {out_cap}", tokens.len()),
            ));
        }
        if !tokens.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            let dst = slice::from_raw_parts_mut(out, tokens.len());
            for (d, &t) in dst.iter_mut().zip(tokens) {
                *d = t as u32;
            }
        }
        Ok(())
    })
}

/// Frequency estimate for `src`: any of `r_hat`, `g_hat`, `a_hat` may be
/// null, the others must hold `len` = target vocabulary size values.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn wfe_model_estimate(
    model: *const WfeModel,
    src: *const u32,
    src_len: usize,
    r_hat: *mut f64,
    g_hat: *mut f64,
    a_hat: *mut f64,
    len: usize,
) -> WfeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let src = ids(src, src_len)?;
        let est = m.inner.wfe_estimate(&m.inner.encode(&src)?)?;
        if len < est.len() {
            return Err(Fail(
                WfeStatus::BufferTooSmall,
                format!("estimate needs {} values, buffer holds {len}", est.len()),
            ));
        }
        for (dst, values) in [(r_hat, &est.r_hat), (g_hat, &est.g_hat), (a_hat, &est.a_hat)] {
            if !dst.is_null() {
                slice::from_raw_parts_mut(dst, values.len()).copy_from_slice(values);
            }
        }
        Ok(())
    })
}

/// ROUGE of one whitespace-tokenized candidate against one reference.
///
/// # Safety
/// Strings must be NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn wfe_rouge(
    candidate: *const c_char,
    reference: *const c_char,
    variant: WfeRougeVariant,
    basis: WfeBasis,
    out: *mut f64,
) -> WfeStatus {
    guard(|| {
        let c = text(candidate, "candidate")?;
        let r = text(reference, "reference")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let v = match variant {
            WfeRougeVariant::One => RougeVariant::One,
            WfeRougeVariant::Two => RougeVariant::Two,
            WfeRougeVariant::L => RougeVariant::L,
        };
        let b = match basis {
            WfeBasis::Recall => Basis::Recall,
            WfeBasis::F1 => Basis::F1,
        };
        *out = rouge_pair(c, r, v).get(b);
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_mapping() {
        assert_eq!(status_of(&Error::State("x".into())), WfeStatus::State);
        assert_eq!(
            status_of(&Error::Format { offset: 3, msg: "m".into() }),
            WfeStatus::Format
        );
        assert_eq!(status_of(&Error::Config("c".into())), WfeStatus::InvalidArgument);
    }

    #[test]
    fn last_error_cleared_on_success() {
        let mut v = 0.0;
        let s = unsafe { wfe_rouge(ptr::null(), c"a".as_ptr(), WfeRougeVariant::One, WfeBasis::F1, &mut v) };
        assert_eq!(s, WfeStatus::NullPointer);
        assert!(!wfe_last_error().is_null());
        let s = unsafe { wfe_rouge(c"a".as_ptr(), c"a".as_ptr(), WfeRougeVariant::One, WfeBasis::F1, &mut v) };
        assert_eq!(s, WfeStatus::Ok);
        assert!(wfe_last_error().is_null());
    }
}
