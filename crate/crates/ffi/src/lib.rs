//! C ABI over the mtlg2p toolkit.
//!
//! Models are opaque handles obtained from [`mtlg2p_model_load`] and released
//! with [`mtlg2p_model_free`]. Fallible functions return an [`Mtlg2pStatus`];
//! on failure a message is kept per thread and can be read with
//! [`mtlg2p_last_error`]. Strings allocated by the library are released with
//! [`mtlg2p_string_free`]. A handle may be shared between threads for
//! concurrent transcription.

use mtlg2p::cli::{load_any, AnyModel};
use mtlg2p::decode::{beam_search, DecodeConfig, Decoded};
use mtlg2p::metrics::{aer, levenshtein};
use mtlg2p::Error;
use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mtlg2pStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Io = 4,
    Checkpoint = 5,
    UnknownGrapheme = 6,
    Internal = 7,
    Panic = 8,
}

/// Opaque model handle.
pub struct Mtlg2pModel {
    inner: AnyModel,
}

/// One decoded word. `phonemes` is a space-separated BAS-SAMPA string owned
/// by the caller; release it with [`mtlg2p_transcription_free`].
#[repr(C)]
pub struct Mtlg2pTranscription {
    pub phonemes: *mut c_char,
    /// Sequence log-probability of the returned hypothesis.
    pub log_prob: f64,
    pub anglicism_probability: f64,
    /// No hypothesis ended within the length cap.
    pub truncated: bool,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Mtlg2pEditOps {
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub distance: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(Mtlg2pStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => Mtlg2pStatus::Io,
            Error::Checkpoint(_) | Error::Json(_) => Mtlg2pStatus::Checkpoint,
            Error::UnknownGrapheme { .. } => Mtlg2pStatus::UnknownGrapheme,
            Error::Contract(_) => Mtlg2pStatus::InvalidArgument,
            _ => Mtlg2pStatus::Internal,
        };
        Failure(status, e.to_string())
    }
}

fn set_error(msg: String) {
    // Interior NULs cannot cross the boundary; drop them.
    let msg = CString::new(msg.replace('\0', "")).expect("NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> Mtlg2pStatus {
    LAST_ERROR.with(|e| e.borrow_mut().take());
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => Mtlg2pStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            Mtlg2pStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(Mtlg2pStatus::NullPointer, format!("{name} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| Failure(Mtlg2pStatus::InvalidUtf8, format!("{name}: {e}")))
}

fn null(name: &str) -> Failure {
    Failure(Mtlg2pStatus::NullPointer, format!("{name} is NULL"))
}

/// Loads a checkpoint of either precision into `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_model_load(path: *const c_char, out: *mut *mut Mtlg2pModel) -> Mtlg2pStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let inner = load_any(Path::new(path))?;
        *out = Box::into_raw(Box::new(Mtlg2pModel { inner }));
        Ok(())
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `model` must come from [`mtlg2p_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_model_free(model: *mut Mtlg2pModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Decodes `word` by beam search. A `beam_width` of 0 selects the default.
///
/// # Safety
/// `model` must be a live handle, `word` a NUL-terminated string and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_transcribe(
    model: *const Mtlg2pModel,
    word: *const c_char,
    beam_width: u32,
    out: *mut Mtlg2pTranscription,
) -> Mtlg2pStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = Mtlg2pTranscription {
            phonemes: ptr::null_mut(),
            log_prob: 0.0,
            anglicism_probability: 0.0,
            truncated: false,
        };
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let word = str_arg(word, "word")?;
        let mut cfg = DecodeConfig::default();
        if beam_width > 0 {
            cfg.beam_width = beam_width as usize;
        }
        let d: Decoded = match &model.inner {
            AnyModel::F32(m) => beam_search(m, word, &cfg)?,
            AnyModel::F64(m) => beam_search(m, word, &cfg)?,
        };
        let phonemes = CString::new(d.phonemes.join(" "))
            .map_err(|e| Failure(Mtlg2pStatus::Internal, e.to_string()))?;
        *out = Mtlg2pTranscription {
            phonemes: phonemes.into_raw(),
            log_prob: d.hypothesis.log_prob,
            anglicism_probability: d.anglicism_probability,
            truncated: d.truncated,
        };
        Ok(())
    })
}

/// Releases the string inside a transcription and nulls it.
///
/// # Safety
/// `t` must be NULL or point to a transcription filled by
/// [`mtlg2p_transcribe`].
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_transcription_free(t: *mut Mtlg2pTranscription) {
    if let Some(t) = t.as_mut() {
        mtlg2p_string_free(t.phonemes);
        t.phonemes = ptr::null_mut();
    }
}

/// # Safety
/// `s` must be NULL or a string allocated by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Edit operations between two whitespace-separated token strings.
///
/// # Safety
/// `reference` and `hypothesis` must be NUL-terminated strings and `out` a
/// valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_levenshtein(
    reference: *const c_char,
    hypothesis: *const c_char,
    out: *mut Mtlg2pEditOps,
) -> Mtlg2pStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let r: Vec<&str> = str_arg(reference, "reference")?.split_whitespace().collect();
        let h: Vec<&str> = str_arg(hypothesis, "hypothesis")?.split_whitespace().collect();
        let ops = levenshtein(&r, &h);
        *out = Mtlg2pEditOps {
            matches: ops.matches,
            substitutions: ops.substitutions,
            deletions: ops.deletions,
            insertions: ops.insertions,
            distance: ops.distance(),
        };
        Ok(())
    })
}

/// Anglicism error rate in percent; `recognized` must not exceed `total`.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mtlg2p_aer(total: usize, recognized: usize, out: *mut f64) -> Mtlg2pStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        if recognized > total {
            return Err(Failure(
                Mtlg2pStatus::InvalidArgument,
                format!("{recognized} recognized of {total} Anglicisms"),
            ));
        }
        *out = aer(total, recognized);
        Ok(())
    })
}

/// Message of the last failed call on this thread, or NULL. The pointer stays
/// valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mtlg2p_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mtlg2p_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn status_values_are_stable() {
        assert_eq!(Mtlg2pStatus::Ok as i32, 0);
        assert_eq!(Mtlg2pStatus::Panic as i32, 8);
    }

    #[test]
    fn panics_become_status() {
        let s = guard(|| panic!("boom"));
        assert_eq!(s, Mtlg2pStatus::Panic);
        assert!(!mtlg2p_last_error().is_null());
        assert_eq!(guard(|| Ok(())), Mtlg2pStatus::Ok);
        assert!(mtlg2p_last_error().is_null());
    }

    #[test]
    fn error_kinds_map_to_codes() {
        let f = Failure::from(Error::UnknownGrapheme {
            word: "x".into(),
            grapheme: 'x',
        });
        assert_eq!(f.0, Mtlg2pStatus::UnknownGrapheme);
        let f = Failure::from(Error::Contract("c".into()));
        assert_eq!(f.0, Mtlg2pStatus::InvalidArgument);
    }
}
