//! C ABI for the fgnmt translation toolkit.
//!
//! The surface follows the usual opaque-handle pattern: `fgnmt_model_load`
//! returns a handle, every call reports an `FgnmtStatus`, string outputs
//! are heap-allocated C strings released with `fgnmt_string_free`, and the
//! most recent error message is available per thread via
//! `fgnmt_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::PathBuf;
use std::ptr;

use fgnmt::analysis::AlignmentRecord;
use fgnmt::data::{tokenize, unbpe, Vocabulary};
use fgnmt::decoding::{beam_search, default_max_len};
use fgnmt::error::Error;
use fgnmt::evaluation::bleu;
use fgnmt::model::Model;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FgnmtStatus {
    Ok = 0,
    /// A null pointer, bad UTF-8, or an out-of-range argument.
    InvalidArgument = 1,
    /// Corpus or file contents violated a contract.
    DataError = 2,
    /// Non-finite numbers or other numeric breakdown.
    NumericError = 3,
    IoError = 4,
    /// Malformed checkpoint, vocabulary, or alignment file.
    FormatError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_last_error(message: &str) {
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).expect("nul bytes filtered");
    });
}

fn status_of(err: &Error) -> FgnmtStatus {
    match err {
        Error::Numeric(_) => FgnmtStatus::NumericError,
        Error::Io(_) => FgnmtStatus::IoError,
        Error::Format(_) => FgnmtStatus::FormatError,
        Error::Dimension { .. } | Error::Contract(_) | Error::Index(_) => {
            FgnmtStatus::InvalidArgument
        }
        Error::Vocabulary(_) | Error::Data(_) => FgnmtStatus::DataError,
    }
}

fn fail(err: Error) -> FgnmtStatus {
    set_last_error(&err.to_string());
    status_of(&err)
}

fn invalid(message: &str) -> FgnmtStatus {
    set_last_error(message);
    FgnmtStatus::InvalidArgument
}

/// # Safety
/// `ptr` must be null or a valid NUL-terminated string.
unsafe fn utf8_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, FgnmtStatus> {
    if ptr.is_null() {
        return Err(invalid(&format!("{name} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| invalid(&format!("{name} is not valid UTF-8")))
}

fn path_arg(raw: &str) -> PathBuf {
    PathBuf::from(raw)
}

/// A loaded model plus its vocabularies. Opaque to C callers.
pub struct FgnmtModel {
    model: Model,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
}

/// The library version as a static string; never freed.
#[no_mangle]
pub extern "C" fn fgnmt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// The current thread's most recent error message. The pointer stays valid
/// until the next failing call on this thread; never freed by the caller.
#[no_mangle]
pub extern "C" fn fgnmt_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Loads a checkpoint and its vocabularies. Passing null vocabulary paths
/// uses the `<checkpoint>.src.vocab` / `<checkpoint>.tgt.vocab` convention.
/// On success `*out` owns the handle; release it with `fgnmt_model_free`.
///
/// # Safety
/// All pointer arguments must be null or valid NUL-terminated strings, and
/// `out` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_model_load(
    checkpoint: *const c_char,
    src_vocab: *const c_char,
    tgt_vocab: *const c_char,
    out: *mut *mut FgnmtModel,
) -> FgnmtStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    *out = ptr::null_mut();
    let ckpt_path = match utf8_arg(checkpoint, "checkpoint") {
        Ok(s) => path_arg(s),
        Err(status) => return status,
    };
    let side_path = |arg: *const c_char, side: &str| -> Result<PathBuf, FgnmtStatus> {
        if arg.is_null() {
            Ok(PathBuf::from(format!("{}.{side}.vocab", ckpt_path.display())))
        } else {
            utf8_arg(arg, side).map(path_arg)
        }
    };
    let src_path = match side_path(src_vocab, "src") {
        Ok(p) => p,
        Err(status) => return status,
    };
    let tgt_path = match side_path(tgt_vocab, "tgt") {
        Ok(p) => p,
        Err(status) => return status,
    };

    let loaded = (|| -> Result<FgnmtModel, Error> {
        let model = Model::load(&ckpt_path)?;
        let src_vocab = Vocabulary::load(&src_path)?;
        let tgt_vocab = Vocabulary::load(&tgt_path)?;
        if src_vocab.len() != model.config.src_vocab || tgt_vocab.len() != model.config.tgt_vocab
        {
            return Err(Error::Data(format!(
                "vocabulary sizes ({}, {}) do not match the checkpoint config ({}, {})",
                src_vocab.len(),
                tgt_vocab.len(),
                model.config.src_vocab,
                model.config.tgt_vocab
            )));
        }
        Ok(FgnmtModel {
            model,
            src_vocab,
            tgt_vocab,
        })
    })();
    match loaded {
        Ok(handle) => {
            *out = Box::into_raw(Box::new(handle));
            FgnmtStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Releases a handle returned by `fgnmt_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be null or a pointer previously returned by
/// `fgnmt_model_load` that has not been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_model_free(model: *mut FgnmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

fn translate_line(
    handle: &FgnmtModel,
    line: &str,
    beam: usize,
    max_len: usize,
) -> Result<(String, Option<AlignmentRecord>), Error> {
    let src_tokens = tokenize(line);
    if src_tokens.is_empty() {
        return Ok((String::new(), None));
    }
    let src_ids = handle.src_vocab.encode(&src_tokens);
    let bound = if max_len == 0 {
        default_max_len(src_ids.len())
    } else {
        max_len
    };
    let hyp = beam_search(&handle.model, &src_ids, beam.max(1), bound)?;
    let surface = handle.tgt_vocab.decode(hyp.surface_tokens())?;
    let translation = unbpe(&surface).join(" ");
    let emitted = handle.tgt_vocab.decode(&hyp.tokens)?;
    let record = AlignmentRecord::new(
        src_tokens,
        emitted,
        hyp.alignment()?,
        handle.model.fingerprint(),
    )?;
    Ok((translation, Some(record)))
}

/// Translates one whitespace-tokenized line. `max_len` of 0 means the
/// default bound of 3·source length + 10. On success `*out` owns a C
/// string; release it with `fgnmt_string_free`.
///
/// # Safety
/// `model` must be a live handle, `line` a valid NUL-terminated string,
/// and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_translate(
    model: *const FgnmtModel,
    line: *const c_char,
    beam: u32,
    max_len: u32,
    out: *mut *mut c_char,
) -> FgnmtStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    *out = ptr::null_mut();
    let Some(handle) = model.as_ref() else {
        return invalid("model is null");
    };
    let line = match utf8_arg(line, "line") {
        Ok(s) => s,
        Err(status) => return status,
    };
    match translate_line(handle, line, beam as usize, max_len as usize) {
        Ok((translation, _)) => {
            let c = CString::new(translation).expect("translations contain no nul bytes");
            *out = c.into_raw();
            FgnmtStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Like `fgnmt_translate`, and additionally writes the sentence's alignment
/// tensor to `fgat_path` (plus the flat-text token sidecar next to it).
///
/// # Safety
/// As `fgnmt_translate`; `fgat_path` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_translate_with_alignment(
    model: *const FgnmtModel,
    line: *const c_char,
    beam: u32,
    max_len: u32,
    fgat_path: *const c_char,
    out: *mut *mut c_char,
) -> FgnmtStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    *out = ptr::null_mut();
    let Some(handle) = model.as_ref() else {
        return invalid("model is null");
    };
    let line = match utf8_arg(line, "line") {
        Ok(s) => s,
        Err(status) => return status,
    };
    let path = match utf8_arg(fgat_path, "fgat_path") {
        Ok(s) => path_arg(s),
        Err(status) => return status,
    };
    match translate_line(handle, line, beam as usize, max_len as usize) {
        Ok((translation, record)) => {
            let Some(record) = record else {
                return invalid("cannot export an alignment for an empty line");
            };
            if let Err(e) = record.save(&path) {
                return fail(e);
            }
            let c = CString::new(translation).expect("translations contain no nul bytes");
            *out = c.into_raw();
            FgnmtStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Corpus BLEU between two files of equal line counts, already un-BPE'd
/// and tokenized. Writes the score in `[0, 100]` to `*out`.
///
/// # Safety
/// The path arguments must be valid NUL-terminated strings and `out` must
/// point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_bleu(
    hyp_path: *const c_char,
    ref_path: *const c_char,
    smoothing: bool,
    out: *mut f64,
) -> FgnmtStatus {
    if out.is_null() {
        return invalid("out is null");
    }
    let hyp_path = match utf8_arg(hyp_path, "hyp_path") {
        Ok(s) => path_arg(s),
        Err(status) => return status,
    };
    let ref_path = match utf8_arg(ref_path, "ref_path") {
        Ok(s) => path_arg(s),
        Err(status) => return status,
    };
    let scored = (|| -> Result<f64, Error> {
        let hyp_text = std::fs::read_to_string(&hyp_path)?;
        let ref_text = std::fs::read_to_string(&ref_path)?;
        let hyps: Vec<Vec<String>> = hyp_text.lines().map(tokenize).collect();
        let refs: Vec<Vec<String>> = ref_text.lines().map(tokenize).collect();
        Ok(bleu(&hyps, &refs, smoothing)?.bleu)
    })();
    match scored {
        Ok(score) => {
            *out = score;
            FgnmtStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Releases a string returned by the translate calls. Null is a no-op.
///
/// # Safety
/// `s` must be null or a pointer obtained from this library that has not
/// been freed yet.
#[no_mangle]
pub unsafe extern "C" fn fgnmt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
