//! C ABI over the unlearning laboratory: opaque handles for checkpoints and
//! corpora, status codes, and a thread-local last-error message.
//!
//! Ownership rules: every `*_load` hands the caller an owned handle that must
//! be released with the matching `*_free`; passing null anywhere is reported
//! as `NullArgument`, never undefined behavior.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use libc::{c_char, c_double, size_t};

use mrplab::evalkit;
use mrplab::nanomodel::{load_checkpoint, HookedModel};
use mrplab::taskgen::{QaExample, Split, TopicCorpus};

/// Status code returned by every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrplabStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    Io = 3,
    InvalidInput = 4,
    Runtime = 5,
}

/// Opaque handle: a loaded model checkpoint (base weights plus projection
/// hooks).
pub struct MrplabModel {
    inner: HookedModel,
}

/// Opaque handle: a loaded topic corpus.
pub struct MrplabCorpus {
    topics: Vec<TopicCorpus>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn classify(err: &mrplab::Error) -> MrplabStatus {
    match err {
        mrplab::Error::Io(_) => MrplabStatus::Io,
        mrplab::Error::Checkpoint(_) | mrplab::Error::Parse { .. } => MrplabStatus::Io,
        mrplab::Error::InvalidInput(_)
        | mrplab::Error::DimensionMismatch { .. }
        | mrplab::Error::Validation(_)
        | mrplab::Error::Config { .. } => MrplabStatus::InvalidInput,
        _ => MrplabStatus::Runtime,
    }
}

/// Copies the most recent error message for this thread into `buf`
/// (NUL-terminated, truncated to `len`). Returns the full message length in
/// bytes, excluding the terminator.
///
/// # Safety
/// `buf` must point to `len` writable bytes, or be null (query mode).
#[no_mangle]
pub unsafe extern "C" fn mrplab_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast(), n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mrplab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, MrplabStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(MrplabStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        MrplabStatus::InvalidUtf8
    })
}

fn guarded<F: FnOnce() -> MrplabStatus>(f: F) -> MrplabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            MrplabStatus::Runtime
        }
    }
}

/// Loads a checkpoint file written by the `mrplab` pipeline.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrplab_model_load(
    path: *const c_char,
    out: *mut *mut MrplabModel,
) -> MrplabStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MrplabStatus::NullArgument;
    }
    let path = match cstr_arg(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| match load_checkpoint(Path::new(path)) {
        Ok((model, _meta)) => {
            *out = Box::into_raw(Box::new(MrplabModel { inner: model }));
            MrplabStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            classify(&e)
        }
    })
}

/// Releases a model handle. Null is ignored.
///
/// # Safety
/// `model` must have come from `mrplab_model_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mrplab_model_free(model: *mut MrplabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Loads a corpus directory written by `mrplab gen`.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mrplab_corpus_load(
    dir: *const c_char,
    out: *mut *mut MrplabCorpus,
) -> MrplabStatus {
    if out.is_null() {
        set_error("null output pointer");
        return MrplabStatus::NullArgument;
    }
    let dir = match cstr_arg(dir) {
        Ok(p) => p,
        Err(s) => return s,
    };
    guarded(|| match mrplab::cli::load_corpus(Path::new(dir)) {
        Ok(topics) => {
            *out = Box::into_raw(Box::new(MrplabCorpus { topics }));
            MrplabStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            classify(&e)
        }
    })
}

/// Releases a corpus handle. Null is ignored.
///
/// # Safety
/// `corpus` must have come from `mrplab_corpus_load` and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn mrplab_corpus_free(corpus: *mut MrplabCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of base-model parameters.
///
/// # Safety
/// `model` must be a live handle from `mrplab_model_load`.
#[no_mangle]
pub unsafe extern "C" fn mrplab_model_base_params(model: *const MrplabModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    (*model).inner.base.param_count() as u64
}

/// Number of projection parameters across hooked layers (Σ rank·d).
///
/// # Safety
/// `model` must be a live handle from `mrplab_model_load`.
#[no_mangle]
pub unsafe extern "C" fn mrplab_model_projection_params(model: *const MrplabModel) -> u64 {
    if model.is_null() {
        return 0;
    }
    evalkit::trainable_param_count(&(*model).inner) as u64
}

fn split_of(name: &str) -> Option<Split> {
    match name {
        "train" => Some(Split::Train),
        "test" => Some(Split::Test),
        "attack" => Some(Split::Attack),
        _ => None,
    }
}

/// Multiple-choice accuracy of `model` on one topic split.
///
/// # Safety
/// All pointers must be valid; strings NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mrplab_qa_accuracy(
    model: *const MrplabModel,
    corpus: *const MrplabCorpus,
    topic: *const c_char,
    split: *const c_char,
    out: *mut c_double,
) -> MrplabStatus {
    if model.is_null() || corpus.is_null() || out.is_null() {
        set_error("null handle or output pointer");
        return MrplabStatus::NullArgument;
    }
    let topic = match cstr_arg(topic) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let split = match cstr_arg(split) {
        Ok(s) => s,
        Err(s) => return s,
    };
    let Some(split) = split_of(split) else {
        set_error("split must be one of train/test/attack");
        return MrplabStatus::InvalidInput;
    };
    let model = &(*model).inner;
    let corpus = &(*corpus).topics;
    guarded(|| {
        let Some(tc) = corpus.iter().find(|c| c.topic == topic) else {
            set_error(&format!("topic {topic:?} not present in corpus"));
            return MrplabStatus::InvalidInput;
        };
        let examples: Vec<QaExample> = tc.examples_in(split).cloned().collect();
        match evalkit::qa_accuracy(model, &examples) {
            Ok(acc) => {
                *out = acc;
                MrplabStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                classify(&e)
            }
        }
    })
}
