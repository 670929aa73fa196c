//! C ABI over the core lab: checkpoint loading, recognizer and fused
//! two-pass decoding, edit-distance scoring, and corpus generation behind
//! opaque handles with error codes.
//!
//! Conventions: every function returns [`XmStatus`]; failures leave a
//! message retrievable with [`xm_last_error_message`] (thread-local, valid
//! until the next library call on that thread). Pointers must be non-null
//! unless documented otherwise; handles are single-threaded.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use xmodal::decoding::{beam_search, two_pass_decode, FusionConfig, ModelScorer, StepScorer};
use xmodal::error::XmError;
use xmodal::evaluation::cer;
use xmodal::models::{Network, TokenId};
use xmodal::numerics::Tensor;
use xmodal::synthdata::TaskSpec;
use xmodal::training::load_checkpoint;

/// Result code of every C-ABI call.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum XmStatus {
    /// Success.
    Ok = 0,
    /// Invalid configuration or arguments.
    Validation = 1,
    /// Runtime failure (I/O, numerics, corrupt files).
    Runtime = 2,
    /// A required pointer argument was null.
    NullArgument = 3,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 4,
    /// An output buffer was too small; required size is in the out-length.
    BufferTooSmall = 5,
}

/// Edit-distance decomposition against a reference sequence.
#[repr(C)]
#[derive(Clone, Copy, Default)]
pub struct XmEditCounts {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
    pub ref_len: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().map(|c| if c == '\0' { ' ' } else { c }).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &XmError) -> XmStatus {
    if err.is_validation() {
        XmStatus::Validation
    } else {
        XmStatus::Runtime
    }
}

fn guard(f: impl FnOnce() -> XmStatus) -> XmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            XmStatus::Runtime
        }
    }
}

unsafe fn cstr_arg<'a>(ptr: *const c_char) -> Result<&'a str, XmStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(XmStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        XmStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next library call on the same thread.
#[no_mangle]
pub extern "C" fn xm_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn xm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque trained-network handle.
pub struct XmModel {
    net: Network,
}

/// Load a checkpoint file into a model handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn xm_model_load(path: *const c_char, out: *mut *mut XmModel) -> XmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return XmStatus::NullArgument;
        }
        let path = match cstr_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match load_checkpoint(Path::new(path)).and_then(|c| c.build_network()) {
            Ok(net) => {
                *out = Box::into_raw(Box::new(XmModel { net }));
                XmStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must come from [`xm_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn xm_model_free(model: *mut XmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Architecture label of the model: "asr", "cross_modal", or "separate".
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xm_model_arch(model: *const XmModel) -> *const c_char {
    if model.is_null() {
        return c"".as_ptr();
    }
    match (*model).net.config.arch {
        xmodal::models::Architecture::Asr => c"asr".as_ptr(),
        xmodal::models::Architecture::CrossModal => c"cross_modal".as_ptr(),
        xmodal::models::Architecture::Separate => c"separate".as_ptr(),
    }
}

/// Number of scalar parameters.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xm_model_param_count(model: *const XmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).net.param_count()
}

/// Vocabulary size (reserved ids included).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn xm_model_vocab_size(model: *const XmModel) -> usize {
    if model.is_null() {
        return 0;
    }
    (*model).net.vocab_size()
}

unsafe fn frames_tensor(
    frames: *const f64,
    n_frames: usize,
    feature_dim: usize,
) -> Result<Tensor, XmStatus> {
    if frames.is_null() {
        set_error("null frames pointer");
        return Err(XmStatus::NullArgument);
    }
    if feature_dim == 0 || n_frames == 0 {
        set_error("frames must be non-empty");
        return Err(XmStatus::Validation);
    }
    let data = std::slice::from_raw_parts(frames, n_frames * feature_dim).to_vec();
    Ok(Tensor::from_vec(vec![n_frames, feature_dim], data))
}

unsafe fn emit_tokens(
    tokens: &[TokenId],
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
) -> XmStatus {
    if out_len.is_null() {
        set_error("null output-length pointer");
        return XmStatus::NullArgument;
    }
    *out_len = tokens.len();
    if tokens.len() > out_cap {
        set_error("token buffer too small");
        return XmStatus::BufferTooSmall;
    }
    if !tokens.is_empty() {
        if out_tokens.is_null() {
            set_error("null token buffer");
            return XmStatus::NullArgument;
        }
        std::slice::from_raw_parts_mut(out_tokens, tokens.len()).copy_from_slice(tokens);
    }
    XmStatus::Ok
}

/// Beam-decode one utterance with a recognizer model. Writes the 1-best
/// token ids (eos excluded) and the total emitted count; if the buffer is
/// too small, returns BufferTooSmall with the required size in `out_len`.
/// `score` may be null.
///
/// # Safety
/// Pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn xm_decode(
    model: *const XmModel,
    frames: *const f64,
    n_frames: usize,
    feature_dim: usize,
    beam_size: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    score: *mut f64,
) -> XmStatus {
    guard(|| {
        if model.is_null() {
            set_error("null model handle");
            return XmStatus::NullArgument;
        }
        let frames = match frames_tensor(frames, n_frames, feature_dim) {
            Ok(f) => f,
            Err(s) => return s,
        };
        let net = &(*model).net;
        let result = ModelScorer::recognizer(net, &frames).and_then(|scorer| {
            let cfg = FusionConfig { beam_size, ..Default::default() };
            let max_len = cfg.max_len(scorer.source_len());
            beam_search(&scorer, beam_size, max_len)
        });
        match result {
            Ok(mut hyps) => {
                let best = hyps.remove(0);
                if !score.is_null() {
                    *score = best.score;
                }
                emit_tokens(&best.tokens, out_tokens, out_cap, out_len)
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Two-pass decoding: recognizer beam search produces the hypothesis, then
/// the corrector re-decodes fused with the recognizer at weight `alpha`.
/// Writes the final tokens; `score` may be null.
///
/// # Safety
/// Pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn xm_two_pass_decode(
    asr: *const XmModel,
    corrector: *const XmModel,
    frames: *const f64,
    n_frames: usize,
    feature_dim: usize,
    alpha: f64,
    beam_size: usize,
    out_tokens: *mut u32,
    out_cap: usize,
    out_len: *mut usize,
    score: *mut f64,
) -> XmStatus {
    guard(|| {
        if asr.is_null() || corrector.is_null() {
            set_error("null model handle");
            return XmStatus::NullArgument;
        }
        let frames = match frames_tensor(frames, n_frames, feature_dim) {
            Ok(f) => f,
            Err(s) => return s,
        };
        let cfg = FusionConfig { alpha, beam_size, ..Default::default() };
        match two_pass_decode(&(*asr).net, &(*corrector).net, &frames, &cfg) {
            Ok(result) => {
                if !score.is_null() {
                    *score = result.fused.score;
                }
                emit_tokens(&result.fused.tokens, out_tokens, out_cap, out_len)
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Render token ids as UTF-8 text into `buf` (nul-terminated). If the
/// buffer is too small, returns BufferTooSmall with the required size
/// (including the nul) in `out_len`.
///
/// # Safety
/// Pointers must be valid for the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn xm_model_render(
    model: *const XmModel,
    tokens: *const u32,
    n_tokens: usize,
    buf: *mut c_char,
    buf_cap: usize,
    out_len: *mut usize,
) -> XmStatus {
    guard(|| {
        if model.is_null() || out_len.is_null() || (n_tokens > 0 && tokens.is_null()) {
            set_error("null argument");
            return XmStatus::NullArgument;
        }
        let ids = std::slice::from_raw_parts(tokens, n_tokens);
        let text = (*model).net.config.vocab.render(ids);
        let bytes = text.as_bytes();
        *out_len = bytes.len() + 1;
        if bytes.len() + 1 > buf_cap {
            set_error("render buffer too small");
            return XmStatus::BufferTooSmall;
        }
        if buf.is_null() {
            set_error("null render buffer");
            return XmStatus::NullArgument;
        }
        let dst = std::slice::from_raw_parts_mut(buf as *mut u8, bytes.len() + 1);
        dst[..bytes.len()].copy_from_slice(bytes);
        dst[bytes.len()] = 0;
        XmStatus::Ok
    })
}

/// Levenshtein alignment of hypothesis against reference with the library's
/// fixed substitution/insertion/deletion decomposition.
///
/// # Safety
/// Sequences must be valid for their lengths; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xm_edit_counts(
    reference: *const u32,
    ref_len: usize,
    hypothesis: *const u32,
    hyp_len: usize,
    out: *mut XmEditCounts,
) -> XmStatus {
    guard(|| {
        if out.is_null() || (ref_len > 0 && reference.is_null()) || (hyp_len > 0 && hypothesis.is_null())
        {
            set_error("null argument");
            return XmStatus::NullArgument;
        }
        let r = std::slice::from_raw_parts(reference, ref_len);
        let h = std::slice::from_raw_parts(hypothesis, hyp_len);
        let counts = cer(r, h);
        *out = XmEditCounts {
            substitutions: counts.substitutions,
            insertions: counts.insertions,
            deletions: counts.deletions,
            ref_len: counts.ref_len,
        };
        XmStatus::Ok
    })
}

/// Generate the synthetic train/dev/eval corpora under `out_dir`.
/// `spec_json` holds a task-spec JSON document; pass null or "" for the
/// defaults. Files are identical to the CLI's `gen-data` output.
///
/// # Safety
/// Strings must be nul-terminated; `out_dir` must be writable.
#[no_mangle]
pub unsafe extern "C" fn xm_generate_corpus(
    spec_json: *const c_char,
    seed: u64,
    out_dir: *const c_char,
) -> XmStatus {
    guard(|| {
        let spec: TaskSpec = if spec_json.is_null() {
            TaskSpec::default()
        } else {
            let text = match cstr_arg(spec_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            if text.trim().is_empty() {
                TaskSpec::default()
            } else {
                match serde_json::from_str(text) {
                    Ok(spec) => spec,
                    Err(e) => {
                        set_error(&format!("task spec: {e}"));
                        return XmStatus::Validation;
                    }
                }
            }
        };
        let dir = match cstr_arg(out_dir) {
            Ok(d) => d,
            Err(s) => return s,
        };
        let run = || -> Result<(), XmError> {
            spec.validate()?;
            let (train, dev, eval) = xmodal::synthdata::gen_corpus(&spec, seed)?;
            for corpus in [&train, &dev, &eval] {
                xmodal::util::write_jsonl(
                    &Path::new(dir).join(format!("{}.jsonl", corpus.split)),
                    &corpus.utterances,
                )?;
            }
            Ok(())
        };
        match run() {
            Ok(()) => XmStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
