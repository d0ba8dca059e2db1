//! C ABI over the `avssl` corpus, scoring and decoding routines.
//!
//! Every fallible function returns an [`AvsslStatus`]; on failure the message
//! is kept per thread and can be copied out with
//! [`avssl_last_error_message`]. Handles are opaque and must be released with
//! their `_free` function. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use avssl::corpus::{self, CorpusManifest};
use avssl::datapipe::{self, PreprocessStats};
use avssl::decode::{self, BeamConfig};
use avssl::finetune::{self, Tokenizer};
use avssl::model::{ModelWeights, VsrModel};
use avssl::pretrain::{self, LrSchedule};
use avssl::{seed, Error};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AvsslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    /// Bad configuration, manifest or hour budget.
    UserError = 3,
    Io = 4,
    Runtime = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).unwrap_or_default());
}

fn status_of(e: &Error) -> AvsslStatus {
    match e {
        Error::Io { .. } => AvsslStatus::Io,
        _ if e.is_user_error() => AvsslStatus::UserError,
        _ => AvsslStatus::Runtime,
    }
}

fn fail(status: AvsslStatus, msg: impl Into<String>) -> AvsslStatus {
    set_error(msg);
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), AvsslStatus>) -> AvsslStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AvsslStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(AvsslStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: avssl::Result<T>) -> Result<T, AvsslStatus> {
    r.map_err(|e| fail(status_of(&e), e.to_string()))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, AvsslStatus> {
    if p.is_null() {
        return Err(fail(AvsslStatus::NullPointer, format!("`{what}` is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(AvsslStatus::InvalidArgument, format!("`{what}` is not UTF-8")))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), AvsslStatus> {
    if p.is_null() {
        Err(fail(AvsslStatus::NullPointer, format!("`{what}` is null")))
    } else {
        Ok(())
    }
}

/// Copies `text` plus a terminating NUL into `buf`. `required` (optional)
/// receives the needed size in bytes.
unsafe fn copy_out(text: &str, buf: *mut c_char, len: usize, required: *mut usize) -> Result<(), AvsslStatus> {
    let bytes = text.as_bytes();
    if !required.is_null() {
        *required = bytes.len() + 1;
    }
    if buf.is_null() || len < bytes.len() + 1 {
        return Err(fail(AvsslStatus::BufferTooSmall, format!("need {} bytes", bytes.len() + 1)));
    }
    ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, bytes.len());
    *buf.add(bytes.len()) = 0;
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to fit). Returns the full message length without
/// the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avssl_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Static NUL-terminated version string.
#[no_mangle]
pub extern "C" fn avssl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque corpus manifest.
pub struct AvsslManifest {
    inner: CorpusManifest,
}

/// Loads a line-delimited manifest.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avssl_manifest_load(path: *const c_char, out: *mut *mut AvsslManifest) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let p = c_str(path, "path")?;
        let inner = lift(corpus::load_manifest(&PathBuf::from(p)))?;
        *out = Box::into_raw(Box::new(AvsslManifest { inner }));
        Ok(())
    })
}

/// # Safety
/// `m` must be null or come from [`avssl_manifest_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn avssl_manifest_free(m: *mut AvsslManifest) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// # Safety
/// `m` must be a live manifest handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avssl_manifest_len(m: *const AvsslManifest, out: *mut usize) -> AvsslStatus {
    guard(|| {
        non_null(m, "manifest")?;
        non_null(out, "out")?;
        *out = (*m).inner.len();
        Ok(())
    })
}

/// Hours of one language, or of the whole manifest when `language` is null.
///
/// # Safety
/// `m` must be a live manifest handle, `language` null or NUL-terminated and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avssl_manifest_hours(
    m: *const AvsslManifest,
    language: *const c_char,
    out: *mut f64,
) -> AvsslStatus {
    guard(|| {
        non_null(m, "manifest")?;
        non_null(out, "out")?;
        let inner = &(*m).inner;
        *out = if language.is_null() {
            inner.total_hours()
        } else {
            let l = c_str(language, "language")?;
            corpus::hours_by_language(inner).get(l).copied().unwrap_or(0.0)
        };
        Ok(())
    })
}

/// Applies a Multilingual RE plan (`total_hours`) and writes the sampled
/// manifest to `out_path`.
///
/// # Safety
/// `m` must be a live manifest handle and `out_path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn avssl_manifest_sample_re(
    m: *const AvsslManifest,
    total_hours: f64,
    seed_value: u64,
    out_path: *const c_char,
) -> AvsslStatus {
    guard(|| {
        non_null(m, "manifest")?;
        let p = c_str(out_path, "out_path")?;
        let inner = &(*m).inner;
        let plan = lift(corpus::plan_multilingual_re(inner, total_hours, seed_value))?;
        let sampled = lift(corpus::materialize(&plan, inner))?;
        lift(sampled.save(&PathBuf::from(p)))
    })
}

/// Character error rate with trim-only normalization.
///
/// # Safety
/// Both strings must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_cer(reference: *const c_char, hypothesis: *const c_char, out: *mut f64) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let r = c_str(reference, "reference")?;
        let h = c_str(hypothesis, "hypothesis")?;
        *out = lift(decode::cer(r, h))?;
        Ok(())
    })
}

unsafe fn rows(lp: *const f64, frames: usize, width: usize) -> Result<Vec<Vec<f64>>, AvsslStatus> {
    non_null(lp, "log_probs")?;
    if frames == 0 || width == 0 {
        return Err(fail(AvsslStatus::InvalidArgument, "empty log-probability matrix"));
    }
    let flat = std::slice::from_raw_parts(lp, frames * width);
    Ok(flat.chunks(width).map(<[f64]>::to_vec).collect())
}

unsafe fn labels(target: *const u32, len: usize) -> Result<Vec<usize>, AvsslStatus> {
    if len == 0 {
        return Ok(Vec::new());
    }
    non_null(target, "target")?;
    Ok(std::slice::from_raw_parts(target, len).iter().map(|&c| c as usize).collect())
}

/// CTC negative log-likelihood of `target` under row-major `frames x width`
/// log-probabilities. Infeasible targets give `+inf`.
///
/// # Safety
/// `log_probs` must hold `frames * width` values, `target` `target_len`
/// values, and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_ctc_loss(
    log_probs: *const f64,
    frames: usize,
    width: usize,
    target: *const u32,
    target_len: usize,
    blank: u32,
    out: *mut f64,
) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let lp = rows(log_probs, frames, width)?;
        let t = labels(target, target_len)?;
        *out = lift(finetune::ctc_loss(&lp, &t, blank as usize))?;
        Ok(())
    })
}

/// Log probability that the CTC output starts with `prefix`.
///
/// # Safety
/// As for [`avssl_ctc_loss`].
#[no_mangle]
pub unsafe extern "C" fn avssl_ctc_prefix_logp(
    log_probs: *const f64,
    frames: usize,
    width: usize,
    prefix: *const u32,
    prefix_len: usize,
    blank: u32,
    out: *mut f64,
) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let lp = rows(log_probs, frames, width)?;
        let p = labels(prefix, prefix_len)?;
        if (blank as usize) >= width || p.iter().any(|&c| c >= width || c == blank as usize) {
            return Err(fail(AvsslStatus::InvalidArgument, "label out of range or blank"));
        }
        *out = decode::ctc_prefix_logp(&lp, &p, blank as usize);
        Ok(())
    })
}

/// Teacher momentum at `step` of `total`.
#[no_mangle]
pub extern "C" fn avssl_tau_schedule(step: u64, total: u64, tau0: f64) -> f64 {
    pretrain::tau_schedule(step as usize, total as usize, tau0)
}

/// Learning rate at fractional `epoch` of a warm-up/cosine schedule.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_lr_at(peak: f64, warmup_epochs: f64, total_epochs: f64, epoch: f64, out: *mut f64) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let s = LrSchedule { peak, warmup_epochs, total_epochs };
        lift(s.validate())?;
        *out = s.lr_at(epoch);
        Ok(())
    })
}

/// Span mask over `len` frames: each frame starts a span of `span` frames
/// with probability `start_prob`. Writes 0/1 flags into `flags`.
///
/// # Safety
/// `flags` must point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn avssl_sample_frame_mask(
    len: usize,
    start_prob: f64,
    span: usize,
    seed_value: u64,
    flags: *mut u8,
) -> AvsslStatus {
    guard(|| {
        if len > 0 {
            non_null(flags, "flags")?;
        }
        if !(0.0..=1.0).contains(&start_prob) {
            return Err(fail(AvsslStatus::InvalidArgument, "start_prob must lie in [0, 1]"));
        }
        let mut rng = seed::rng(seed_value, "ffi_mask", &[]);
        let mask = datapipe::sample_frame_mask(len, start_prob, span, &mut rng);
        for (i, f) in mask.flags().into_iter().enumerate() {
            *flags.add(i) = u8::from(f);
        }
        Ok(())
    })
}

/// Opaque fine-tuned recognizer: model, tokenizer and preprocessing stats.
pub struct AvsslRecognizer {
    model: VsrModel,
    weights: ModelWeights,
    stats: PreprocessStats,
    tok: Tokenizer,
    beam: BeamConfig,
}

/// Loads a fine-tuned checkpoint. `tokenizer` may be null, in which case
/// `tokenizer.txt` next to the checkpoint is used.
///
/// # Safety
/// Strings must be NUL-terminated (or null where allowed) and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_recognizer_load(
    checkpoint: *const c_char,
    tokenizer: *const c_char,
    out: *mut *mut AvsslRecognizer,
) -> AvsslStatus {
    guard(|| {
        non_null(out, "out")?;
        let ck = PathBuf::from(c_str(checkpoint, "checkpoint")?);
        let tok_path = if tokenizer.is_null() {
            ck.with_file_name("tokenizer.txt")
        } else {
            PathBuf::from(c_str(tokenizer, "tokenizer")?)
        };
        let (model, weights, info) = lift(finetune::load_vsr(&ck))?;
        let tok = lift(Tokenizer::load(&tok_path))?;
        let r = AvsslRecognizer { model, weights, stats: info.stats, tok, beam: info.finetune.beam };
        *out = Box::into_raw(Box::new(r));
        Ok(())
    })
}

/// # Safety
/// `r` must be null or come from [`avssl_recognizer_load`] and not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn avssl_recognizer_free(r: *mut AvsslRecognizer) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Overrides the beam width and CTC weight used for decoding.
///
/// # Safety
/// `r` must be a live recognizer handle.
#[no_mangle]
pub unsafe extern "C" fn avssl_recognizer_set_beam(r: *mut AvsslRecognizer, beam_size: usize, ctc_weight: f64) -> AvsslStatus {
    guard(|| {
        non_null(r, "recognizer")?;
        let beam = BeamConfig { beam_size, ctc_weight, ..(*r).beam };
        lift(beam.validate())?;
        (*r).beam = beam;
        Ok(())
    })
}

/// Transcribes record `index` of `m` into `buf`.
///
/// # Safety
/// Handles must be live; `buf` null or `len` writable bytes; `required`
/// null or valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_recognizer_decode(
    r: *const AvsslRecognizer,
    m: *const AvsslManifest,
    index: usize,
    buf: *mut c_char,
    len: usize,
    required: *mut usize,
) -> AvsslStatus {
    guard(|| {
        non_null(r, "recognizer")?;
        non_null(m, "manifest")?;
        let (r, m) = (&*r, &(*m).inner);
        let record = m
            .records
            .get(index)
            .ok_or_else(|| fail(AvsslStatus::InvalidArgument, format!("index {index} out of range")))?;
        let (video, _) = lift(datapipe::load_record(m, record, &r.stats))?;
        let text = lift(decode::decode_clip(&r.model, &r.weights, &video, &r.beam, &r.tok))?;
        copy_out(&text, buf, len, required)
    })
}

/// Corpus CER of the recognizer over a transcribed manifest.
///
/// # Safety
/// Handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn avssl_recognizer_evaluate(
    r: *const AvsslRecognizer,
    m: *const AvsslManifest,
    out: *mut f64,
) -> AvsslStatus {
    guard(|| {
        non_null(r, "recognizer")?;
        non_null(m, "manifest")?;
        non_null(out, "out")?;
        let r = &*r;
        let report = lift(decode::evaluate(&r.model, &r.weights, &(*m).inner, &r.stats, &r.beam, &r.tok, ""))?;
        *out = report.corpus_cer;
        Ok(())
    })
}
