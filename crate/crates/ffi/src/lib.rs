//! C ABI over the `musicdiff` core.
//!
//! Every fallible function returns an [`MdStatus`]; on failure the message is
//! kept per thread and read back with [`md_last_error_message`]. Handles are
//! opaque and must be released with their `_free` function. Byte buffers
//! returned by the library are released with [`md_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use musicdiff::diffusion::{generate, Prompt};
use musicdiff::metrics::PieceMetrics;
use musicdiff::midi::{dequantize, parse_midi, quantize, write_midi, QuantizedScore};
use musicdiff::notation::recognize_chords;
use musicdiff::pipeline::Models;
use musicdiff::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    MalformedMidi = 3,
    MissingInput = 4,
    ConfigInvalid = 5,
    ChecksumMismatch = 6,
    InvalidCheckpoint = 7,
    ModelMissing = 8,
    PromptInvalid = 9,
    EmptyScore = 10,
    Panic = 11,
    Other = 12,
}

impl From<&Error> for MdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::MalformedHeader(_) | Error::UnsupportedFormat(_) | Error::MalformedTrack(_) | Error::InvalidScore(_) => {
                MdStatus::MalformedMidi
            }
            Error::MissingInput(_) => MdStatus::MissingInput,
            Error::ConfigInvalid(_) => MdStatus::ConfigInvalid,
            Error::ChecksumMismatch(_) => MdStatus::ChecksumMismatch,
            Error::InvalidCheckpoint(_) => MdStatus::InvalidCheckpoint,
            Error::ModelMissing(_) => MdStatus::ModelMissing,
            Error::PromptLengthMismatch(_) => MdStatus::PromptInvalid,
            Error::EmptyScore => MdStatus::EmptyScore,
            Error::LengthMismatch(_) | Error::ShapeMismatch(_) => MdStatus::InvalidArgument,
            _ => MdStatus::Other,
        }
    }
}

/// A quantized score.
pub struct MdScore {
    score: QuantizedScore,
}

/// Trained models loaded from a checkpoint.
pub struct MdModel {
    models: Models,
}

/// The metric report columns for one piece. `ppl` is NaN when no pitch
/// model was involved.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct MdMetrics {
    pub ppl: f64,
    pub pcu: f64,
    pub tup: f64,
    pub pr: f64,
    pub aps: f64,
    pub isr: f64,
    pub prs: f64,
    pub ioi: f64,
    pub gs: f64,
    pub pch: f64,
    pub cpi: f64,
    pub si: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn fail(status: MdStatus, msg: impl Into<String>) -> MdStatus {
    set_error(msg);
    status
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MdStatus>) -> MdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            MdStatus::Ok
        }
        Ok(Err(s)) => s,
        Err(_) => fail(MdStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: musicdiff::Result<T>) -> Result<T, MdStatus> {
    r.map_err(|e| fail(MdStatus::from(&e), format!("{}: {e}", e.code())))
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MdStatus> {
    if p.is_null() {
        Err(fail(MdStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable bytes.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], MdStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(ptr, what)?;
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `s` must be null or a NUL-terminated string.
unsafe fn string<'a>(s: *const c_char, what: &str) -> Result<&'a str, MdStatus> {
    non_null(s, what)?;
    CStr::from_ptr(s).to_str().map_err(|_| fail(MdStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn md_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn md_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parse a standard MIDI file and quantize it to the semiquaver grid.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn md_score_from_midi(bytes: *const u8, len: usize, out: *mut *mut MdScore) -> MdStatus {
    guard(|| {
        non_null(out, "out")?;
        let data = slice(bytes, len, "bytes")?;
        let score = quantize(&lift(parse_midi(data))?);
        *out = Box::into_raw(Box::new(MdScore { score }));
        Ok(())
    })
}

/// Serialize a score as a standard MIDI file. The buffer is released with
/// [`md_bytes_free`].
///
/// # Safety
/// `score` must be a live handle; `out` and `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn md_score_to_midi(score: *const MdScore, out: *mut *mut u8, out_len: *mut usize) -> MdStatus {
    guard(|| {
        non_null(score, "score")?;
        non_null(out, "out")?;
        non_null(out_len, "out_len")?;
        let bytes = write_midi(&dequantize(&(*score).score)).into_boxed_slice();
        *out_len = bytes.len();
        *out = Box::into_raw(bytes).cast();
        Ok(())
    })
}

/// Number of notes, or 0 for a null handle.
///
/// # Safety
/// `score` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_score_num_notes(score: *const MdScore) -> usize {
    score.as_ref().map_or(0, |s| s.score.notes().len())
}

/// Number of bars, or 0 for a null handle.
///
/// # Safety
/// `score` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn md_score_num_bars(score: *const MdScore) -> usize {
    score.as_ref().map_or(0, |s| s.score.num_bars())
}

/// # Safety
/// `score` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_score_free(score: *mut MdScore) {
    if !score.is_null() {
        drop(Box::from_raw(score));
    }
}

/// # Safety
/// `ptr` and `len` must come from one library call that returned a buffer.
#[no_mangle]
pub unsafe extern "C" fn md_bytes_free(ptr: *mut u8, len: usize) {
    if !ptr.is_null() {
        drop(Box::from_raw(std::ptr::slice_from_raw_parts_mut(ptr, len)));
    }
}

/// All report columns for one score, with chords recognized from its bars.
///
/// # Safety
/// `score` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_score_metrics(score: *const MdScore, out: *mut MdMetrics) -> MdStatus {
    guard(|| {
        non_null(score, "score")?;
        non_null(out, "out")?;
        let q = &(*score).score;
        let m = lift(PieceMetrics::compute(q, &recognize_chords(q), None))?;
        *out = MdMetrics {
            ppl: m.ppl.unwrap_or(f64::NAN),
            pcu: m.pcu,
            tup: m.tup,
            pr: m.pr,
            aps: m.aps,
            isr: m.isr,
            prs: m.prs,
            ioi: m.ioi,
            gs: m.gs,
            pch: m.pch,
            cpi: m.cpi,
            si: m.si,
        };
        Ok(())
    })
}

/// Structural-similarity loss between two equal-length sequences.
///
/// # Safety
/// `a` and `b` must each point to `len` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn md_ssim_loss(a: *const f64, b: *const f64, len: usize, out: *mut f64) -> MdStatus {
    guard(|| {
        non_null(out, "out")?;
        let (a, b) = (slice(a, len, "a")?, slice(b, len, "b")?);
        *out = lift(musicdiff::fragmentation::ssim_loss(a, b))?;
        Ok(())
    })
}

/// Linear-time WKV attention over `len` steps of `channels` channels.
/// `keys`, `values` and `out` are row-major `len × channels`; `decay` holds
/// one (non-positive) log-decay per channel.
///
/// # Safety
/// All pointers must cover the sizes above.
#[no_mangle]
pub unsafe extern "C" fn md_wkv(
    decay: *const f64,
    keys: *const f64,
    values: *const f64,
    len: usize,
    channels: usize,
    out: *mut f64,
) -> MdStatus {
    guard(|| {
        let n = len.checked_mul(channels).ok_or_else(|| fail(MdStatus::InvalidArgument, "size overflow"))?;
        let w = slice(decay, channels, "decay")?;
        let (k, v) = (slice(keys, n, "keys")?, slice(values, n, "values")?);
        if n == 0 {
            return Ok(());
        }
        non_null(out, "out")?;
        let (y, _, _) = musicdiff::autodiff::wkv_forward(w, k, v, len);
        std::slice::from_raw_parts_mut(out, n).copy_from_slice(&y);
        Ok(())
    })
}

/// Load trained models from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_model_load(path: *const c_char, out: *mut *mut MdModel) -> MdStatus {
    guard(|| {
        non_null(out, "out")?;
        let models = lift(Models::load(Path::new(string(path, "path")?)))?;
        *out = Box::into_raw(Box::new(MdModel { models }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn md_model_free(model: *mut MdModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Sample a score for a JSON prompt (`{"chords": [...], "sections": [...]}`).
///
/// # Safety
/// `model` must be a live handle, `prompt_json` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn md_generate(model: *const MdModel, prompt_json: *const c_char, seed: u64, out: *mut *mut MdScore) -> MdStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        let prompt: Prompt =
            serde_json::from_str(string(prompt_json, "prompt_json")?).map_err(|e| fail(MdStatus::PromptInvalid, format!("prompt: {e}")))?;
        let m = &(*model).models;
        let den = lift(m.den())?;
        let frozen = lift(m.jsp())?.frozen();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = lift(generate(&prompt, den, &frozen, m.frag.as_ref(), &m.config.generate_config(), &mut rng))?;
        *out = Box::into_raw(Box::new(MdScore { score: g.score }));
        Ok(())
    })
}
