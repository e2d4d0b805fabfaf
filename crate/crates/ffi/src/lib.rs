//! C ABI over trained character-model checkpoints.
//!
//! Every fallible function returns an [`MzuStatus`]; on failure the message
//! is available from [`mzu_last_error`] on the same thread until the next
//! call. Handles are opaque and must be released with their `_free`
//! function. Null handles and null output pointers are rejected with
//! `MZU_STATUS_INVALID_ARGUMENT`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use mzu::analysis::{relevance_map, RelevanceMap};
use mzu::cli::{load_run, Task, Vocabulary};
use mzu::model::CharLm;
use mzu::numerics::{ParamStore, Tensor};
use mzu::training::evaluate_bpc;
use mzu::zones::zone_disagreement_value;
use mzu::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MzuStatus {
    Ok = 0,
    /// Null pointer, non-UTF-8 path or a zero-sized request.
    InvalidArgument = 1,
    /// Invalid settings, or a checkpoint of the wrong task.
    Config = 2,
    /// Unusable input text or data.
    Data = 3,
    /// Malformed checkpoint.
    Format = 4,
    Io = 5,
    /// Shape mismatch or non-finite values.
    Numeric = 6,
    /// Output buffer smaller than required.
    BufferTooSmall = 7,
    /// A panic was caught at the boundary.
    Internal = 8,
}

/// A loaded language model.
pub struct MzuModel {
    model: CharLm,
    store: ParamStore<f32>,
    vocab: Vocabulary,
    chunk: usize,
}

/// A relevance map: `rows` query positions by `cols` context positions.
pub struct MzuRelevance {
    map: RelevanceMap,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MzuStatus {
    match e {
        Error::Config { .. } => MzuStatus::Config,
        Error::Data(_) | Error::Parse { .. } => MzuStatus::Data,
        Error::Format(_) => MzuStatus::Format,
        Error::Io { .. } => MzuStatus::Io,
        Error::Shape { .. } | Error::Domain { .. } | Error::NonFinite(_) => MzuStatus::Numeric,
    }
}

struct Fail(MzuStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(MzuStatus::InvalidArgument, msg.to_owned())
}

/// Runs `body`, records any failure and maps it to a status.
fn guard(body: impl FnOnce() -> Result<(), Fail>) -> MzuStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => MzuStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            MzuStatus::Internal
        }
    }
}

unsafe fn model_ref<'a>(model: *const MzuModel) -> Result<&'a MzuModel, Fail> {
    model.as_ref().ok_or_else(|| invalid("model handle is null"))
}

unsafe fn bytes<'a>(data: *const u8, len: usize) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if data.is_null() {
        return Err(invalid("text pointer is null"));
    }
    Ok(std::slice::from_raw_parts(data, len))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    out.write(value);
    Ok(())
}

/// Message of the last failure on this thread; empty after a success. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn mzu_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a language-model checkpoint written by `mzu train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mzu_model_load(path: *const c_char, out: *mut *mut MzuModel) -> MzuStatus {
    guard(|| {
        if path.is_null() {
            return Err(invalid("path is null"));
        }
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let run = load_run(Path::new(path))?;
        if run.config.task != Task::Lm {
            return Err(Error::Config {
                field: "task".into(),
                reason: "only language-model checkpoints can be loaded".into(),
            }
            .into());
        }
        run.config.validate()?;
        let model = CharLm::new(run.config.cell(), run.vocab.len())?;
        model.check_store(&run.checkpoint.params)?;
        let handle = Box::new(MzuModel {
            model,
            store: run.checkpoint.params,
            vocab: run.vocab,
            chunk: run.config.tbptt,
        });
        out.write(Box::into_raw(handle));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`mzu_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mzu_model_free(model: *mut MzuModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mzu_model_param_count(model: *const MzuModel, out: *mut usize) -> MzuStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, m.model.param_count())
    })
}

/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mzu_model_vocab_size(model: *const MzuModel, out: *mut usize) -> MzuStatus {
    guard(|| {
        let m = model_ref(model)?;
        write_out(out, m.model.vocab())
    })
}

/// Bits per character of `text` (one stream, state carried throughout).
///
/// # Safety
/// `text` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mzu_evaluate_bpc(model: *const MzuModel, text: *const u8, len: usize, out: *mut f64) -> MzuStatus {
    guard(|| {
        let m = model_ref(model)?;
        let ids = m.vocab.encode_chars(bytes(text, len)?)?;
        let report = evaluate_bpc(&m.model, &m.store, &ids, 1, m.chunk)?;
        write_out(out, report.bpc)
    })
}

/// Relevance of the last `last_q` positions of `text` against every
/// earlier hidden state.
///
/// # Safety
/// `text` must point to `len` readable bytes and `out` be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mzu_relevance_map(
    model: *const MzuModel,
    text: *const u8,
    len: usize,
    last_q: usize,
    out: *mut *mut MzuRelevance,
) -> MzuStatus {
    guard(|| {
        let m = model_ref(model)?;
        if out.is_null() {
            return Err(invalid("output pointer is null"));
        }
        let ids = m.vocab.encode_chars(bytes(text, len)?)?;
        let map = relevance_map(&m.model, &m.store, &ids, last_q)?;
        out.write(Box::into_raw(Box::new(MzuRelevance { map })));
        Ok(())
    })
}

/// # Safety
/// `map` must be a live handle; `rows` and `cols` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mzu_relevance_dims(map: *const MzuRelevance, rows: *mut usize, cols: *mut usize) -> MzuStatus {
    guard(|| {
        let r = map.as_ref().ok_or_else(|| invalid("map handle is null"))?;
        if rows.is_null() || cols.is_null() {
            return Err(invalid("output pointer is null"));
        }
        rows.write(r.map.rows.len());
        cols.write(r.map.context_len());
        Ok(())
    })
}

/// Copies the map row-major into `buf` (`rows · cols` values). Cells at or
/// after a row's query position are NaN.
///
/// # Safety
/// `buf` must point to `buf_len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn mzu_relevance_copy(map: *const MzuRelevance, buf: *mut f64, buf_len: usize) -> MzuStatus {
    guard(|| {
        let r = map.as_ref().ok_or_else(|| invalid("map handle is null"))?;
        let cols = r.map.context_len();
        let need = r.map.rows.len() * cols;
        if buf_len < need {
            return Err(Fail(
                MzuStatus::BufferTooSmall,
                format!("buffer holds {buf_len} values, map needs {need}"),
            ));
        }
        if need == 0 {
            return Ok(());
        }
        if buf.is_null() {
            return Err(invalid("buffer is null"));
        }
        let dst = std::slice::from_raw_parts_mut(buf, need);
        for (row, chunk) in r.map.rows.iter().zip(dst.chunks_exact_mut(cols)) {
            chunk.fill(f64::NAN);
            chunk[..row.len()].copy_from_slice(row);
        }
        Ok(())
    })
}

/// Releases a map; null is ignored.
///
/// # Safety
/// `map` must come from [`mzu_relevance_map`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mzu_relevance_free(map: *mut MzuRelevance) {
    if !map.is_null() {
        drop(Box::from_raw(map));
    }
}

/// `D_zone` of `n` zones of `width` values each, stored row-major: the
/// negated mean cosine over all ordered zone pairs, self pairs included.
///
/// # Safety
/// `zones` must point to `n · width` readable doubles and `out` be valid.
#[no_mangle]
pub unsafe extern "C" fn mzu_zone_disagreement(zones: *const f64, n: usize, width: usize, out: *mut f64) -> MzuStatus {
    guard(|| {
        if n == 0 || width == 0 {
            return Err(invalid("need at least one zone of positive width"));
        }
        if zones.is_null() {
            return Err(invalid("zones pointer is null"));
        }
        let values = std::slice::from_raw_parts(zones, n * width).to_vec();
        let t = Tensor::<f64>::new(&[n, width], values)?;
        write_out(out, zone_disagreement_value(&t)?)
    })
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mzu_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
