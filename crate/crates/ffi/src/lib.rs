//! C interface to the hybridmt library.
//!
//! Every fallible function returns an [`HmtStatus`]; on failure a message is
//! available from [`hmt_last_error`] on the same thread. Models are opaque
//! handles created by [`hmt_model_load`] and released with [`hmt_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hybridmt::eval::{corpus_bleu, pronoun_prf, Smoothing};
use hybridmt::extract::PronounInventory;
use hybridmt::loss::{
    hybrid_loss_smoothed, LogitsMatrix, LossKind, LossSpec, MaskPolicy, NegativePolicy, TokenMask,
};
use hybridmt::model::checkpoint::Checkpoint;
use hybridmt::model::Model;
use hybridmt::Error;
use ndarray::Array2;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Dimension = 3,
    Io = 4,
    Checkpoint = 5,
    Parse = 6,
    NonFinite = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmtLossKind {
    Clm = 0,
    HybridNll = 1,
    HybridMm = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmtMaskPolicy {
    AllTokens = 0,
    PronounOnly = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmtNegativePolicy {
    MaxAll = 0,
    MaxExcludingReference = 1,
}

/// Objective configuration. `mask_policy` is informational here: callers
/// pass the token mask explicitly.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct HmtLossSpec {
    pub kind: HmtLossKind,
    pub lambda: f64,
    pub tau: f64,
    pub mu: f64,
    pub mask_policy: HmtMaskPolicy,
    pub negative_policy: HmtNegativePolicy,
}

/// Decomposed batch objective.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct HmtLossBreakdown {
    pub total: f64,
    pub generative: f64,
    pub discriminative: f64,
    pub masked_token_count: usize,
    pub sentence_count: usize,
}

/// Opaque model handle.
pub struct HmtModel {
    model: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior NUL");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HmtStatus {
    match e {
        Error::Dimension(_) | Error::LengthOverflow { .. } | Error::Empty(_) => HmtStatus::Dimension,
        Error::TokenOutOfRange { .. } | Error::InvalidArgument(_) | Error::Config(_) => {
            HmtStatus::InvalidArgument
        }
        Error::NonFinite(_) => HmtStatus::NonFinite,
        Error::Parse { .. } | Error::Json(_) => HmtStatus::Parse,
        Error::Checkpoint(_) => HmtStatus::Checkpoint,
        Error::Io { .. } => HmtStatus::Io,
    }
}

fn fail(status: HmtStatus, msg: impl Into<String>) -> HmtStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), HmtStatus>) -> HmtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HmtStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(HmtStatus::Panic, "internal panic"),
    }
}

fn lib(e: Error) -> HmtStatus {
    let s = status_of(&e);
    set_error(e.to_string());
    s
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, HmtStatus> {
    if p.is_null() {
        return Err(fail(HmtStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(HmtStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], HmtStatus> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(fail(HmtStatus::NullPointer, format!("{what} is null")));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn tokenized(text: &str) -> Vec<Vec<String>> {
    text.lines().map(hybridmt::corpus::tokenize).collect()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hmt_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Default objective of the given kind (lambda 0.5, tau 0.5, mu 0.3,
/// all-tokens mask, max-over-all negative).
#[no_mangle]
pub extern "C" fn hmt_loss_spec_default(kind: HmtLossKind) -> HmtLossSpec {
    HmtLossSpec {
        kind,
        lambda: 0.5,
        tau: 0.5,
        mu: 0.3,
        mask_policy: HmtMaskPolicy::AllTokens,
        negative_policy: HmtNegativePolicy::MaxAll,
    }
}

fn to_spec(s: &HmtLossSpec) -> LossSpec {
    LossSpec {
        kind: match s.kind {
            HmtLossKind::Clm => LossKind::Clm,
            HmtLossKind::HybridNll => LossKind::HybridNll,
            HmtLossKind::HybridMm => LossKind::HybridMm,
        },
        lambda: s.lambda,
        tau: s.tau,
        mu: s.mu,
        mask_policy: match s.mask_policy {
            HmtMaskPolicy::AllTokens => MaskPolicy::AllTokens,
            HmtMaskPolicy::PronounOnly => MaskPolicy::PronounOnly,
        },
        negative_policy: match s.negative_policy {
            HmtNegativePolicy::MaxAll => NegativePolicy::MaxAll,
            HmtNegativePolicy::MaxExcludingReference => NegativePolicy::MaxExcludingReference,
        },
    }
}

/// Batch objective over per-sentence logits.
///
/// `logits` holds the rows of all sentences back to back, row-major with
/// `vocab` columns; sentence `i` has `rows[i]` rows. `refs` has one id per
/// row and `mask` (nullable: all tokens) one byte per row. When `grad` is
/// not NULL it receives the gradient with the same layout as `logits`.
///
/// # Safety
/// Every non-null pointer must reference at least the number of elements
/// implied by `rows`, `n_sentences` and `vocab`.
#[no_mangle]
pub unsafe extern "C" fn hmt_loss(
    spec: *const HmtLossSpec,
    logits: *const f64,
    rows: *const usize,
    n_sentences: usize,
    vocab: usize,
    refs: *const usize,
    mask: *const u8,
    label_smoothing: f64,
    out: *mut HmtLossBreakdown,
    grad: *mut f64,
) -> HmtStatus {
    guard(|| {
        if spec.is_null() || out.is_null() {
            return Err(fail(HmtStatus::NullPointer, "spec and out must not be null"));
        }
        let spec = to_spec(&*spec);
        let rows = slice(rows, n_sentences, "rows")?;
        let total: usize = rows.iter().sum();
        let values = slice(logits, total * vocab, "logits")?;
        let ids = slice(refs, total, "refs")?;
        let flags = if mask.is_null() {
            None
        } else {
            Some(slice(mask, total, "mask")?)
        };
        let mut mats = Vec::with_capacity(n_sentences);
        let mut ref_lists = Vec::with_capacity(n_sentences);
        let mut masks = Vec::with_capacity(n_sentences);
        let mut at = 0;
        for &n in rows {
            let block = Array2::from_shape_vec((n, vocab), values[at * vocab..(at + n) * vocab].to_vec())
                .map_err(|e| fail(HmtStatus::Dimension, e.to_string()))?;
            mats.push(LogitsMatrix::new(block).map_err(lib)?);
            ref_lists.push(ids[at..at + n].to_vec());
            masks.push(match flags {
                Some(f) => TokenMask(f[at..at + n].iter().map(|&b| b != 0).collect()),
                None => TokenMask::all(n),
            });
            at += n;
        }
        let (bd, grads) =
            hybrid_loss_smoothed(&mats, &ref_lists, &masks, &spec, label_smoothing).map_err(lib)?;
        *out = HmtLossBreakdown {
            total: bd.total,
            generative: bd.generative,
            discriminative: bd.discriminative,
            masked_token_count: bd.masked_token_count,
            sentence_count: bd.sentence_count,
        };
        if !grad.is_null() {
            let dst = std::slice::from_raw_parts_mut(grad, total * vocab);
            let mut at = 0;
            for g in grads {
                for (d, v) in dst[at..at + g.len()].iter_mut().zip(g.iter()) {
                    *d = *v;
                }
                at += g.len();
            }
        }
        Ok(())
    })
}

/// Loads a checkpoint file into a new handle stored in `*out`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hmt_model_load(path: *const c_char, out: *mut *mut HmtModel) -> HmtStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(HmtStatus::NullPointer, "out is null"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let ck = Checkpoint::load(Path::new(path)).map_err(lib)?;
        *out = Box::into_raw(Box::new(HmtModel { model: ck.model }));
        Ok(())
    })
}

/// Releases a handle; NULL is ignored.
///
/// # Safety
/// `model` must come from [`hmt_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hmt_model_free(model: *mut HmtModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Vocabulary size of the model, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn hmt_model_vocab_size(model: *const HmtModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.vocab_size)
}

/// Greedy translation of one encoded source sentence. Writes at most
/// `out_cap` ids to `out` and the output length to `*out_len`; EOS is not
/// included. Returns `BufferTooSmall` (with `*out_len` set) when the output
/// does not fit.
///
/// # Safety
/// `src` must hold `src_len` ids, `out` `out_cap` slots, `out_len` one.
#[no_mangle]
pub unsafe extern "C" fn hmt_model_translate(
    model: *const HmtModel,
    src: *const usize,
    src_len: usize,
    max_len: usize,
    out: *mut usize,
    out_cap: usize,
    out_len: *mut usize,
) -> HmtStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(HmtStatus::NullPointer, "model is null"))?;
        if out_len.is_null() {
            return Err(fail(HmtStatus::NullPointer, "out_len is null"));
        }
        let src = slice(src, src_len, "src")?;
        let hyp = m.model.translate_greedy(src, max_len).map_err(lib)?;
        *out_len = hyp.len();
        if hyp.len() > out_cap {
            return Err(fail(
                HmtStatus::BufferTooSmall,
                format!("output needs {} slots, {out_cap} given", hyp.len()),
            ));
        }
        if !hyp.is_empty() {
            if out.is_null() {
                return Err(fail(HmtStatus::NullPointer, "out is null"));
            }
            ptr::copy_nonoverlapping(hyp.as_ptr(), out, hyp.len());
        }
        Ok(())
    })
}

/// Teacher-forced logits for one sentence pair: `tgt_len` rows of
/// `vocab_size` values written row-major to `out` (`out_cap` values).
///
/// # Safety
/// Pointers must reference the stated number of elements.
#[no_mangle]
pub unsafe extern "C" fn hmt_model_logits(
    model: *const HmtModel,
    src: *const usize,
    src_len: usize,
    tgt: *const usize,
    tgt_len: usize,
    out: *mut f64,
    out_cap: usize,
) -> HmtStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(HmtStatus::NullPointer, "model is null"))?;
        let src = slice(src, src_len, "src")?;
        let tgt = slice(tgt, tgt_len, "tgt")?;
        let logits = m.model.forward(src, tgt, false).map_err(lib)?;
        let v = logits.view();
        if v.len() > out_cap {
            return Err(fail(
                HmtStatus::BufferTooSmall,
                format!("logits need {} values, {out_cap} given", v.len()),
            ));
        }
        if out.is_null() {
            return Err(fail(HmtStatus::NullPointer, "out is null"));
        }
        let dst = std::slice::from_raw_parts_mut(out, v.len());
        for (d, x) in dst.iter_mut().zip(v.iter()) {
            *d = *x;
        }
        Ok(())
    })
}

/// Corpus BLEU (0-100, 4-gram, no smoothing) of newline-separated,
/// whitespace-tokenized hypotheses against references.
///
/// # Safety
/// Both strings must be NUL-terminated; `score` must be valid.
#[no_mangle]
pub unsafe extern "C" fn hmt_corpus_bleu(
    hyps: *const c_char,
    refs: *const c_char,
    score: *mut f64,
) -> HmtStatus {
    guard(|| {
        if score.is_null() {
            return Err(fail(HmtStatus::NullPointer, "score is null"));
        }
        let h = tokenized(c_str(hyps, "hyps")?);
        let r = tokenized(c_str(refs, "refs")?);
        *score = corpus_bleu(&h, &r, 4, Smoothing::None).map_err(lib)?.score;
        Ok(())
    })
}

/// Macro-averaged pronoun precision, recall and F1 (each in [0, 1]) over the
/// bundled pronoun inventory. Any of the output pointers may be NULL.
///
/// # Safety
/// Both strings must be NUL-terminated; non-null outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn hmt_pronoun_prf(
    hyps: *const c_char,
    refs: *const c_char,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> HmtStatus {
    guard(|| {
        let h = tokenized(c_str(hyps, "hyps")?);
        let r = tokenized(c_str(refs, "refs")?);
        let rep = pronoun_prf(&h, &r, &PronounInventory::builtin().set()).map_err(lib)?;
        for (p, v) in [
            (precision, rep.macro_precision),
            (recall, rep.macro_recall),
            (f1, rep.macro_f1),
        ] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}
