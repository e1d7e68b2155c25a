//! C ABI for the eventdistill loss, ranking and peer-scoring functions.
//!
//! Every function returns an [`EdStatus`]. On failure a message is kept per
//! thread and can be read with [`ed_last_error_message`]. Output pointers
//! are written only on success.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use eventdistill::distill::{self, MaskVector};
use eventdistill::encoders::{Encoder, SequenceBatch};
use eventdistill::evaluator;
use eventdistill::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Shape = 6,
    Index = 7,
    Panic = 8,
    Other = 9,
}

impl From<&Error> for EdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Config(_) => Self::Config,
            Error::Data(_) | Error::Serde(_) => Self::Data,
            Error::Numeric(_) => Self::Numeric,
            Error::Io { .. } => Self::Io,
            Error::Shape(_) => Self::Shape,
            Error::Index { .. } => Self::Index,
            Error::Tensor(_) => Self::Other,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(EdStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(EdStatus::from(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(EdStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> EdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EdStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            EdStatus::Panic
        }
    }
}

/// # Safety
/// `ptr` must be null or point to `len` readable elements.
unsafe fn slice<'a, T>(ptr: *const T, len: usize, what: &str) -> Result<&'a [T], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

/// # Safety
/// `ptr` must be null or point to `len` writable elements.
unsafe fn slice_mut<'a, T>(ptr: *mut T, len: usize, what: &str) -> Result<&'a mut [T], Failure> {
    if len == 0 {
        return Ok(&mut []);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

/// Message of the last failed call on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn ed_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(std::ptr::null(), |c| c.as_ptr()))
}

/// Softmax of `n` logits into `out`.
///
/// # Safety
/// `z` and `out` must each point to `n` doubles.
#[no_mangle]
pub unsafe extern "C" fn ed_softmax(z: *const f64, n: usize, out: *mut f64) -> EdStatus {
    guard(|| {
        let z = slice(z, n, "z")?;
        let out = slice_mut(out, n, "out")?;
        out.copy_from_slice(&distill::softmax(z)?);
        Ok(())
    })
}

/// Target and non-target probability mass.
///
/// # Safety
/// `z` must point to `n` doubles; `p_target` and `p_rest` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_decouple_target(
    z: *const f64,
    n: usize,
    target: usize,
    p_target: *mut f64,
    p_rest: *mut f64,
) -> EdStatus {
    guard(|| {
        let z = slice(z, n, "z")?;
        if p_target.is_null() || p_rest.is_null() {
            return Err(null("output"));
        }
        let s = distill::decouple_target(z, target)?;
        *p_target = s.target;
        *p_rest = s.rest;
        Ok(())
    })
}

/// Distribution over the entries whose `masked` flag is zero. The target
/// must be flagged. Masked entries of `out` are set to zero.
///
/// # Safety
/// `z`, `masked` and `out` must each point to `n` elements.
#[no_mangle]
pub unsafe extern "C" fn ed_nontarget_distribution(
    z: *const f64,
    n: usize,
    target: usize,
    masked: *const u8,
    out: *mut f64,
) -> EdStatus {
    guard(|| {
        let z = slice(z, n, "z")?;
        let flags = slice(masked, n, "masked")?;
        let out = slice_mut(out, n, "out")?;
        let mask = MaskVector::from_flags(flags.iter().map(|&f| f != 0).collect());
        out.copy_from_slice(&distill::nontarget_distribution(z, target, &mask)?);
        Ok(())
    })
}

/// Decoupled distillation loss of a student against a constant teacher.
/// `grad` may be null; otherwise it receives the gradient with respect to
/// the student logits.
///
/// # Safety
/// `z_student` and `z_teacher` must point to `n` doubles, `loss` must be
/// writable, and a non-null `grad` must point to `n` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn ed_dkd_loss(
    z_student: *const f64,
    z_teacher: *const f64,
    n: usize,
    target: usize,
    beta: f64,
    loss: *mut f64,
    grad: *mut f64,
) -> EdStatus {
    guard(|| {
        let zs = slice(z_student, n, "z_student")?;
        let zt = slice(z_teacher, n, "z_teacher")?;
        if loss.is_null() {
            return Err(null("loss"));
        }
        let lg = distill::dkd_loss_with_grad(zs, zt, target, beta)?;
        *loss = lg.value;
        if !grad.is_null() {
            slice_mut(grad, n, "grad")?.copy_from_slice(&lg.grad);
        }
        Ok(())
    })
}

/// 1-based rank of `scores[target]` with ties counted against it.
///
/// # Safety
/// `scores` must point to `n` doubles and `rank` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_rank_of_target(
    scores: *const f64,
    n: usize,
    target: usize,
    rank: *mut usize,
) -> EdStatus {
    guard(|| {
        let s = slice(scores, n, "scores")?;
        if rank.is_null() {
            return Err(null("rank"));
        }
        *rank = evaluator::rank_of_target(s, target)?;
        Ok(())
    })
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EdMetrics {
    pub hr_at_5: f64,
    pub hr_at_10: f64,
    pub ndcg_at_5: f64,
    pub ndcg_at_10: f64,
    pub mrr: f64,
    pub count: usize,
}

/// HR, NDCG at 5 and 10 and MRR of `n` 1-based ranks.
///
/// # Safety
/// `ranks` must point to `n` values and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ed_metrics_from_ranks(
    ranks: *const usize,
    n: usize,
    out: *mut EdMetrics,
) -> EdStatus {
    guard(|| {
        let r = slice(ranks, n, "ranks")?;
        if out.is_null() {
            return Err(null("out"));
        }
        let m = evaluator::metrics_from_ranks(r, &evaluator::DEFAULT_CUTOFFS)?;
        *out = EdMetrics {
            hr_at_5: m.hr_at(5),
            hr_at_10: m.hr_at(10),
            ndcg_at_5: m.ndcg_at(5),
            ndcg_at_10: m.ndcg_at(10),
            mrr: m.mrr,
            count: m.count,
        };
        Ok(())
    })
}

/// A trained peer loaded from a checkpoint file.
pub struct EdPeer {
    encoder: Encoder,
}

/// Loads a peer checkpoint (`peerK.json` inside a run checkpoint).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` must be writable. The
/// handle written to `out` must be released with [`ed_peer_free`].
#[no_mangle]
pub unsafe extern "C" fn ed_peer_load(path: *const c_char, out: *mut *mut EdPeer) -> EdStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Failure(EdStatus::Config, "path is not UTF-8".into()))?;
        let encoder = Encoder::load(Path::new(p))?;
        *out = Box::into_raw(Box::new(EdPeer { encoder }));
        Ok(())
    })
}

/// Number of event classes the peer scores.
///
/// # Safety
/// `peer` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ed_peer_n_classes(peer: *const EdPeer, out: *mut usize) -> EdStatus {
    guard(|| {
        let peer = peer.as_ref().ok_or_else(|| null("peer"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = peer.encoder.config().n_classes;
        Ok(())
    })
}

/// Next-event logits for one history of class ids.
///
/// # Safety
/// `peer` must be a live handle, `history` must point to `len` ids and
/// `out` to `out_len` writable doubles, where `out_len` equals the class
/// count.
#[no_mangle]
pub unsafe extern "C" fn ed_peer_score(
    peer: *const EdPeer,
    history: *const u32,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> EdStatus {
    guard(|| {
        let peer = peer.as_ref().ok_or_else(|| null("peer"))?;
        let h = slice(history, len, "history")?;
        let n = peer.encoder.config().n_classes;
        if out_len != n {
            return Err(Failure(
                EdStatus::Shape,
                format!("output holds {out_len} values, peer scores {n} classes"),
            ));
        }
        let out = slice_mut(out, out_len, "out")?;
        let batch = SequenceBatch::from_histories(&[h], peer.encoder.config())?;
        let logits = peer.encoder.logits(&batch)?;
        for (dst, src) in out.iter_mut().zip(logits.row(0)) {
            *dst = *src;
        }
        Ok(())
    })
}

/// Releases a handle from [`ed_peer_load`]. Null is ignored.
///
/// # Safety
/// `peer` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ed_peer_free(peer: *mut EdPeer) {
    if !peer.is_null() {
        drop(Box::from_raw(peer));
    }
}
