//! C ABI over the maskvar library.
//!
//! Every fallible call returns an `MvStatus`; on failure a message for the
//! calling thread is available from `mv_last_error_message`. Models are
//! opaque handles released with `mv_model_free`, strings returned by the
//! library with `mv_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use maskvar::corpus::TokenSequence;
use maskvar::encoder::{forward_mlm, pure_masked, EncoderConfig};
use maskvar::mask_proposal::{self, MaskPlan, ProposalDistribution};
use maskvar::masking::{explore_p, ExplorationSchedule};
use maskvar::model::Model;
use maskvar::oracle::{self, Suite};
use maskvar::trainer::{lr_at, stream_rng, Stream, TrainConfig};
use maskvar::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Numeric = 5,
    /// An oracle suite ran and at least one check failed.
    CheckFailed = 6,
    Panic = 7,
}

/// A model plus the training config it was built or saved with.
pub struct MvModel {
    model: Model,
    config: TrainConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: MvStatus, msg: impl Into<String>) -> MvStatus {
    set_error(msg);
    status
}

fn status_of(e: &Error) -> MvStatus {
    match e {
        Error::Io { .. } => MvStatus::Io,
        Error::Format(_) | Error::Parse { .. } => MvStatus::Format,
        Error::Numeric(_) | Error::Degenerate(_) => MvStatus::Numeric,
        _ => MvStatus::InvalidArgument,
    }
}

fn guard<F: FnOnce() -> Result<(), MvStatus>>(f: F) -> MvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MvStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(MvStatus::Panic, "internal panic"),
    }
}

trait OrStatus<T> {
    fn or_status(self) -> Result<T, MvStatus>;
}

impl<T> OrStatus<T> for maskvar::Result<T> {
    fn or_status(self) -> Result<T, MvStatus> {
        self.map_err(|e| fail(status_of(&e), e.to_string()))
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), MvStatus> {
    if p.is_null() {
        Err(fail(MvStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], MvStatus> {
    if n == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], MvStatus> {
    if n == 0 {
        return Ok(&mut []);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn model_ref<'a>(m: *const MvModel) -> Result<&'a MvModel, MvStatus> {
    non_null(m, "model")?;
    Ok(&*m)
}

unsafe fn sentence(m: &MvModel, tokens: *const u32, n: usize) -> Result<TokenSequence, MvStatus> {
    let t = slice(tokens, n, "tokens")?;
    if t.is_empty() {
        return Err(fail(MvStatus::InvalidArgument, "empty sentence"));
    }
    let cfg = m.model.config();
    if t.len() > cfg.max_seq_len {
        return Err(fail(MvStatus::InvalidArgument, format!("sentence of {} exceeds max_seq_len {}", t.len(), cfg.max_seq_len)));
    }
    if let Some(&bad) = t.iter().find(|&&v| v as usize >= cfg.vocab_size) {
        return Err(fail(MvStatus::InvalidArgument, format!("token {bad} outside vocabulary of {}", cfg.vocab_size)));
    }
    Ok(TokenSequence(t.to_vec()))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mv_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Fresh toy-sized model with seeded initialisation.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mv_model_new_toy(vocab_size: u64, seed: u64, out: *mut *mut MvModel) -> MvStatus {
    guard(|| {
        non_null(out, "out")?;
        let config = EncoderConfig::toy(vocab_size as usize);
        let model = Model::new(config, &mut stream_rng(seed, Stream::Init)).or_status()?;
        let mut train = TrainConfig::toy();
        train.seed = seed;
        *out = Box::into_raw(Box::new(MvModel { model, config: train }));
        Ok(())
    })
}

/// Loads the model and training config from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` as for `mv_model_new_toy`.
#[no_mangle]
pub unsafe extern "C" fn mv_model_load(path: *const c_char, out: *mut *mut MvModel) -> MvStatus {
    guard(|| {
        non_null(path, "path")?;
        non_null(out, "out")?;
        let p = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| fail(MvStatus::InvalidArgument, "path is not UTF-8"))?;
        let (state, config) = maskvar::checkpoint::load(Path::new(p)).or_status()?;
        *out = Box::into_raw(Box::new(MvModel {
            model: state.model,
            config,
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_model_free(m: *mut MvModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Vocabulary size of the model, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mv_model_vocab_size(m: *const MvModel) -> u64 {
    m.as_ref().map_or(0, |m| m.model.config().vocab_size as u64)
}

/// Longest sentence the model accepts, 0 for null.
///
/// # Safety
/// `m` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mv_model_max_seq_len(m: *const MvModel) -> u64 {
    m.as_ref().map_or(0, |m| m.model.config().max_seq_len as u64)
}

/// Proposal distribution over the `n` positions of `tokens`, written to
/// `out_probs[0..n]`.
///
/// # Safety
/// `tokens` and `out_probs` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mv_propose(m: *const MvModel, tokens: *const u32, n: usize, out_probs: *mut f64) -> MvStatus {
    guard(|| {
        let m = model_ref(m)?;
        let x = sentence(m, tokens, n)?;
        let out = slice_mut(out_probs, n, "out_probs")?;
        let dist = m.model.mapnet.propose(&m.model.store, x.tokens()).or_status()?;
        out.copy_from_slice(dist.probs());
        Ok(())
    })
}

/// Encoder loss of each position when it alone is replaced by `[MASK]`,
/// written to `out_losses[0..n]`.
///
/// # Safety
/// `tokens` and `out_losses` must each hold `n` elements.
#[no_mangle]
pub unsafe extern "C" fn mv_position_losses(
    m: *const MvModel,
    tokens: *const u32,
    n: usize,
    out_losses: *mut f64,
) -> MvStatus {
    guard(|| {
        let m = model_ref(m)?;
        let x = sentence(m, tokens, n)?;
        let out = slice_mut(out_losses, n, "out_losses")?;
        for (i, o) in out.iter_mut().enumerate() {
            let plan = MaskPlan::pure_mask(vec![i], n);
            let masked = pure_masked(&x, &plan.positions);
            *o = forward_mlm(&m.model, &masked, &plan, &x).or_status()?[0].loss;
        }
        Ok(())
    })
}

/// Learning rate the model's schedule applies at `step`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_model_lr_at(m: *const MvModel, step: u64, out: *mut f64) -> MvStatus {
    guard(|| {
        let m = model_ref(m)?;
        non_null(out, "out")?;
        *out = lr_at(&m.config, step);
        Ok(())
    })
}

/// Draws `k` distinct positions from `probs[0..n]` without replacement,
/// writing the positions and their draw-time probabilities.
///
/// # Safety
/// `probs` must hold `n` elements; both outputs must hold `k`.
#[no_mangle]
pub unsafe extern "C" fn mv_sample_positions(
    probs: *const f64,
    n: usize,
    k: usize,
    seed: u64,
    out_positions: *mut usize,
    out_raw_probs: *mut f64,
) -> MvStatus {
    guard(|| {
        let p = slice(probs, n, "probs")?;
        let pos = slice_mut(out_positions, k, "out_positions")?;
        let raw = slice_mut(out_raw_probs, k, "out_raw_probs")?;
        let dist = ProposalDistribution::from_weights(p).or_status()?;
        let (ps, rs) = mask_proposal::sample_positions(&dist, k, &mut ChaCha8Rng::seed_from_u64(seed)).or_status()?;
        pos.copy_from_slice(&ps);
        raw.copy_from_slice(&rs);
        Ok(())
    })
}

/// Importance weight of a draw against uniform masking and its clipped
/// value in `[1 - eps, 1 + eps]`.
///
/// # Safety
/// `raw_probs` must hold `k` elements; both outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_importance_ratio(
    raw_probs: *const f64,
    k: usize,
    n: usize,
    eps: f64,
    out_ratio: *mut f64,
    out_clipped: *mut f64,
) -> MvStatus {
    guard(|| {
        let p = slice(raw_probs, k, "raw_probs")?;
        non_null(out_ratio, "out_ratio")?;
        non_null(out_clipped, "out_clipped")?;
        let (r, c) = mask_proposal::importance_ratio(p, n, k, eps).or_status()?;
        *out_ratio = r;
        *out_clipped = c;
        Ok(())
    })
}

/// Uniform-branch probability at `step` of a linear schedule from
/// `start_p` to `end_p` over `end_step` steps. NaN for invalid input.
#[no_mangle]
pub extern "C" fn mv_explore_p(start_p: f64, end_p: f64, end_step: u64, step: u64) -> f64 {
    let s = ExplorationSchedule {
        start_p,
        end_p,
        end_step,
    };
    match s.validate() {
        Ok(()) => explore_p(&s, step),
        Err(e) => {
            set_error(e.to_string());
            f64::NAN
        }
    }
}

/// Runs an oracle suite (`decomposition`, `unbiasedness`, `optimality`,
/// `correlation`) and returns its JSON report in `out_json`, to be released
/// with `mv_string_free`. Returns `CheckFailed` with the report set when a
/// check fails.
///
/// # Safety
/// `suite` must be a NUL-terminated string; `out_json` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mv_oracle_run(suite: *const c_char, seed: u64, out_json: *mut *mut c_char) -> MvStatus {
    let mut passed = true;
    let status = guard(|| {
        non_null(suite, "suite")?;
        non_null(out_json, "out_json")?;
        let name = CStr::from_ptr(suite).to_str().unwrap_or("");
        let s = Suite::parse(name).ok_or_else(|| fail(MvStatus::InvalidArgument, format!("unknown suite `{name}`")))?;
        let r = oracle::run_suite(s, seed).or_status()?;
        passed = r.passed;
        let json = serde_json::to_string(&r).expect("json");
        *out_json = CString::new(json).expect("no NUL in json").into_raw();
        Ok(())
    });
    if status == MvStatus::Ok && !passed {
        return fail(MvStatus::CheckFailed, "oracle suite failed");
    }
    status
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mv_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
