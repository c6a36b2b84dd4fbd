//! C ABI over the syntaxshap engine.
//!
//! Objects are opaque handles created by `ss_*_new`/`ss_*_from_*` functions
//! and released with the matching `ss_*_free`. Every fallible function returns
//! an [`SsStatus`]; on failure `ss_last_error` holds a message for the calling
//! thread. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, c_void, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Duration;

use syntaxshap::attribution::{explain, AttributionError, AttributionResult, Method, RunSettings};
use syntaxshap::coalition::{count_updates, predicted_evaluations};
use syntaxshap::deptree::{expand_subtokens, read_conllu, DepTreeError, DependencyTree, TokenSpan, TokenizedTree};
use syntaxshap::oracle::{
    remote_oracle, respond_from_distribution, toy_hash_lm, toy_token_id, ModelMeta, OracleError, Strategy, ValueOracle,
    ValueRequest, ValueResponse,
};

pub const SS_METHOD_SYNTAXSHAP: u32 = 0;
pub const SS_METHOD_SYNTAXSHAP_W: u32 = 1;
pub const SS_METHOD_EXACT_SHAPLEY: u32 = 2;
pub const SS_METHOD_RANDOM: u32 = 3;

pub const SS_STRATEGY_ZERO_ATTENTION: u32 = 0;
pub const SS_STRATEGY_RANDOM_REPLACE: u32 = 1;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    Oracle = 4,
    TooLarge = 5,
    BufferTooSmall = 6,
    Panic = 7,
}

/// A token-level dependency tree.
pub struct SsTree {
    inner: TokenizedTree,
}

/// A model answering value queries.
pub struct SsOracle {
    inner: Box<dyn ValueOracle>,
}

/// One attribution result.
pub struct SsResult {
    inner: AttributionResult,
}

/// Fills `dist[0..vocab_size]` with the next-token distribution for `tokens`
/// where only positions with `keep[i]` set are visible. Returns 0 on success.
pub type SsDistributionFn = Option<
    unsafe extern "C" fn(
        user_data: *mut c_void,
        tokens: *const u32,
        keep: *const bool,
        n: usize,
        strategy: u32,
        seed: u64,
        dist: *mut f64,
        vocab_size: u32,
    ) -> i32,
>;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(SsStatus, String);

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SsStatus::Ok,
        Ok(Err(Failure(status, message))) => {
            set_error(message);
            status
        }
        Err(panic) => {
            let message = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {message}"));
            SsStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SsStatus::NullPointer, format!("{what} is null"))
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure(SsStatus::InvalidArgument, message.into())
}

unsafe fn slice<'a, T>(ptr: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, n))
}

unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| invalid(format!("{what} is not UTF-8")))
}

unsafe fn out_handle<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Failure> {
    ptr.as_ref().ok_or_else(|| null(what))
}

fn method_of(m: u32) -> Result<Method, Failure> {
    match m {
        SS_METHOD_SYNTAXSHAP => Ok(Method::Syntaxshap),
        SS_METHOD_SYNTAXSHAP_W => Ok(Method::SyntaxshapW),
        SS_METHOD_EXACT_SHAPLEY => Ok(Method::ExactShapley),
        SS_METHOD_RANDOM => Ok(Method::Random),
        _ => Err(invalid(format!("unknown method {m}"))),
    }
}

fn strategy_of(s: u32) -> Result<Strategy, Failure> {
    match s {
        SS_STRATEGY_ZERO_ATTENTION => Ok(Strategy::ZeroAttention),
        SS_STRATEGY_RANDOM_REPLACE => Ok(Strategy::RandomReplace),
        _ => Err(invalid(format!("unknown masking strategy {s}"))),
    }
}

/// Copies the calling thread's last error message into `buf` (NUL terminated,
/// truncated to `cap`). Returns the full message length plus one, or 0 when
/// there is no error.
///
/// # Safety
/// `buf` must point to `cap` writable bytes, or be null with `cap == 0`.
#[no_mangle]
pub unsafe extern "C" fn ss_last_error(buf: *mut c_char, cap: usize) -> usize {
    LAST_ERROR.with(|e| match &*e.borrow() {
        None => 0,
        Some(msg) => {
            let bytes = msg.as_bytes_with_nul();
            if !buf.is_null() && cap > 0 {
                let n = bytes.len().min(cap);
                std::ptr::copy_nonoverlapping(bytes.as_ptr() as *const c_char, buf, n);
                *buf.add(n - 1) = 0;
            }
            bytes.len()
        }
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ss_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Builds a tree with one token per word. `heads[i]` is the 1-based head of
/// word `i + 1` (0 for the root); `token_ids[i]` its model token id.
///
/// # Safety
/// `heads` and `token_ids` must point to `n` readable elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_tree_from_heads(heads: *const usize, token_ids: *const u32, n: usize, out: *mut *mut SsTree) -> SsStatus {
    guard(|| {
        let heads = slice(heads, n, "heads")?;
        let ids = slice(token_ids, n, "token_ids")?;
        let tree = DependencyTree::from_heads(heads).map_err(|e| Failure(SsStatus::Parse, e.to_string()))?;
        let spans: Vec<TokenSpan> = tree
            .nodes()
            .iter()
            .zip(ids)
            .map(|(w, &id)| TokenSpan { text: w.text.clone(), word_index: w.word_index, id })
            .collect();
        let inner = expand_subtokens(&tree, &spans).map_err(|e| Failure(SsStatus::Parse, e.to_string()))?;
        out_handle(out, SsTree { inner })
    })
}

/// Parses sentence `index` (0-based) of a CoNLL-U document. Token ids come from
/// the `TokIds` MISC key when present, else from hashing word forms into
/// `vocab_size` entries.
///
/// # Safety
/// `conllu` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_tree_from_conllu(conllu: *const c_char, index: usize, vocab_size: u32, out: *mut *mut SsTree) -> SsStatus {
    guard(|| {
        let text = str_arg(conllu, "conllu")?;
        let parse = |e: DepTreeError| Failure(SsStatus::Parse, e.to_string());
        let sentences = read_conllu(text).map_err(parse)?;
        let sentence = sentences
            .into_iter()
            .nth(index)
            .ok_or_else(|| invalid(format!("document has no sentence {index}")))?;
        let tree = sentence.tree.map_err(parse)?;
        let inner = match TokenizedTree::from_misc(&tree).map_err(parse)? {
            Some(t) => t,
            None if vocab_size >= 2 => TokenizedTree::one_token_per_word(&tree, |w| toy_token_id(w, vocab_size)),
            None => return Err(invalid("vocab_size must be at least 2 when the parse has no token ids")),
        };
        out_handle(out, SsTree { inner })
    })
}

/// Number of token features, 0 for a null tree.
///
/// # Safety
/// `tree` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_tree_len(tree: *const SsTree) -> usize {
    tree.as_ref().map_or(0, |t| t.inner.len())
}

/// Copies the 1-based level of every token into `levels[0..cap]`.
///
/// # Safety
/// `tree` must be a live handle and `levels` must point to `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ss_tree_levels(tree: *const SsTree, levels: *mut usize, cap: usize) -> SsStatus {
    guard(|| {
        let t = handle(tree, "tree")?;
        copy_out(t.inner.tokens().iter().map(|t| t.level), levels, cap)
    })
}

/// # Safety
/// `tree` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_tree_free(tree: *mut SsTree) {
    if !tree.is_null() {
        drop(Box::from_raw(tree));
    }
}

/// Number of allowed coalitions a feature at `level` joins.
///
/// # Safety
/// `tree` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_count_updates(tree: *const SsTree, level: usize, out: *mut u64) -> SsStatus {
    guard(|| {
        let t = handle(tree, "tree")?;
        let c = count_updates(&t.inner, level).map_err(|e| invalid(e.to_string()))?;
        write(out, c.count)
    })
}

/// Total (coalition, feature) pairs a full run evaluates, and the pair count of
/// exact Shapley values (saturating at `UINT64_MAX`).
///
/// # Safety
/// `tree` must be a live handle; `pairs` and `naive` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_predicted_evaluations(tree: *const SsTree, pairs: *mut u64, naive: *mut u64) -> SsStatus {
    guard(|| {
        let t = handle(tree, "tree")?;
        let p = predicted_evaluations(&t.inner).map_err(|e| Failure(SsStatus::TooLarge, e.to_string()))?;
        write(pairs, p.pair_count)?;
        write(naive, u64::try_from(p.naive_shapley_count).unwrap_or(u64::MAX))
    })
}

/// Deterministic toy language model.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_oracle_toy(seed: u64, vocab_size: u32, out: *mut *mut SsOracle) -> SsStatus {
    guard(|| {
        if vocab_size < 2 {
            return Err(invalid("vocab_size must be at least 2"));
        }
        out_handle(out, SsOracle { inner: Box::new(toy_hash_lm(seed, vocab_size)) })
    })
}

/// Client for an HTTP scoring server; performs the metadata handshake.
///
/// # Safety
/// `url` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_oracle_remote(url: *const c_char, timeout_ms: u64, retries: u32, out: *mut *mut SsOracle) -> SsStatus {
    guard(|| {
        let url = str_arg(url, "url")?;
        let oracle = remote_oracle(url, Duration::from_millis(timeout_ms), retries).map_err(|e| Failure(SsStatus::Oracle, e.to_string()))?;
        out_handle(out, SsOracle { inner: Box::new(oracle) })
    })
}

struct CallbackOracle {
    callback: unsafe extern "C" fn(*mut c_void, *const u32, *const bool, usize, u32, u64, *mut f64, u32) -> i32,
    user_data: *mut c_void,
    vocab_size: u32,
}

// The caller of ss_oracle_callback promises the callback may run on any thread.
unsafe impl Send for CallbackOracle {}
unsafe impl Sync for CallbackOracle {}

impl ValueOracle for CallbackOracle {
    fn evaluate(&self, request: &ValueRequest) -> Result<ValueResponse, OracleError> {
        request.validate()?;
        let mut dist = vec![0.0; self.vocab_size as usize];
        let strategy = match request.strategy {
            Strategy::ZeroAttention => SS_STRATEGY_ZERO_ATTENTION,
            Strategy::RandomReplace => SS_STRATEGY_RANDOM_REPLACE,
        };
        let code = unsafe {
            (self.callback)(
                self.user_data,
                request.tokens.as_ptr(),
                request.keep.as_ptr(),
                request.tokens.len(),
                strategy,
                request.seed,
                dist.as_mut_ptr(),
                self.vocab_size,
            )
        };
        if code != 0 {
            return Err(OracleError::Model(format!("callback returned {code}")));
        }
        respond_from_distribution(&dist, request)
    }

    fn meta(&self) -> ModelMeta {
        ModelMeta { model: "callback".into(), vocab_size: self.vocab_size, max_tokens: 0 }
    }
}

/// Wraps a C function returning next-token distributions. The callback may be
/// invoked concurrently from several threads and must be deterministic.
///
/// # Safety
/// `callback` must stay valid, and `user_data` usable from any thread, until
/// the oracle is freed. `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_oracle_callback(
    callback: SsDistributionFn,
    user_data: *mut c_void,
    vocab_size: u32,
    out: *mut *mut SsOracle,
) -> SsStatus {
    guard(|| {
        let callback = callback.ok_or_else(|| null("callback"))?;
        if vocab_size == 0 {
            return Err(invalid("vocab_size must be positive"));
        }
        out_handle(out, SsOracle { inner: Box::new(CallbackOracle { callback, user_data, vocab_size }) })
    })
}

/// # Safety
/// `oracle` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_oracle_free(oracle: *mut SsOracle) {
    if !oracle.is_null() {
        drop(Box::from_raw(oracle));
    }
}

/// Explains the model's prediction for `tree`. With `has_target` false the
/// model's top-1 next token on the full sentence is explained.
///
/// # Safety
/// `tree` and `oracle` must be live handles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_explain(
    tree: *const SsTree,
    oracle: *const SsOracle,
    method: u32,
    strategy: u32,
    seed: u64,
    has_target: bool,
    target: u32,
    out: *mut *mut SsResult,
) -> SsStatus {
    guard(|| {
        let t = handle(tree, "tree")?;
        let o = handle(oracle, "oracle")?;
        let settings = RunSettings { strategy: strategy_of(strategy)?, seed, target: has_target.then_some(target) };
        let inner = explain(method_of(method)?, &t.inner, &*o.inner, &settings).map_err(|e| {
            let status = match e {
                AttributionError::Oracle { .. } => SsStatus::Oracle,
                AttributionError::TooLarge { .. } | AttributionError::Coalition(_) => SsStatus::TooLarge,
                AttributionError::Empty => SsStatus::InvalidArgument,
            };
            Failure(status, e.to_string())
        })?;
        out_handle(out, SsResult { inner })
    })
}

/// Number of values in a result, 0 for null.
///
/// # Safety
/// `result` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ss_result_len(result: *const SsResult) -> usize {
    result.as_ref().map_or(0, |r| r.inner.values.len())
}

/// # Safety
/// `result` must be a live handle and `values` must point to `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ss_result_values(result: *const SsResult, values: *mut f64, cap: usize) -> SsStatus {
    guard(|| copy_out(handle(result, "result")?.inner.values.iter().copied(), values, cap))
}

/// 1-based ranks, 1 for the most important token.
///
/// # Safety
/// `result` must be a live handle and `ranks` must point to `cap` writable elements.
#[no_mangle]
pub unsafe extern "C" fn ss_result_ranks(result: *const SsResult, ranks: *mut usize, cap: usize) -> SsStatus {
    guard(|| copy_out(handle(result, "result")?.inner.ranks.iter().copied(), ranks, cap))
}

/// The explained next token.
///
/// # Safety
/// `result` must be a live handle; `target` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_result_target(result: *const SsResult, target: *mut u32) -> SsStatus {
    guard(|| {
        let r = handle(result, "result")?;
        let t = r.inner.target_token.ok_or_else(|| invalid("result has no target token"))?;
        write(target, t)
    })
}

/// Marginal terms evaluated and distinct oracle queries made.
///
/// # Safety
/// `result` must be a live handle; `pairs` and `unique` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ss_result_oracle_calls(result: *const SsResult, pairs: *mut u64, unique: *mut u64) -> SsStatus {
    guard(|| {
        let r = handle(result, "result")?;
        write(pairs, r.inner.oracle_calls.pairs)?;
        write(unique, r.inner.oracle_calls.unique)
    })
}

/// # Safety
/// `result` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ss_result_free(result: *mut SsResult) {
    if !result.is_null() {
        drop(Box::from_raw(result));
    }
}

unsafe fn write<T>(ptr: *mut T, value: T) -> Result<(), Failure> {
    if ptr.is_null() {
        return Err(null("output pointer"));
    }
    *ptr = value;
    Ok(())
}

unsafe fn copy_out<T>(items: impl ExactSizeIterator<Item = T>, ptr: *mut T, cap: usize) -> Result<(), Failure> {
    let n = items.len();
    if cap < n {
        return Err(Failure(SsStatus::BufferTooSmall, format!("buffer holds {cap} values, {n} needed")));
    }
    if n > 0 && ptr.is_null() {
        return Err(null("output buffer"));
    }
    for (k, v) in items.enumerate() {
        *ptr.add(k) = v;
    }
    Ok(())
}
