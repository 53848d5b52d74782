//! C ABI over the skillgate runtime.
//!
//! Handles are opaque. Every entry point returns an [`SgStatus`]; on any
//! status other than `SG_STATUS_OK` the reason is available from
//! [`sg_last_error_message`] on the same thread. Strings handed out by this
//! library are NUL-terminated UTF-8 and must be released with
//! [`sg_string_free`].
//!
//! Only unattended brokers are offered here (`deny-all`, `allow-all`,
//! `policy`). A host that wants a human in the loop runs `skillgate serve`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use serde_json::{json, Value};
use skillgate::audit::{verify_text, ChainVerdict};
use skillgate::config::{open_session, outcome_json, verdict_json, ConfigError, Profile, RunHooks, RunOptions};
use skillgate::ensemble::wilson_ci;
use skillgate::gate::{BrokerKind, RequestEnvelope};
use skillgate::lattice::Label;
use skillgate::runtime::{Session, SessionError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SgStatus {
    Ok = 0,
    /// A required pointer was null or an argument was out of range.
    InvalidArgument = 1,
    /// A string argument was not UTF-8.
    Utf8 = 2,
    /// JSON or a structured argument did not parse.
    Parse = 3,
    /// The trust root is not locked.
    Unlocked = 4,
    Io = 5,
    /// The session halted; only the audit log remains readable.
    Aborted = 6,
    /// A panic was caught at the boundary.
    Internal = 7,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let text = msg.into().replace('\0', " ");
    let c = CString::new(text).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: SgStatus, msg: impl Into<String>) -> SgStatus {
    set_error(msg);
    status
}

/// Message for the last failure on this thread, or null. Valid until the
/// next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn sg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn sg_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr().cast()
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

fn guard(f: impl FnOnce() -> SgStatus) -> SgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(SgStatus::Internal, "panic caught at the C boundary"),
    }
}

unsafe fn arg_str<'a>(p: *const c_char, name: &str) -> Result<&'a str, SgStatus> {
    if p.is_null() {
        return Err(fail(SgStatus::InvalidArgument, format!("{name} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(SgStatus::Utf8, format!("{name} is not UTF-8")))
}

unsafe fn put_string(out: *mut *mut c_char, s: String) -> SgStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            SgStatus::Ok
        }
        Err(_) => fail(SgStatus::Internal, "output contained a NUL byte"),
    }
}

fn session_status(e: &SessionError) -> SgStatus {
    match e {
        SessionError::UnlockedRoot => SgStatus::Unlocked,
        SessionError::Aborted(_) => SgStatus::Aborted,
        SessionError::FsRoot { .. } => SgStatus::Io,
        SessionError::Load(_) | SessionError::Package(_) => SgStatus::Parse,
    }
}

fn config_status(e: &ConfigError) -> SgStatus {
    match e {
        ConfigError::RootNotLocked(_) => SgStatus::Unlocked,
        ConfigError::Io(_) | ConfigError::Audit(_) => SgStatus::Io,
        ConfigError::Session(s) => session_status(s),
        ConfigError::Profile(_) | ConfigError::TrustRoot(_) | ConfigError::Invalid(_) => SgStatus::Parse,
    }
}

pub struct SgSession {
    session: Session,
    rejected: Vec<(PathBuf, String)>,
}

fn options_from_json(v: &Value) -> Result<RunOptions, String> {
    let obj = v.as_object().ok_or("options must be a JSON object")?;
    const KNOWN: [&str; 10] = [
        "profile",
        "rootFile",
        "corpus",
        "skills",
        "auditPath",
        "broker",
        "policy",
        "harness",
        "seed",
        "clearance",
    ];
    if let Some(k) = obj.keys().find(|k| !KNOWN.contains(&k.as_str())) {
        return Err(format!("unknown option {k:?}"));
    }
    let text = |k: &str| -> Result<Option<&str>, String> {
        match obj.get(k) {
            None | Some(Value::Null) => Ok(None),
            Some(Value::String(s)) => Ok(Some(s)),
            Some(_) => Err(format!("{k} must be a string")),
        }
    };
    let profile = Profile::parse(text("profile")?).map_err(|e| e.to_string())?;
    let root = text("rootFile")?.ok_or("rootFile is required")?;
    let corpus = text("corpus")?.ok_or("corpus is required")?;
    let mut opts = RunOptions::new(profile, root.into(), corpus.into());
    if let Some(list) = obj.get("skills") {
        let list = list.as_array().ok_or("skills must be an array of paths")?;
        for s in list {
            opts.skills
                .push(s.as_str().ok_or("skills must be an array of paths")?.into());
        }
    }
    opts.audit_path = text("auditPath")?.map(PathBuf::from);
    opts.policy = text("policy")?.map(PathBuf::from);
    if let Some(b) = text("broker")? {
        let kind = b.parse::<BrokerKind>().map_err(|e| e.to_string())?;
        if matches!(kind, BrokerKind::Interactive | BrokerKind::Webhook) {
            return Err(format!("broker {b} needs a human; use deny-all, allow-all or policy"));
        }
        opts.broker = Some(kind);
    } else if opts.broker_kind() == BrokerKind::Interactive {
        // The dev profile defaults to a terminal prompt, which a library
        // host cannot answer.
        opts.broker = Some(BrokerKind::DenyAll);
    }
    if let Some(c) = text("clearance")? {
        opts.operator_clearance = c.parse::<Label>().map_err(|e| e.to_string())?;
    }
    opts.harness = match obj.get("harness") {
        None | Some(Value::Null) => false,
        Some(Value::Bool(b)) => *b,
        Some(_) => return Err("harness must be a boolean".into()),
    };
    opts.seed = match obj.get("seed") {
        None | Some(Value::Null) => None,
        Some(v) => Some(v.as_u64().ok_or("seed must be a non-negative integer")?),
    };
    Ok(opts)
}

/// Opens a session from a JSON options object:
///
/// ```text
/// {"rootFile": "...", "corpus": "...", "skills": ["..."], "auditPath": "...",
///  "broker": "deny-all", "policy": "...", "profile": "strict",
///  "harness": false, "seed": 7, "clearance": "0::"}
/// ```
///
/// Only `rootFile` and `corpus` are required. Skills that fail to load are
/// left out and reported by [`sg_session_rejected`].
///
/// # Safety
/// `options_json` must be a valid C string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_session_open(options_json: *const c_char, out: *mut *mut SgSession) -> SgStatus {
    guard(|| {
        if out.is_null() {
            return fail(SgStatus::InvalidArgument, "out is null");
        }
        let text = match arg_str(options_json, "options_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let value: Value = match serde_json::from_str(text) {
            Ok(v) => v,
            Err(e) => return fail(SgStatus::Parse, format!("options: {e}")),
        };
        let opts = match options_from_json(&value) {
            Ok(o) => o,
            Err(e) => return fail(SgStatus::InvalidArgument, e),
        };
        match open_session(&opts, RunHooks::default()) {
            Ok(opened) => {
                *out = Box::into_raw(Box::new(SgSession {
                    session: opened.session,
                    rejected: opened.rejected,
                }));
                SgStatus::Ok
            }
            Err(e) => fail(config_status(&e), e.to_string()),
        }
    })
}

/// # Safety
/// `session` must be null or a handle from [`sg_session_open`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sg_session_free(session: *mut SgSession) {
    if !session.is_null() {
        let _ = catch_unwind(AssertUnwindSafe(|| {
            let h = Box::from_raw(session);
            h.session.close();
        }));
    }
}

unsafe fn with_session(session: *mut SgSession, f: impl FnOnce(&mut SgSession) -> SgStatus) -> SgStatus {
    guard(|| match session.as_mut() {
        Some(h) => f(h),
        None => fail(SgStatus::InvalidArgument, "session is null"),
    })
}

/// Skills refused at open, as a JSON array of `{"path", "error"}`.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_session_rejected(session: *mut SgSession, out: *mut *mut c_char) -> SgStatus {
    with_session(session, |h| {
        if out.is_null() {
            return fail(SgStatus::InvalidArgument, "out is null");
        }
        let list: Vec<Value> = h
            .rejected
            .iter()
            .map(|(p, e)| json!({"path": p.display().to_string(), "error": e}))
            .collect();
        put_string(out, Value::Array(list).to_string())
    })
}

/// Sends one request envelope through the gate. `out` receives
/// `{"requestId", "outcome", "detail"}`.
///
/// # Safety
/// `session` must be a live handle, `envelope_json` a valid C string and
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_session_dispatch(
    session: *mut SgSession,
    envelope_json: *const c_char,
    out: *mut *mut c_char,
) -> SgStatus {
    with_session(session, |h| {
        if out.is_null() {
            return fail(SgStatus::InvalidArgument, "out is null");
        }
        let text = match arg_str(envelope_json, "envelope_json") {
            Ok(t) => t,
            Err(s) => return s,
        };
        let env = match RequestEnvelope::parse(text.as_bytes()) {
            Ok(e) => e,
            Err(e) => return fail(SgStatus::Parse, e.to_string()),
        };
        match h.session.dispatch(env) {
            Ok(d) => put_string(out, outcome_json(&d.request_id.to_hex(), &d.outcome).to_string()),
            Err(e) => fail(session_status(&e), e.to_string()),
        }
    })
}

/// Applies staged reversible writes. `applied` may be null.
///
/// # Safety
/// `session` must be a live handle; `applied` null or valid.
#[no_mangle]
pub unsafe extern "C" fn sg_session_commit(session: *mut SgSession, applied: *mut usize) -> SgStatus {
    with_session(session, |h| match h.session.commit() {
        Ok(n) => {
            if !applied.is_null() {
                *applied = n;
            }
            SgStatus::Ok
        }
        Err(e) => fail(session_status(&e), e.to_string()),
    })
}

/// Discards staged reversible writes. `discarded` may be null.
///
/// # Safety
/// `session` must be a live handle; `discarded` null or valid.
#[no_mangle]
pub unsafe extern "C" fn sg_session_rollback(session: *mut SgSession, discarded: *mut usize) -> SgStatus {
    with_session(session, |h| match h.session.rollback() {
        Ok(n) => {
            if !discarded.is_null() {
                *discarded = n;
            }
            SgStatus::Ok
        }
        Err(e) => fail(session_status(&e), e.to_string()),
    })
}

/// Closes the round. `out` receives `{"verdict": "pass"|"abort"|"not-checked", ...}`.
/// An abort verdict still returns `SG_STATUS_OK`; later calls return `SG_STATUS_ABORTED`.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_session_end_round(session: *mut SgSession, out: *mut *mut c_char) -> SgStatus {
    with_session(session, |h| {
        if out.is_null() {
            return fail(SgStatus::InvalidArgument, "out is null");
        }
        match h.session.end_round() {
            Ok(v) => put_string(out, verdict_json(&v).to_string()),
            Err(e) => fail(session_status(&e), e.to_string()),
        }
    })
}

/// The session's audit log as JSONL. Readable after an abort.
///
/// # Safety
/// `session` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_session_audit_jsonl(session: *mut SgSession, out: *mut *mut c_char) -> SgStatus {
    with_session(session, |h| {
        if out.is_null() {
            return fail(SgStatus::InvalidArgument, "out is null");
        }
        put_string(out, h.session.audit().to_jsonl())
    })
}

/// Verifies a JSONL audit log. `broken_at` gets -1 for an intact chain, or
/// the 0-indexed first bad record.
///
/// # Safety
/// `jsonl` must be a valid C string and `broken_at` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn sg_audit_verify_text(jsonl: *const c_char, broken_at: *mut i64) -> SgStatus {
    guard(|| {
        if broken_at.is_null() {
            return fail(SgStatus::InvalidArgument, "broken_at is null");
        }
        let text = match arg_str(jsonl, "jsonl") {
            Ok(t) => t,
            Err(s) => return s,
        };
        *broken_at = match verify_text(text) {
            ChainVerdict::Ok => -1,
            ChainVerdict::BrokenAt(k) => i64::try_from(k).unwrap_or(i64::MAX),
        };
        SgStatus::Ok
    })
}

/// 95% Wilson score interval for `k` successes in `n` trials, rounded to
/// three decimals.
///
/// # Safety
/// `lo` and `hi` must be valid pointers.
#[no_mangle]
pub unsafe extern "C" fn sg_wilson_ci(k: u64, n: u64, lo: *mut f64, hi: *mut f64) -> SgStatus {
    guard(|| {
        if lo.is_null() || hi.is_null() {
            return fail(SgStatus::InvalidArgument, "lo or hi is null");
        }
        match wilson_ci(k, n) {
            Ok((a, b)) => {
                *lo = a;
                *hi = b;
                SgStatus::Ok
            }
            Err(e) => fail(SgStatus::InvalidArgument, e.to_string()),
        }
    })
}
