//! Operator configuration: profiles, run options and the session driver
//! shared by the CLI and the approval service.
//!
//! Every option here picks *who* decides or *where* things live. None of
//! them can switch off classification, the lifecycle records or the chain.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, AuditMode};
use crate::gate::{
    AllowAll, Broker, BrokerKind, DenyAll, InteractiveBroker, PendingQueue, PolicyBroker, Prompter, RequestEnvelope,
    Reversibility, SystemHost, TerminalPrompter, WebhookBroker, DEFAULT_TIMEOUT,
};
use crate::lattice::{Label, DEFAULT_MAX_RANK};
use crate::runtime::{Bootstrap, Outcome, RoundVerdict, Session, SessionConfig, SessionError, SessionSummary};
use crate::skillpkg::ReplayGuard;
use crate::trustroot::{TrustRootError, TrustRootFile};

pub const PROFILE_ENV: &str = "SKILLGATE_PROFILE";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Deny-all default broker; the trust root file must already be locked.
    Strict,
    /// Interactive default broker, verbose logs; an unlocked root file is
    /// locked in memory at startup.
    Dev,
}

impl Profile {
    pub const ALL: [Profile; 2] = [Profile::Strict, Profile::Dev];

    /// Unset or empty means strict. Anything else unrecognized is an error.
    pub fn parse(value: Option<&str>) -> Result<Profile, ConfigError> {
        match value.map(str::trim) {
            None | Some("") | Some("strict") => Ok(Profile::Strict),
            Some("dev") => Ok(Profile::Dev),
            Some(other) => Err(ConfigError::Profile(other.to_string())),
        }
    }

    pub fn from_env() -> Result<Profile, ConfigError> {
        Profile::parse(std::env::var(PROFILE_ENV).ok().as_deref())
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Profile::Strict => "strict",
            Profile::Dev => "dev",
        }
    }

    pub fn default_broker(self) -> BrokerKind {
        match self {
            Profile::Strict => BrokerKind::DenyAll,
            Profile::Dev => BrokerKind::Interactive,
        }
    }

    pub fn verbose(self) -> bool {
        self == Profile::Dev
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{PROFILE_ENV} must be \"strict\" or \"dev\", got {0:?}")]
    Profile(String),
    #[error("strict profile: trust root {0} is not marked locked; run `skillgate root lock` first")]
    RootNotLocked(PathBuf),
    #[error(transparent)]
    TrustRoot(#[from] TrustRootError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub profile: Profile,
    pub root_file: PathBuf,
    pub skills: Vec<PathBuf>,
    pub corpus: PathBuf,
    /// JSONL log file; opened and continued when it exists. `None` keeps the
    /// log in memory.
    pub audit_path: Option<PathBuf>,
    /// `None` takes the profile default.
    pub broker: Option<BrokerKind>,
    pub policy: Option<PathBuf>,
    pub timeout: Duration,
    pub operator_clearance: Label,
    pub max_rank: u32,
    pub tools: Vec<(String, Option<Reversibility>)>,
    pub seed: Option<u64>,
    /// Deterministic records without wall-clock timestamps.
    pub harness: bool,
    /// Version high-water marks carried across sessions.
    pub replay_state: Option<PathBuf>,
}

impl RunOptions {
    pub fn new(profile: Profile, root_file: PathBuf, corpus: PathBuf) -> RunOptions {
        RunOptions {
            profile,
            root_file,
            skills: Vec::new(),
            corpus,
            audit_path: None,
            broker: None,
            policy: None,
            timeout: DEFAULT_TIMEOUT,
            operator_clearance: Label::public(),
            max_rank: DEFAULT_MAX_RANK,
            tools: Vec::new(),
            seed: None,
            harness: false,
            replay_state: None,
        }
    }

    pub fn broker_kind(&self) -> BrokerKind {
        self.broker.unwrap_or(self.profile.default_broker())
    }
}

/// Decision sources a caller may supply instead of the defaults.
#[derive(Default)]
pub struct RunHooks {
    /// Queue for the webhook broker; a fresh one is created otherwise.
    pub queue: Option<Arc<PendingQueue>>,
    /// Answers for the interactive broker; the terminal otherwise.
    pub prompter: Option<Box<dyn Prompter>>,
}

pub struct Opened {
    pub session: Session,
    /// Set when the webhook broker is in use.
    pub queue: Option<Arc<PendingQueue>>,
    /// Skills that were refused, with the reason.
    pub rejected: Vec<(PathBuf, String)>,
}

fn read_replay(path: &Path) -> Result<ReplayGuard, ConfigError> {
    match std::fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map_err(|e| ConfigError::Invalid(format!("replay state {}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(ReplayGuard::new()),
        Err(e) => Err(e.into()),
    }
}

/// Locks the root, loads skills and starts the session.
pub fn open_session(opts: &RunOptions, hooks: RunHooks) -> Result<Opened, ConfigError> {
    let doc = TrustRootFile::read(&opts.root_file)?;
    if !doc.locked {
        match opts.profile {
            Profile::Strict => return Err(ConfigError::RootNotLocked(opts.root_file.clone())),
            Profile::Dev => log::warn!("dev profile: locking unlocked trust root {}", opts.root_file.display()),
        }
    }
    let mode = if opts.harness {
        AuditMode::Harness
    } else {
        AuditMode::Production
    };
    let audit = match &opts.audit_path {
        Some(p) => AuditLog::open(p, mode)?,
        None => AuditLog::in_memory(mode),
    };
    let mut root = doc.to_trust_root(opts.max_rank)?;
    root.lock(&audit)?;

    let mut boot = Bootstrap::new(root, audit, opts.operator_clearance.clone(), opts.max_rank)?;
    if let Some(p) = &opts.replay_state {
        boot = boot.with_replay_guard(read_replay(p)?);
    }
    for (name, tag) in &opts.tools {
        boot.register_tool(name.clone(), *tag);
    }
    let mut rejected = Vec::new();
    for dir in &opts.skills {
        if let Err(e) = boot.load_dir(dir) {
            if let SessionError::Aborted(_) = e {
                return Err(e.into());
            }
            log::warn!("skill {} rejected: {e}", dir.display());
            rejected.push((dir.clone(), e.to_string()));
        }
    }
    if let Some(p) = &opts.replay_state {
        let text =
            serde_json::to_string_pretty(boot.replay_guard()).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        std::fs::write(p, text)?;
    }

    let mut queue = None;
    let broker: Box<dyn Broker> = match opts.broker_kind() {
        BrokerKind::DenyAll => Box::new(DenyAll),
        BrokerKind::AllowAll => Box::new(AllowAll),
        BrokerKind::Policy => {
            let Some(path) = &opts.policy else {
                return Err(ConfigError::Invalid("the policy broker needs a policy file".into()));
            };
            let mut roots: Vec<&Path> = vec![opts.corpus.as_path()];
            roots.extend(opts.skills.iter().map(PathBuf::as_path));
            Box::new(PolicyBroker::load(path, &roots))
        }
        BrokerKind::Interactive => {
            let prompter = hooks.prompter.unwrap_or_else(|| Box::new(TerminalPrompter::stdin()));
            Box::new(InteractiveBroker::new(prompter, opts.timeout))
        }
        BrokerKind::Webhook => {
            let q = hooks.queue.unwrap_or_default();
            queue = Some(q.clone());
            Box::new(WebhookBroker::new(q, opts.timeout))
        }
    };
    let session = boot.start(SessionConfig {
        fs_root: opts.corpus.clone(),
        broker,
        host: Box::new(SystemHost::new()),
        seed: opts.seed,
    })?;
    Ok(Opened {
        session,
        queue,
        rejected,
    })
}

/// The result line [`drive`] writes for one dispatched envelope.
pub fn outcome_json(request_id: &str, outcome: &Outcome) -> Value {
    let (kind, detail) = match outcome {
        Outcome::Read(b) => ("read", json!(String::from_utf8_lossy(b))),
        Outcome::Staged => ("staged", Value::Null),
        Outcome::Executed(v) => ("executed", v.clone()),
        Outcome::Denied { broker_id } => ("denied", json!(broker_id)),
        Outcome::HostError(e) => ("host-error", json!(e)),
        Outcome::Rejected(r) => ("rejected", json!(r)),
    };
    json!({"requestId": request_id, "outcome": kind, "detail": detail})
}

pub fn verdict_json(verdict: &RoundVerdict) -> Value {
    match verdict {
        RoundVerdict::NotChecked => json!({"control": "end_round", "verdict": "not-checked"}),
        RoundVerdict::Pass => json!({"control": "end_round", "verdict": "pass"}),
        RoundVerdict::Abort(r) => json!({"control": "end_round", "verdict": "abort", "report": r.render()}),
    }
}

/// Feeds a session from JSONL: one envelope per line, or one of the control
/// words `commit`, `rollback`, `end_round`. Blank lines and `#` comments are
/// skipped. One JSON result line is written per input line. Uncommitted
/// reversible writes are discarded at the end.
pub fn drive(
    mut session: Session,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<SessionSummary, ConfigError> {
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let result = match text {
            "commit" => session.commit().map(|n| json!({"control": "commit", "applied": n})),
            "rollback" => session
                .rollback()
                .map(|n| json!({"control": "rollback", "discarded": n})),
            "end_round" => session.end_round().map(|v| verdict_json(&v)),
            _ => match RequestEnvelope::parse(text.as_bytes()) {
                Ok(env) => session
                    .dispatch(env)
                    .map(|d| outcome_json(&d.request_id.to_hex(), &d.outcome)),
                Err(e) => Ok(json!({"line": i + 1, "error": e.to_string()})),
            },
        };
        match result {
            Ok(v) => writeln!(out, "{v}")?,
            Err(SessionError::Aborted(reason)) => {
                writeln!(out, "{}", json!({"aborted": reason}))?;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(session.close())
}

/// [`open_session`] then [`drive`].
pub fn run_session(
    opts: &RunOptions,
    hooks: RunHooks,
    input: &mut dyn BufRead,
    out: &mut dyn Write,
) -> Result<SessionSummary, ConfigError> {
    let opened = open_session(opts, hooks)?;
    drive(opened.session, input, out)
}
