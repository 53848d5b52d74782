//! Bootstrap and the gated agent session.
//!
//! A [`Bootstrap`] exists only against a locked trust root. Skills load into
//! it; [`Bootstrap::start`] freezes the loaded set and returns a [`Session`],
//! through which every agent tool call is dispatched.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{Map, Value};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, RecordType};
use crate::bicond::{self, BicondReport, Checkpoint};
use crate::canonical::uint;
use crate::capability::Capability;
use crate::gate::{
    apply_write, classify, route_for, Broker, BrokerDecision, BrokerRequest, BufferError, Class, Decision, FsWrite,
    Host, HostError, RequestEnvelope, Reversibility, Route, ToolRegistry, TransactionBuffer, ID_DENY_BY_DEFAULT,
    ID_MANIFEST_DECLARED,
};
use crate::hash::{Digest, RequestId};
use crate::lattice::Label;
use crate::skillpkg::{
    self, load_skill, package, LoadContext, LoadError, LoadedSkill, PackageError, ReplayGuard, SkillArtifact,
    VerificationLevel,
};
use crate::trustroot::TrustRoot;

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("UnlockedTrustRootError: a session starts only against a locked trust root")]
    UnlockedRoot,
    #[error(transparent)]
    Load(#[from] LoadError),
    #[error("skill package: {0}")]
    Package(#[from] PackageError),
    #[error("corpus root {path}: {message}")]
    FsRoot { path: String, message: String },
    #[error("session aborted: {0}")]
    Aborted(String),
}

/// Bootstrap phase. Nothing external has been read yet.
pub struct Bootstrap {
    root: TrustRoot,
    audit: AuditLog,
    operator_clearance: Label,
    max_rank: u32,
    replay: ReplayGuard,
    skills: BTreeMap<String, LoadedSkill>,
    tools: ToolRegistry,
}

impl Bootstrap {
    pub fn new(
        root: TrustRoot,
        audit: AuditLog,
        operator_clearance: Label,
        max_rank: u32,
    ) -> Result<Bootstrap, SessionError> {
        if !root.is_locked() {
            return Err(SessionError::UnlockedRoot);
        }
        Ok(Bootstrap {
            root,
            audit,
            operator_clearance,
            max_rank,
            replay: ReplayGuard::new(),
            skills: BTreeMap::new(),
            tools: ToolRegistry::default(),
        })
    }

    /// Carries version high-water marks over from earlier sessions.
    pub fn with_replay_guard(mut self, guard: ReplayGuard) -> Bootstrap {
        self.replay = guard;
        self
    }

    pub fn load(&mut self, artifact: SkillArtifact, install_dir: Option<PathBuf>) -> Result<&LoadedSkill, LoadError> {
        let ctx = LoadContext {
            root: &self.root,
            operator_clearance: &self.operator_clearance,
            max_rank: self.max_rank,
            audit: &self.audit,
        };
        let skill = load_skill(&ctx, artifact, install_dir, &mut self.replay)?;
        let id = skill.skill_id().to_string();
        self.skills.insert(id.clone(), skill);
        Ok(&self.skills[&id])
    }

    /// Loads a package directory. A package that cannot be read is rejected
    /// and recorded like any other failed load.
    pub fn load_dir(&mut self, dir: &Path) -> Result<&LoadedSkill, SessionError> {
        let artifact = match package::read_package(dir) {
            Ok(a) => a,
            Err(e) => {
                let mut p = Map::new();
                p.insert("step".into(), Value::Null);
                p.insert("error".into(), Value::String("PackageError".into()));
                p.insert("message".into(), Value::String(e.to_string()));
                self.audit
                    .append(RecordType::SkillLoadReject, None, p)
                    .map_err(|a| SessionError::Aborted(a.to_string()))?;
                return Err(e.into());
            }
        };
        let dir = dir.canonicalize().unwrap_or_else(|_| dir.to_path_buf());
        Ok(self.load(artifact, Some(dir))?)
    }

    pub fn register_tool(&mut self, name: impl Into<String>, tag: Option<Reversibility>) {
        self.tools.register(name, tag);
    }

    pub fn skills(&self) -> impl Iterator<Item = &LoadedSkill> {
        self.skills.values()
    }

    pub fn replay_guard(&self) -> &ReplayGuard {
        &self.replay
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Freezes the loaded set and opens the session.
    pub fn start(self, cfg: SessionConfig) -> Result<Session, SessionError> {
        let fs_root = cfg.fs_root.canonicalize().map_err(|e| SessionError::FsRoot {
            path: cfg.fs_root.display().to_string(),
            message: e.to_string(),
        })?;
        if !fs_root.is_dir() {
            return Err(SessionError::FsRoot {
                path: fs_root.display().to_string(),
                message: "not a directory".into(),
            });
        }
        let rng = match cfg.seed {
            Some(seed) => ChaCha20Rng::seed_from_u64(seed),
            None => ChaCha20Rng::from_entropy(),
        };
        let watch_rounds = self
            .skills
            .values()
            .any(|s| s.effective_level() >= VerificationLevel::Tested);
        let mut session = Session {
            audit: self.audit,
            skills: Arc::new(self.skills),
            tools: self.tools,
            fs_root,
            broker: cfg.broker,
            host: cfg.host,
            buffer: TransactionBuffer::new(),
            rng,
            used_ids: HashSet::new(),
            aborted: None,
            reverify: BTreeSet::new(),
            round: 0,
            round_active: BTreeSet::new(),
            checkpoint: None,
        };
        if watch_rounds {
            session.checkpoint = Some(session.take_checkpoint()?);
        }
        Ok(session)
    }
}

pub struct SessionConfig {
    pub fs_root: PathBuf,
    pub broker: Box<dyn Broker>,
    pub host: Box<dyn Host>,
    /// Seed for request ids. `None` draws from the operating system.
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// Non-mutating read; the bytes read.
    Read(Vec<u8>),
    /// Reversible write held in the transaction buffer.
    Staged,
    /// Approved and performed. Carries the host result for non-fs calls.
    Executed(Value),
    /// Broker said no.
    Denied { broker_id: String },
    /// Approved, but the host failed.
    HostError(String),
    /// Refused before any broker was consulted.
    Rejected(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dispatched {
    pub request_id: RequestId,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RoundVerdict {
    /// No tested or formal skill was active; nothing to check.
    NotChecked,
    Pass,
    Abort(Box<BicondReport>),
}

struct Resolved {
    path: PathBuf,
    skill: Option<String>,
}

/// Parsed intent of an irreversible or skill-mutating call.
enum Action {
    Fs(FsWrite),
    Invoke,
}

pub struct Session {
    audit: AuditLog,
    skills: Arc<BTreeMap<String, LoadedSkill>>,
    tools: ToolRegistry,
    fs_root: PathBuf,
    broker: Box<dyn Broker>,
    host: Box<dyn Host>,
    buffer: TransactionBuffer,
    rng: ChaCha20Rng,
    used_ids: HashSet<RequestId>,
    aborted: Option<String>,
    reverify: BTreeSet<String>,
    round: u64,
    round_active: BTreeSet<String>,
    checkpoint: Option<Checkpoint>,
}

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

impl Session {
    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    pub fn fs_root(&self) -> &Path {
        &self.fs_root
    }

    pub fn skill(&self, id: &str) -> Option<&LoadedSkill> {
        self.skills.get(id)
    }

    pub fn skills(&self) -> impl Iterator<Item = &LoadedSkill> {
        self.skills.values()
    }

    pub fn is_aborted(&self) -> Option<&str> {
        self.aborted.as_deref()
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Skills whose on-disk artifact changed during this session and must be
    /// re-verified before the next one.
    pub fn needs_reverification(&self) -> &BTreeSet<String> {
        &self.reverify
    }

    pub fn buffer(&self) -> &TransactionBuffer {
        &self.buffer
    }

    fn fresh_id(&mut self) -> RequestId {
        loop {
            let mut b = [0u8; 16];
            self.rng.fill_bytes(&mut b);
            let id = RequestId(b);
            if self.used_ids.insert(id) {
                return id;
            }
        }
    }

    fn ensure_live(&self) -> Result<(), SessionError> {
        match &self.aborted {
            Some(r) => Err(SessionError::Aborted(r.clone())),
            None => Ok(()),
        }
    }

    /// Marks the session dead after an audit failure and tries to record why.
    fn fail(&mut self, err: AuditError) -> SessionError {
        let reason = format!("audit append failed: {err}");
        self.abort(&reason, Map::new());
        SessionError::Aborted(reason)
    }

    fn abort(&mut self, reason: &str, mut extra: Map<String, Value>) {
        if self.aborted.is_none() {
            self.aborted = Some(reason.to_string());
        }
        extra.insert("reason".into(), s(reason));
        extra.insert("round".into(), uint(self.round));
        if let Err(e) = self.audit.append(RecordType::SessionAbort, None, extra) {
            log::error!("could not record session.abort: {e}");
        }
    }

    fn record(&mut self, ty: RecordType, id: RequestId, payload: Map<String, Value>) -> Result<(), SessionError> {
        match self.audit.append_unchecked(ty, Some(id), payload) {
            Ok(_) => Ok(()),
            Err(e) => Err(self.fail(e)),
        }
    }

    /// Dispatches one agent tool call. Gate outcomes, including denials and
    /// host failures, are `Ok`; `Err` means the session can no longer run.
    pub fn dispatch(&mut self, env: RequestEnvelope) -> Result<Dispatched, SessionError> {
        self.ensure_live()?;
        let request_id = match env.request_id {
            Some(id) if self.used_ids.insert(id) => id,
            Some(_) => {
                let id = self.fresh_id();
                return self.deny_by_default(&env, id, "request id already used in this session");
            }
            None => self.fresh_id(),
        };
        let Some(skill) = self.skills.get(&env.origin_skill_id).cloned() else {
            return self.deny_by_default(&env, request_id, "origin skill is not loaded");
        };
        let Some(target) = env.target().map(str::to_string) else {
            return self.deny_by_default(&env, request_id, "envelope has no target");
        };
        let (cap, class) = match classify(&env.op, Some(&target), &self.tools) {
            Ok(c) => c,
            Err(e) => return self.deny_by_default(&env, request_id, &e.to_string()),
        };
        self.round_active.insert(skill.skill_id().to_string());

        let resolved = if cap.is_fs() {
            match self.resolve(&target) {
                Ok(r) => Some(r),
                Err(reason) => return self.deny_by_default(&env, request_id, &reason),
            }
        } else {
            None
        };

        if let Some(r) = &resolved {
            if cap.is_fs_write() {
                if let Some(owner) = r.skill.clone() {
                    return self.intercept_mutation(&env, request_id, &skill, cap, &target, r.path.clone(), &owner);
                }
            }
        }

        let declared = skill.registered_caps().iter().any(|c| c.covers(cap, &target));
        match class {
            Class::NonMutating => {
                if !declared {
                    return self.deny_by_default(&env, request_id, "capability not declared by the origin skill");
                }
                let path = resolved.expect("fs op resolved").path;
                self.read(&env, request_id, &target, &path)
            }
            Class::Reversible if cap == Capability::FsWriteRev => {
                if !declared {
                    return self.deny_by_default(&env, request_id, "capability not declared by the origin skill");
                }
                let Some(content) = env.arg_str("content") else {
                    return self.deny_by_default(&env, request_id, "fs.write.rev requires string arg content");
                };
                let path = resolved.expect("fs op resolved").path;
                match self.buffer.write(
                    self.host.as_mut(),
                    &target,
                    &path,
                    content.as_bytes().to_vec(),
                    request_id,
                    skill.skill_id(),
                ) {
                    Ok(()) => Ok(Dispatched {
                        request_id,
                        outcome: Outcome::Staged,
                    }),
                    Err(e) => Ok(Dispatched {
                        request_id,
                        outcome: Outcome::HostError(e.to_string()),
                    }),
                }
            }
            Class::Reversible => {
                if !declared {
                    return self.deny_by_default(&env, request_id, "capability not declared by the origin skill");
                }
                let result = self.host.invoke(cap, &target, &env.args);
                let mut p = Map::new();
                p.insert("op".into(), s(cap.token()));
                p.insert("target".into(), s(&target));
                p.insert("effect".into(), s("tool"));
                p.insert("originSkillId".into(), s(skill.skill_id()));
                p.insert("ok".into(), Value::Bool(result.is_ok()));
                if let Err(e) = &result {
                    p.insert("error".into(), s(&e.0));
                }
                self.record(RecordType::ReversibleExecuted, request_id, p)?;
                Ok(Dispatched {
                    request_id,
                    outcome: match result {
                        Ok(v) => Outcome::Executed(v),
                        Err(e) => Outcome::HostError(e.0),
                    },
                })
            }
            Class::Irreversible => {
                let action = match self.parse_action(&env, cap) {
                    Ok(a) => a,
                    Err(reason) => return self.deny_by_default(&env, request_id, &reason),
                };
                let route = route_for(skill.effective_level(), cap, &target, skill.registered_caps());
                self.lifecycle(
                    &env,
                    request_id,
                    &skill,
                    cap,
                    &target,
                    resolved.map(|r| r.path),
                    action,
                    route,
                )
            }
        }
    }

    fn read(
        &mut self,
        env: &RequestEnvelope,
        id: RequestId,
        target: &str,
        path: &Path,
    ) -> Result<Dispatched, SessionError> {
        let bytes = match self.buffer.read(path) {
            Some(b) => Ok(Some(b.to_vec())),
            None => self.host.read(path),
        };
        let mut p = Map::new();
        p.insert("op".into(), s(Capability::FsRead.token()));
        p.insert("target".into(), s(target));
        p.insert("effect".into(), s("none"));
        p.insert("originSkillId".into(), s(&env.origin_skill_id));
        let outcome = match bytes {
            Ok(Some(b)) => {
                p.insert("ok".into(), Value::Bool(true));
                Outcome::Read(b)
            }
            Ok(None) => {
                p.insert("ok".into(), Value::Bool(false));
                p.insert("error".into(), s("not found"));
                Outcome::HostError("not found".into())
            }
            Err(e) => {
                p.insert("ok".into(), Value::Bool(false));
                p.insert("error".into(), s(&e.0));
                Outcome::HostError(e.0)
            }
        };
        self.record(RecordType::ReversibleExecuted, id, p)?;
        Ok(Dispatched {
            request_id: id,
            outcome,
        })
    }

    fn parse_action(&self, env: &RequestEnvelope, cap: Capability) -> Result<Action, String> {
        match cap {
            Capability::FsWriteRev => env
                .arg_str("content")
                .map(|c| Action::Fs(FsWrite::Overwrite(c.as_bytes().to_vec())))
                .ok_or_else(|| "fs.write.rev requires string arg content".to_string()),
            Capability::FsWriteIrrev => {
                let mode = env.arg_str("mode").ok_or("fs.write.irrev requires arg mode")?;
                let content = || {
                    env.arg_str("content")
                        .map(|c| c.as_bytes().to_vec())
                        .ok_or_else(|| format!("mode {mode} requires string arg content"))
                };
                Ok(Action::Fs(match mode {
                    "delete" => FsWrite::Delete,
                    "truncate" => FsWrite::Truncate,
                    "overwrite" => FsWrite::Overwrite(content()?),
                    "append" => FsWrite::Append(content()?),
                    "merge" => {
                        let src = env.arg_str("source").ok_or("mode merge requires arg source")?;
                        let r = self.resolve(src)?;
                        if r.skill.is_some() {
                            return Err("merge source lies in a skill package".into());
                        }
                        FsWrite::Merge(r.path)
                    }
                    other => return Err(format!("unknown fs.write.irrev mode {other:?}")),
                }))
            }
            _ => Ok(Action::Invoke),
        }
    }

    /// Maps a target to a host path. Relative targets live under the corpus
    /// root; absolute targets are accepted only inside a loaded skill's
    /// package directory. Symbolic links may not lead anywhere else.
    fn resolve(&self, target: &str) -> Result<Resolved, String> {
        let raw = Path::new(target);
        let lexical = if raw.is_absolute() {
            if raw
                .components()
                .any(|c| matches!(c, Component::ParentDir | Component::CurDir))
            {
                return Err("target path must be normalized".into());
            }
            raw.to_path_buf()
        } else {
            if !bicond::is_relative_path(target) {
                return Err("target must be a normalized relative path".into());
            }
            self.fs_root.join(raw)
        };
        let effective = real_path(&lexical).map_err(|e| format!("cannot resolve target: {e}"))?;
        for skill in self.skills.values() {
            if let Some(dir) = skill.install_dir() {
                if effective.starts_with(dir) {
                    return Ok(Resolved {
                        path: effective,
                        skill: Some(skill.skill_id().to_string()),
                    });
                }
            }
        }
        if !raw.is_absolute() && effective.starts_with(&self.fs_root) && effective != self.fs_root {
            return Ok(Resolved {
                path: effective,
                skill: None,
            });
        }
        Err("target lies outside the corpus root".into())
    }

    fn deny_by_default(
        &mut self,
        env: &RequestEnvelope,
        id: RequestId,
        reason: &str,
    ) -> Result<Dispatched, SessionError> {
        let target = env.target().unwrap_or("");
        let mut p = Map::new();
        p.insert("op".into(), s(&env.op));
        p.insert("target".into(), s(target));
        p.insert("reasoning".into(), s(&env.reasoning));
        p.insert("originSkillId".into(), s(&env.origin_skill_id));
        p.insert("route".into(), s(ID_DENY_BY_DEFAULT));
        self.record(RecordType::IrreversibleRequest, id, p)?;
        let mut p = Map::new();
        p.insert("op".into(), s(&env.op));
        p.insert("target".into(), s(target));
        p.insert("decision".into(), s(Decision::Deny.as_str()));
        p.insert("brokerId".into(), s(ID_DENY_BY_DEFAULT));
        p.insert("reason".into(), s(reason));
        self.record(RecordType::IrreversibleDecision, id, p)?;
        Ok(Dispatched {
            request_id: id,
            outcome: Outcome::Rejected(reason.to_string()),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn request_record(
        &mut self,
        env: &RequestEnvelope,
        id: RequestId,
        skill: &LoadedSkill,
        cap: Capability,
        target: &str,
        route: Route,
        action: &Action,
    ) -> Result<(), SessionError> {
        let mut p = Map::new();
        p.insert("op".into(), s(cap.token()));
        p.insert("target".into(), s(target));
        p.insert("reasoning".into(), s(&env.reasoning));
        p.insert("originSkillId".into(), s(skill.skill_id()));
        p.insert("level".into(), s(skill.effective_level().as_str()));
        p.insert("route".into(), s(route.as_str()));
        if let Action::Fs(w) = action {
            p.insert("mode".into(), s(w.mode()));
        }
        self.record(RecordType::IrreversibleRequest, id, p)
    }

    fn decision_record(
        &mut self,
        id: RequestId,
        cap: Capability,
        target: &str,
        d: &BrokerDecision,
    ) -> Result<(), SessionError> {
        let mut p = Map::new();
        p.insert("op".into(), s(cap.token()));
        p.insert("target".into(), s(target));
        p.insert("decision".into(), s(d.decision.as_str()));
        p.insert("brokerId".into(), s(&d.broker_id));
        self.record(RecordType::IrreversibleDecision, id, p)
    }

    fn broker_request(
        &self,
        env: &RequestEnvelope,
        id: RequestId,
        skill: &LoadedSkill,
        cap: Capability,
        target: &str,
    ) -> BrokerRequest {
        BrokerRequest {
            request_id: id,
            op: cap.token().to_string(),
            target: target.to_string(),
            reasoning: env.reasoning.clone(),
            origin_skill_id: skill.skill_id().to_string(),
            level: skill.effective_level(),
        }
    }

    fn execute(
        &mut self,
        id: RequestId,
        cap: Capability,
        target: &str,
        path: Option<PathBuf>,
        action: &Action,
        args: &Map<String, Value>,
    ) -> Result<Outcome, SessionError> {
        let result = match (action, path) {
            (Action::Fs(w), Some(path)) => self.host.write(&path, w).map(|_| Value::Null),
            (Action::Fs(_), None) => Err(HostError("filesystem call without a resolved path".into())),
            (Action::Invoke, _) => self.host.invoke(cap, target, args),
        };
        let mut p = Map::new();
        p.insert("op".into(), s(cap.token()));
        p.insert("target".into(), s(target));
        match result {
            Ok(v) => {
                p.insert("ok".into(), Value::Bool(true));
                if let Action::Fs(w) = action {
                    p.insert("mode".into(), s(w.mode()));
                }
                self.record(RecordType::IrreversibleExecuted, id, p)?;
                Ok(Outcome::Executed(v))
            }
            Err(e) => {
                p.insert("error".into(), s(&e.0));
                self.record(RecordType::IrreversibleError, id, p)?;
                Ok(Outcome::HostError(e.0))
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn lifecycle(
        &mut self,
        env: &RequestEnvelope,
        id: RequestId,
        skill: &LoadedSkill,
        cap: Capability,
        target: &str,
        path: Option<PathBuf>,
        action: Action,
        route: Route,
    ) -> Result<Dispatched, SessionError> {
        self.request_record(env, id, skill, cap, target, route, &action)?;
        let decision = match route {
            Route::AutoApprove => BrokerDecision::new(Decision::Approve, ID_MANIFEST_DECLARED),
            _ => {
                let req = self.broker_request(env, id, skill, cap, target);
                self.broker.decide(&req)
            }
        };
        self.decision_record(id, cap, target, &decision)?;
        let outcome = match decision.decision {
            Decision::Deny => Outcome::Denied {
                broker_id: decision.broker_id,
            },
            Decision::Approve => self.execute(id, cap, target, path, &action, &env.args)?,
        };
        Ok(Dispatched {
            request_id: id,
            outcome,
        })
    }

    /// A write aimed at a loaded skill's package. Always irreversible, always
    /// put to the broker, always recorded with before and proposed hashes.
    /// The in-memory skill never changes.
    #[allow(clippy::too_many_arguments)]
    fn intercept_mutation(
        &mut self,
        env: &RequestEnvelope,
        id: RequestId,
        origin: &LoadedSkill,
        cap: Capability,
        target: &str,
        path: PathBuf,
        owner: &str,
    ) -> Result<Dispatched, SessionError> {
        let owner_skill = self.skills[owner].clone();
        let dir = owner_skill
            .install_dir()
            .expect("intercepted skills have a package dir")
            .to_path_buf();
        let pre = skillpkg::artifact_hash(&dir).ok();
        let action = self.parse_action(env, cap);
        let post = action.as_ref().ok().and_then(|a| match a {
            Action::Fs(w) => proposed_hash(&dir, &path, w),
            Action::Invoke => None,
        });
        let (decision, action) = match action {
            Ok(a) => {
                self.request_record(env, id, origin, cap, target, Route::ConsultBroker, &a)?;
                let req = self.broker_request(env, id, origin, cap, target);
                (self.broker.decide(&req), Some(a))
            }
            Err(reason) => {
                let mut p = Map::new();
                p.insert("op".into(), s(cap.token()));
                p.insert("target".into(), s(target));
                p.insert("reasoning".into(), s(&env.reasoning));
                p.insert("originSkillId".into(), s(origin.skill_id()));
                p.insert("route".into(), s(ID_DENY_BY_DEFAULT));
                p.insert("reason".into(), s(&reason));
                self.record(RecordType::IrreversibleRequest, id, p)?;
                (BrokerDecision::new(Decision::Deny, ID_DENY_BY_DEFAULT), None)
            }
        };
        self.decision_record(id, cap, target, &decision)?;
        let hash = |d: Option<Digest>| d.map(|d| s(&d.to_hex())).unwrap_or(Value::Null);
        let mut p = Map::new();
        p.insert("skillId".into(), s(owner));
        p.insert("op".into(), s(cap.token()));
        p.insert("target".into(), s(target));
        p.insert("preHash".into(), hash(pre));
        p.insert("postHash".into(), hash(post));
        p.insert("decision".into(), s(decision.decision.as_str()));
        p.insert("brokerId".into(), s(&decision.broker_id));
        self.record(RecordType::SkillMutationAttempt, id, p)?;
        let outcome = match (decision.decision, action) {
            (Decision::Approve, Some(a)) => {
                let out = self.execute(id, cap, target, Some(path), &a, &env.args)?;
                if matches!(out, Outcome::Executed(_)) {
                    self.reverify.insert(owner.to_string());
                }
                out
            }
            (Decision::Approve, None) => unreachable!("a malformed mutation is never approved"),
            (Decision::Deny, _) => Outcome::Denied {
                broker_id: decision.broker_id,
            },
        };
        Ok(Dispatched {
            request_id: id,
            outcome,
        })
    }

    /// Applies and audits every staged reversible write.
    pub fn commit(&mut self) -> Result<usize, SessionError> {
        self.ensure_live()?;
        let mut buf = std::mem::take(&mut self.buffer);
        match buf.commit(self.host.as_mut(), &self.audit) {
            Ok(n) => Ok(n),
            Err(BufferError::Audit(e)) => Err(self.fail(e)),
            Err(e) => {
                log::warn!("{e}");
                Ok(0)
            }
        }
    }

    /// Drops every staged reversible write.
    pub fn rollback(&mut self) -> Result<usize, SessionError> {
        self.ensure_live()?;
        let mut buf = std::mem::take(&mut self.buffer);
        Ok(buf.rollback().unwrap_or(0))
    }

    fn take_checkpoint(&self) -> Result<Checkpoint, SessionError> {
        let snapshot = bicond::snapshot(&self.fs_root).map_err(|e| SessionError::FsRoot {
            path: self.fs_root.display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Checkpoint {
            snapshot,
            log_len: self.audit.len(),
        })
    }

    /// Closes a round: commits the buffer, then, when a tested or formal
    /// skill issued calls this round, checks the round's corpus delta against
    /// its executed records and aborts the session on a mismatch.
    pub fn end_round(&mut self) -> Result<RoundVerdict, SessionError> {
        self.ensure_live()?;
        if !self.buffer.staged().is_empty() {
            self.commit()?;
        }
        let checked = self.round_active.iter().any(|id| {
            self.skills
                .get(id)
                .is_some_and(|s| s.effective_level() >= VerificationLevel::Tested)
        });
        self.round_active.clear();
        let verdict = match self.checkpoint.take() {
            Some(prev) => {
                let next = self.take_checkpoint()?;
                let records = self.audit.records();
                let verdict = if checked {
                    match bicond::check_rounds(&[prev, next.clone()], &records) {
                        Ok(r) if r.verdict.pass => RoundVerdict::Pass,
                        Ok(r) => RoundVerdict::Abort(Box::new(r)),
                        Err(e) => {
                            let reason = format!("round check could not run: {e}");
                            self.abort(&reason, Map::new());
                            return Err(SessionError::Aborted(reason));
                        }
                    }
                } else {
                    RoundVerdict::NotChecked
                };
                self.checkpoint = Some(Checkpoint {
                    log_len: self.audit.len(),
                    ..next
                });
                verdict
            }
            None => RoundVerdict::NotChecked,
        };
        if let RoundVerdict::Abort(report) = &verdict {
            let mut p = Map::new();
            p.insert(
                "unexplained".into(),
                Value::Array(
                    report
                        .verdict
                        .unexplained_changes
                        .iter()
                        .map(|d| s(&d.target))
                        .collect(),
                ),
            );
            p.insert(
                "unmatched".into(),
                Value::Array(
                    report
                        .verdict
                        .unmatched_executions
                        .iter()
                        .map(|e| s(&e.target))
                        .collect(),
                ),
            );
            self.abort("biconditional check failed", p);
            if let Some(c) = self.checkpoint.as_mut() {
                c.log_len = self.audit.len();
            }
        }
        self.round += 1;
        Ok(verdict)
    }

    /// Ends the session, discarding uncommitted reversible writes.
    pub fn close(mut self) -> SessionSummary {
        let discarded = self.buffer.staged().len();
        let _ = self.buffer.rollback();
        SessionSummary {
            aborted: self.aborted,
            reverify: self.reverify,
            discarded_writes: discarded,
            rounds: self.round,
        }
    }

    /// A request id drawn from the session generator, for callers that build
    /// envelopes themselves.
    pub fn next_request_id(&mut self) -> RequestId {
        let mut b = [0u8; 16];
        self.rng.fill(&mut b);
        RequestId(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionSummary {
    pub aborted: Option<String>,
    pub reverify: BTreeSet<String>,
    pub discarded_writes: usize,
    pub rounds: u64,
}

/// Canonical form of `p` with symbolic links resolved: the longest existing
/// prefix is canonicalized and the rest appended.
fn real_path(p: &Path) -> std::io::Result<PathBuf> {
    let mut existing = p.to_path_buf();
    let mut rest = Vec::new();
    loop {
        match existing.canonicalize() {
            Ok(c) => {
                let mut out = c;
                for part in rest.iter().rev() {
                    out.push(part);
                }
                return Ok(out);
            }
            Err(e) => {
                let Some(name) = existing.file_name().map(|n| n.to_os_string()) else {
                    return Err(e);
                };
                rest.push(name);
                if !existing.pop() {
                    return Err(e);
                }
            }
        }
    }
}

/// Archive hash of a package directory as it would be after `w` lands on `path`.
fn proposed_hash(dir: &Path, path: &Path, w: &FsWrite) -> Option<Digest> {
    let mut members = package::read_members(dir, true).ok()?;
    let rel = path
        .strip_prefix(dir)
        .ok()?
        .to_str()?
        .replace(std::path::MAIN_SEPARATOR, "/");
    let source = match w {
        FsWrite::Merge(src) => std::fs::read(src).ok(),
        _ => None,
    };
    match apply_write(members.get(&rel).map(Vec::as_slice), w, source.as_deref()).ok()? {
        Some(bytes) => {
            members.insert(rel, bytes);
        }
        None => {
            members.remove(&rel);
        }
    }
    Some(Digest::of(&package::encode_archive(&members)))
}
