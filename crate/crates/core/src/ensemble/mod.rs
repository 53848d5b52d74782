//! The adversarial-ensemble harness.
//!
//! K scripted agents take R rounds of turns against a generated corpus of N
//! documents, all through the gate. At round `floor(R/2)` one fault is
//! injected, and the run is then checked against the biconditional. A clean
//! run must pass and every faulted run must fail.

mod agents;
mod corpus;
mod shim;
mod stats;
mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{Map, Value};
use thiserror::Error;

pub use agents::{agent_turn, read_turn, Role, WorldView, AUDIT_MARKER, MERGE_LIMIT};
pub use corpus::{generate_corpus, list_files, FAMILIES};
pub use shim::{Armed, FaultShim, FaultSwitch};
pub use stats::{round3, wilson, wilson_ci, DomainError, Z95};
pub use sweep::{sweep, ScenarioStat, SweepCell, SweepReport, SweepSpec};

use crate::audit::{AuditError, AuditLog, AuditMode, RecordType};
use crate::bicond::{self, BicondError, BicondReport, Checkpoint};
use crate::capability::Capability;
use crate::gate::{AllowAll, Broker, BrokerKind, DenyAll, RequestEnvelope};
use crate::hash::RequestId;
use crate::lattice::{Label, DEFAULT_MAX_RANK};
use crate::runtime::{Bootstrap, SessionConfig, SessionError};
use crate::skillpkg::VerificationLevel;
use crate::synth::{self, SkillSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Clean,
    F1,
    F2,
    F3,
    F4,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [Scenario::Clean, Scenario::F1, Scenario::F2, Scenario::F3, Scenario::F4];

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::F1 => "F1",
            Scenario::F2 => "F2",
            Scenario::F3 => "F3",
            Scenario::F4 => "F4",
        }
    }

    pub fn expected_pass(self) -> bool {
        self == Scenario::Clean
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = EnsembleError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| EnsembleError::Config(format!("unknown scenario {s:?}; expected clean, F1, F2, F3 or F4")))
    }
}

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("invalid ensemble config: {0}")]
    Config(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Bicond(#[from] BicondError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Domain(#[from] DomainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnsembleConfig {
    pub n: usize,
    pub k: usize,
    pub r: usize,
    pub seed: u64,
    pub scenario: Scenario,
    /// Only consulted for calls outside a skill's declared caps, which the
    /// scripted agents never make. Allow-all or deny-all.
    pub broker: BrokerKind,
}

impl EnsembleConfig {
    pub fn new(n: usize, k: usize, r: usize, seed: u64, scenario: Scenario) -> EnsembleConfig {
        EnsembleConfig {
            n,
            k,
            r,
            seed,
            scenario,
            broker: BrokerKind::AllowAll,
        }
    }

    pub fn validate(&self) -> Result<(), EnsembleError> {
        if self.n == 0 || self.k == 0 || self.r == 0 {
            return Err(EnsembleError::Config(format!(
                "n, k and r must be positive (got {}, {}, {})",
                self.n, self.k, self.r
            )));
        }
        if !matches!(self.broker, BrokerKind::AllowAll | BrokerKind::DenyAll) {
            return Err(EnsembleError::Config(format!(
                "trials run unattended; broker {} needs a human",
                self.broker.as_str()
            )));
        }
        Ok(())
    }

    /// 0-indexed round at which the fault is injected.
    pub fn fault_round(&self) -> usize {
        self.r / 2
    }
}

#[derive(Debug, Clone)]
pub struct TrialResult {
    pub config: EnsembleConfig,
    pub report: BicondReport,
    pub expected_pass: bool,
    pub agree: bool,
    /// Whether the scenario's fault actually took effect.
    pub injected: bool,
    /// The full audit log as JSONL.
    pub log: String,
}

/// Directory for trial scratch space: tmpfs when available.
pub fn scratch_root() -> PathBuf {
    static ROOT: OnceLock<PathBuf> = OnceLock::new();
    ROOT.get_or_init(|| {
        let shm = Path::new("/dev/shm");
        if shm.is_dir() && tempfile::tempdir_in(shm).is_ok() {
            shm.to_path_buf()
        } else {
            std::env::temp_dir()
        }
    })
    .clone()
}

/// Runs one trial in a fresh scratch directory.
pub fn run_trial(cfg: &EnsembleConfig) -> Result<TrialResult, EnsembleError> {
    let dir = tempfile::Builder::new()
        .prefix("skillgate-trial-")
        .tempdir_in(scratch_root())?;
    run_trial_in(cfg, dir.path())
}

/// First corpus file that the current turn does not touch.
fn untouched(files: &[String], env: &RequestEnvelope, fallback: &str) -> String {
    let busy = [env.target(), env.arg_str("source")];
    files
        .iter()
        .find(|f| !busy.contains(&Some(f.as_str())))
        .cloned()
        .unwrap_or_else(|| fallback.to_string())
}

/// Runs one trial with its corpus under `work` (which must be empty or
/// absent). Deterministic in `cfg`.
pub fn run_trial_in(cfg: &EnsembleConfig, work: &Path) -> Result<TrialResult, EnsembleError> {
    cfg.validate()?;
    let corpus = work.join("corpus");
    let baseline = generate_corpus(cfg.n, cfg.seed, &corpus)?;

    let log = AuditLog::in_memory(AuditMode::Harness);
    let key = synth::signing_key(cfg.seed, "ensemble");
    let root = synth::locked_root("ensemble", &key, Label::public(), VerificationLevel::Declared, &log)?;
    let mut boot = Bootstrap::new(root, log, Label::public(), DEFAULT_MAX_RANK)?;
    for role in Role::ALL.iter().take(cfg.k.min(4)) {
        let spec = SkillSpec::new(&role.skill_id(), "ensemble")
            .level(VerificationLevel::Declared)
            .cap(Capability::FsRead, "")
            .cap(Capability::FsWriteIrrev, "");
        boot.load(spec.artifact(&key), None).map_err(SessionError::from)?;
    }
    let switch = FaultSwitch::default();
    let broker: Box<dyn Broker> = match cfg.broker {
        BrokerKind::DenyAll => Box::new(DenyAll),
        _ => Box::new(AllowAll),
    };
    let mut session = boot.start(SessionConfig {
        fs_root: corpus.clone(),
        broker,
        host: Box::new(FaultShim::new(&corpus, switch.clone())),
        seed: Some(cfg.seed),
    })?;

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed ^ 0x6167_656e_7473);
    let mut checkpoints = vec![Checkpoint {
        snapshot: baseline,
        log_len: session.audit().len(),
    }];
    let mut last: Option<RequestEnvelope> = None;
    let mut injected = false;
    for round in 0..cfg.r {
        for agent in 0..cfg.k {
            let role = Role::for_agent(agent);
            let files = list_files(&corpus)?;
            let sizes = files
                .iter()
                .map(|f| corpus.join(f).metadata().map(|m| m.len()))
                .collect::<std::io::Result<Vec<u64>>>()?;
            let view = WorldView {
                files: &files,
                sizes: &sizes,
                last_proposal: last.as_ref(),
            };
            let env = if (round + agent) % 3 == 2 {
                read_turn(role, view, &mut rng)
            } else {
                agent_turn(role, view, &mut rng)
            };
            if round == cfg.fault_round() && agent == 0 {
                injected = inject(cfg.scenario, &corpus, &files, &env, session.audit(), &switch, &mut rng)?;
            }
            if env.op != Capability::FsRead.token() {
                last = Some(env.clone());
            }
            session.dispatch(env)?;
            checkpoints.push(Checkpoint {
                snapshot: bicond::snapshot(&corpus)?,
                log_len: session.audit().len(),
            });
        }
    }
    if matches!(cfg.scenario, Scenario::F3 | Scenario::F4) {
        injected = !switch.is_armed();
    }

    let records = session.audit().records();
    let report = bicond::check_intervals(&checkpoints, &records)?;
    let log = session.audit().to_jsonl();
    session.close();
    let expected_pass = cfg.scenario.expected_pass();
    Ok(TrialResult {
        config: *cfg,
        agree: report.verdict.pass == expected_pass,
        report,
        expected_pass,
        injected,
        log,
    })
}

/// Injects the scenario's fault during the turn that proposes `env`. F1
/// writes the corpus directly and F2 forges an executed record; both pick a
/// file the turn does not touch. F3 and F4 arm the host shim beneath the
/// gate.
fn inject(
    scenario: Scenario,
    corpus: &Path,
    files: &[String],
    env: &RequestEnvelope,
    audit: &AuditLog,
    switch: &FaultSwitch,
    rng: &mut ChaCha20Rng,
) -> Result<bool, EnsembleError> {
    match scenario {
        Scenario::Clean => Ok(false),
        Scenario::F1 => {
            let target = corpus.join(untouched(files, env, "stealth.txt"));
            let mut bytes = std::fs::read(&target).unwrap_or_default();
            bytes.extend_from_slice(b"stealth edit\n");
            std::fs::write(&target, bytes)?;
            Ok(true)
        }
        Scenario::F2 => {
            let mut id = [0u8; 16];
            rng.fill_bytes(&mut id);
            let mut p = Map::new();
            p.insert("op".into(), Value::String(Capability::FsWriteIrrev.token().into()));
            p.insert("target".into(), Value::String(untouched(files, env, "phantom.txt")));
            p.insert("ok".into(), Value::Bool(true));
            p.insert("mode".into(), Value::String("overwrite".into()));
            audit.append_unchecked(RecordType::IrreversibleExecuted, Some(RequestId(id)), p)?;
            Ok(true)
        }
        Scenario::F3 => {
            switch.arm(Armed::NoOp);
            Ok(false)
        }
        Scenario::F4 => {
            switch.arm(Armed::Redirect);
            Ok(false)
        }
    }
}
