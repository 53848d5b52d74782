use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::str::FromStr;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use super::pending::PendingQueue;
use crate::capability::Capability;
use crate::hash::RequestId;
use crate::skillpkg::VerificationLevel;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

pub const ID_MANIFEST_DECLARED: &str = "manifest-declared";
pub const ID_DENY_BY_DEFAULT: &str = "deny-by-default";
pub const ID_TIMEOUT: &str = "timeout";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Approve,
    Deny,
}

impl Decision {
    pub fn as_str(self) -> &'static str {
        match self {
            Decision::Approve => "approve",
            Decision::Deny => "deny",
        }
    }
}

impl FromStr for Decision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "approve" => Ok(Decision::Approve),
            "deny" => Ok(Decision::Deny),
            _ => Err(format!("decision must be \"approve\" or \"deny\", got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerDecision {
    pub decision: Decision,
    pub broker_id: String,
}

impl BrokerDecision {
    pub fn new(decision: Decision, broker_id: impl Into<String>) -> BrokerDecision {
        BrokerDecision {
            decision,
            broker_id: broker_id.into(),
        }
    }
}

/// What a broker sees of a pending irreversible call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BrokerRequest {
    pub request_id: RequestId,
    pub op: String,
    pub target: String,
    pub reasoning: String,
    pub origin_skill_id: String,
    pub level: VerificationLevel,
}

pub trait Broker: Send + Sync {
    fn decide(&self, req: &BrokerRequest) -> BrokerDecision;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BrokerKind {
    DenyAll,
    Policy,
    Interactive,
    Webhook,
    AllowAll,
}

impl BrokerKind {
    pub const ALL: [BrokerKind; 5] = [
        BrokerKind::DenyAll,
        BrokerKind::Policy,
        BrokerKind::Interactive,
        BrokerKind::Webhook,
        BrokerKind::AllowAll,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            BrokerKind::DenyAll => "deny-all",
            BrokerKind::Policy => "policy",
            BrokerKind::Interactive => "interactive",
            BrokerKind::Webhook => "webhook",
            BrokerKind::AllowAll => "allow-all",
        }
    }
}

impl fmt::Display for BrokerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BrokerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BrokerKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown broker {s:?}"))
    }
}

pub struct DenyAll;

impl Broker for DenyAll {
    fn decide(&self, _: &BrokerRequest) -> BrokerDecision {
        BrokerDecision::new(Decision::Deny, "deny-all")
    }
}

/// Approves everything. Harness tooling for the detection sweep; calls still
/// walk the full lifecycle and are audited.
pub struct AllowAll;

impl Broker for AllowAll {
    fn decide(&self, _: &BrokerRequest) -> BrokerDecision {
        BrokerDecision::new(Decision::Approve, "allow-all")
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("PolicyParseError line {line}: {message}")]
pub struct PolicyParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
struct Rule {
    allow: bool,
    token: Capability,
    pattern: glob::Pattern,
}

/// Ordered `allow|deny <token> <target-glob>` rules; `#` starts a comment.
#[derive(Debug, Clone, Default)]
pub struct PolicyDoc {
    rules: Vec<Rule>,
}

impl PolicyDoc {
    pub fn parse(text: &str) -> Result<PolicyDoc, PolicyParseError> {
        let mut rules = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| PolicyParseError { line: i + 1, message };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            let [verb, token, pattern] = parts[..] else {
                return Err(err(format!("expected 3 fields, got {}", parts.len())));
            };
            let allow = match verb {
                "allow" => true,
                "deny" => false,
                other => return Err(err(format!("unknown verb {other:?}"))),
            };
            let token = token
                .parse()
                .map_err(|e: crate::capability::UnknownCapability| err(e.to_string()))?;
            let pattern = glob::Pattern::new(pattern).map_err(|e| err(e.to_string()))?;
            rules.push(Rule { allow, token, pattern });
        }
        Ok(PolicyDoc { rules })
    }

    /// First matching rule wins; no match is a deny.
    pub fn evaluate(&self, op: &str, target: &str) -> Decision {
        for r in &self.rules {
            if r.token.token() == op && r.pattern.matches(target) {
                return if r.allow { Decision::Approve } else { Decision::Deny };
            }
        }
        Decision::Deny
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

pub struct PolicyBroker {
    doc: PolicyDoc,
    fallback: Option<String>,
}

impl PolicyBroker {
    pub fn new(doc: PolicyDoc) -> PolicyBroker {
        PolicyBroker { doc, fallback: None }
    }

    /// Loads the policy document. It must live outside every path the agent
    /// can reach; an unreachable, misplaced or malformed document leaves the
    /// broker denying everything.
    pub fn load(path: &Path, agent_roots: &[&Path]) -> PolicyBroker {
        match Self::try_load(path, agent_roots) {
            Ok(doc) => PolicyBroker::new(doc),
            Err(reason) => {
                log::warn!("policy broker falls back to deny-all: {reason}");
                PolicyBroker {
                    doc: PolicyDoc::default(),
                    fallback: Some(reason),
                }
            }
        }
    }

    fn try_load(path: &Path, agent_roots: &[&Path]) -> Result<PolicyDoc, String> {
        let canon = path.canonicalize().map_err(|e| format!("{}: {e}", path.display()))?;
        for root in agent_roots {
            if let Ok(r) = root.canonicalize() {
                if canon.starts_with(&r) {
                    return Err(format!("{} is reachable by the agent", path.display()));
                }
            }
        }
        let text = std::fs::read_to_string(&canon).map_err(|e| format!("{}: {e}", path.display()))?;
        PolicyDoc::parse(&text).map_err(|e| e.to_string())
    }

    /// Why the broker is in deny-all mode, if it is.
    pub fn fallback(&self) -> Option<&str> {
        self.fallback.as_deref()
    }
}

impl Broker for PolicyBroker {
    fn decide(&self, req: &BrokerRequest) -> BrokerDecision {
        BrokerDecision::new(self.doc.evaluate(&req.op, &req.target), "policy")
    }
}

/// Source of human answers for [`InteractiveBroker`]. `None` means no answer
/// arrived in time.
pub trait Prompter: Send + Sync {
    fn ask(&self, req: &BrokerRequest, timeout: Duration) -> Option<Decision>;
}

pub struct InteractiveBroker {
    prompter: Box<dyn Prompter>,
    timeout: Duration,
}

impl InteractiveBroker {
    pub fn new(prompter: Box<dyn Prompter>, timeout: Duration) -> InteractiveBroker {
        InteractiveBroker { prompter, timeout }
    }
}

impl Broker for InteractiveBroker {
    fn decide(&self, req: &BrokerRequest) -> BrokerDecision {
        match self.prompter.ask(req, self.timeout) {
            Some(d) => BrokerDecision::new(d, "interactive"),
            None => BrokerDecision::new(Decision::Deny, ID_TIMEOUT),
        }
    }
}

/// Prompts on stderr and reads answers from stdin lines.
pub struct TerminalPrompter {
    lines: Mutex<Receiver<String>>,
}

impl TerminalPrompter {
    pub fn stdin() -> TerminalPrompter {
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for line in std::io::stdin().lock().lines() {
                let Ok(line) = line else { break };
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        TerminalPrompter { lines: Mutex::new(rx) }
    }
}

impl Prompter for TerminalPrompter {
    fn ask(&self, req: &BrokerRequest, timeout: Duration) -> Option<Decision> {
        eprintln!(
            "irreversible request {}\n  op: {}\n  target: {}\n  skill: {} ({})\n  reasoning: {}\napprove? [y/N] ({}s) ",
            req.request_id,
            req.op,
            req.target,
            req.origin_skill_id,
            req.level,
            req.reasoning,
            timeout.as_secs()
        );
        let rx = self.lines.lock().unwrap_or_else(|e| e.into_inner());
        match rx.recv_timeout(timeout) {
            Ok(line) => Some(match line.trim() {
                "y" | "yes" | "approve" => Decision::Approve,
                _ => Decision::Deny,
            }),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => Some(Decision::Deny),
        }
    }
}

/// Publishes each request on a [`PendingQueue`] that a remote decider polls
/// through the approval API.
pub struct WebhookBroker {
    queue: Arc<PendingQueue>,
    timeout: Duration,
}

impl WebhookBroker {
    pub fn new(queue: Arc<PendingQueue>, timeout: Duration) -> WebhookBroker {
        WebhookBroker { queue, timeout }
    }
}

impl Broker for WebhookBroker {
    fn decide(&self, req: &BrokerRequest) -> BrokerDecision {
        match self.queue.submit(req.clone(), self.timeout) {
            Some(d) => BrokerDecision::new(d, "webhook"),
            None => BrokerDecision::new(Decision::Deny, ID_TIMEOUT),
        }
    }
}
