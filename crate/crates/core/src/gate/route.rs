use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::capability::{Capability, CapabilityDecl};
use crate::skillpkg::VerificationLevel;

/// How the gate dispatches a call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Class {
    /// Executes directly; no corpus effect.
    NonMutating,
    /// Staged in the transaction buffer, or a tool registered reversible.
    Reversible,
    /// Walks the four-state lifecycle.
    Irreversible,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Reversibility {
    Reversible,
    Irreversible,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("UnknownCapabilityError: {0}")]
    UnknownCapability(String),
}

/// Tools positively registered at bootstrap, with their reversibility tag.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, Reversibility>,
}

impl ToolRegistry {
    pub fn register(&mut self, name: impl Into<String>, tag: Option<Reversibility>) {
        self.tools
            .insert(name.into(), tag.unwrap_or(Reversibility::Irreversible));
    }

    pub fn tag(&self, name: &str) -> Option<Reversibility> {
        self.tools.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tools.keys().map(String::as_str)
    }
}

/// Classification by dispatch path. `tool` is the tool name for
/// `tool.invoke`; unregistered tools are unknown capabilities.
pub fn classify(op: &str, tool: Option<&str>, tools: &ToolRegistry) -> Result<(Capability, Class), ClassifyError> {
    let cap: Capability = op
        .parse()
        .map_err(|_| ClassifyError::UnknownCapability(format!("token {op:?} is not in the vocabulary")))?;
    let class = match cap {
        Capability::FsRead => Class::NonMutating,
        Capability::FsWriteRev => Class::Reversible,
        Capability::ToolInvoke => {
            let name = tool.unwrap_or("");
            match tools.tag(name) {
                Some(Reversibility::Reversible) => Class::Reversible,
                Some(Reversibility::Irreversible) => Class::Irreversible,
                None => {
                    return Err(ClassifyError::UnknownCapability(format!(
                        "tool {name:?} is not registered"
                    )))
                }
            }
        }
        Capability::FsWriteIrrev
        | Capability::NetEgress
        | Capability::SpawnProc
        | Capability::Publish
        | Capability::Pay
        | Capability::MutateSchema => Class::Irreversible,
    };
    Ok((cap, class))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Route {
    ConsultBroker,
    AutoApprove,
    ReversibleBuffer,
}

impl Route {
    pub fn as_str(self) -> &'static str {
        match self {
            Route::ConsultBroker => "hitl-consult-broker",
            Route::AutoApprove => "hitl-auto-approve",
            Route::ReversibleBuffer => "reversible-buffer",
        }
    }
}

impl fmt::Display for Route {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GatePolicyRow {
    pub level: VerificationLevel,
    pub in_declared_caps: bool,
    pub route: Route,
}

/// Routing for irreversible calls. Fixed; there is no per-call override.
pub const POLICY_TABLE: [GatePolicyRow; 8] = [
    row(VerificationLevel::Unverified, false, Route::ConsultBroker),
    row(VerificationLevel::Unverified, true, Route::ConsultBroker),
    row(VerificationLevel::Declared, false, Route::ConsultBroker),
    row(VerificationLevel::Declared, true, Route::AutoApprove),
    row(VerificationLevel::Tested, false, Route::ConsultBroker),
    row(VerificationLevel::Tested, true, Route::AutoApprove),
    row(VerificationLevel::Formal, false, Route::ConsultBroker),
    row(VerificationLevel::Formal, true, Route::AutoApprove),
];

const fn row(level: VerificationLevel, in_declared_caps: bool, route: Route) -> GatePolicyRow {
    GatePolicyRow {
        level,
        in_declared_caps,
        route,
    }
}

pub fn route_for(level: VerificationLevel, op: Capability, target: &str, caps: &BTreeSet<CapabilityDecl>) -> Route {
    let in_caps = caps.iter().any(|c| c.covers(op, target));
    POLICY_TABLE
        .iter()
        .find(|r| r.level == level && r.in_declared_caps == in_caps)
        .map(|r| r.route)
        .unwrap_or(Route::ConsultBroker)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classification() {
        let mut tools = ToolRegistry::default();
        tools.register("lint", Some(Reversibility::Reversible));
        tools.register("deploy", None);
        assert_eq!(classify("fs.write.rev", None, &tools).unwrap().1, Class::Reversible);
        assert_eq!(classify("fs.write.irrev", None, &tools).unwrap().1, Class::Irreversible);
        assert_eq!(classify("fs.read", None, &tools).unwrap().1, Class::NonMutating);
        assert_eq!(
            classify("tool.invoke", Some("lint"), &tools).unwrap().1,
            Class::Reversible
        );
        assert_eq!(
            classify("tool.invoke", Some("deploy"), &tools).unwrap().1,
            Class::Irreversible
        );
        assert!(classify("tool.invoke", Some("rm"), &tools).is_err());
        assert!(classify("fs.delete", None, &tools).is_err());
    }

    #[test]
    fn table_covers_every_combination_once() {
        for level in VerificationLevel::ALL {
            for in_caps in [false, true] {
                let n = POLICY_TABLE
                    .iter()
                    .filter(|r| r.level == level && r.in_declared_caps == in_caps)
                    .count();
                assert_eq!(n, 1);
            }
        }
    }

    #[test]
    fn routes() {
        let caps: BTreeSet<_> = [CapabilityDecl::new(Capability::FsWriteIrrev, "reports")].into();
        let r = |l| route_for(l, Capability::FsWriteIrrev, "reports/q1.txt", &caps);
        assert_eq!(r(VerificationLevel::Unverified), Route::ConsultBroker);
        assert_eq!(r(VerificationLevel::Declared), Route::AutoApprove);
        assert_eq!(
            route_for(VerificationLevel::Tested, Capability::Publish, "general", &caps),
            Route::ConsultBroker
        );
        assert_eq!(
            route_for(
                VerificationLevel::Declared,
                Capability::FsWriteIrrev,
                "other.txt",
                &caps
            ),
            Route::ConsultBroker
        );
    }
}
