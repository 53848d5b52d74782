//! The capability vocabulary and target matching.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("unknown capability token {0:?}")]
pub struct UnknownCapability(pub String);

/// A side-effect class. The set is closed; unknown tokens fail to parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Capability {
    NetEgress,
    FsRead,
    FsWriteRev,
    FsWriteIrrev,
    ToolInvoke,
    SpawnProc,
    Publish,
    Pay,
    MutateSchema,
}

impl Capability {
    pub const ALL: [Capability; 9] = [
        Capability::NetEgress,
        Capability::FsRead,
        Capability::FsWriteRev,
        Capability::FsWriteIrrev,
        Capability::ToolInvoke,
        Capability::SpawnProc,
        Capability::Publish,
        Capability::Pay,
        Capability::MutateSchema,
    ];

    pub fn token(self) -> &'static str {
        match self {
            Capability::NetEgress => "net.egress",
            Capability::FsRead => "fs.read",
            Capability::FsWriteRev => "fs.write.rev",
            Capability::FsWriteIrrev => "fs.write.irrev",
            Capability::ToolInvoke => "tool.invoke",
            Capability::SpawnProc => "spawn.proc",
            Capability::Publish => "publish",
            Capability::Pay => "pay",
            Capability::MutateSchema => "mutate.schema",
        }
    }

    pub fn is_fs(self) -> bool {
        matches!(
            self,
            Capability::FsRead | Capability::FsWriteRev | Capability::FsWriteIrrev
        )
    }

    pub fn is_fs_write(self) -> bool {
        matches!(self, Capability::FsWriteRev | Capability::FsWriteIrrev)
    }

    /// Whether `target` falls under a declared `pattern` for this token.
    ///
    /// Filesystem tokens use component-wise path prefixes (an empty pattern
    /// covers the whole workspace). Hosts compare case-insensitively with any
    /// trailing dot removed. Every other kind is an exact match.
    pub fn target_matches(self, pattern: &str, target: &str) -> bool {
        match self {
            Capability::FsRead | Capability::FsWriteRev | Capability::FsWriteIrrev => {
                path_prefix_matches(pattern, target)
            }
            Capability::NetEgress => normalize_host(pattern) == normalize_host(target),
            _ => pattern == target,
        }
    }
}

pub fn normalize_host(host: &str) -> String {
    host.trim_end_matches('.').to_ascii_lowercase()
}

fn components(path: &str) -> impl Iterator<Item = &str> {
    path.split('/').filter(|c| !c.is_empty() && *c != ".")
}

fn path_prefix_matches(pattern: &str, target: &str) -> bool {
    let mut t = components(target);
    for p in components(pattern) {
        match t.next() {
            Some(c) if c == p => {}
            _ => return false,
        }
    }
    true
}

impl fmt::Display for Capability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for Capability {
    type Err = UnknownCapability;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Capability::ALL
            .iter()
            .copied()
            .find(|c| c.token() == s)
            .ok_or_else(|| UnknownCapability(s.to_string()))
    }
}

impl Serialize for Capability {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.token())
    }
}

impl<'de> Deserialize<'de> for Capability {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A manifest-declared `(token, target pattern)` pair.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapabilityDecl {
    pub token: Capability,
    pub target: String,
}

impl CapabilityDecl {
    pub fn new(token: Capability, target: impl Into<String>) -> Self {
        CapabilityDecl {
            token,
            target: target.into(),
        }
    }

    pub fn covers(&self, op: Capability, target: &str) -> bool {
        self.token == op && op.target_matches(&self.target, target)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokens_round_trip() {
        for cap in Capability::ALL {
            assert_eq!(cap.token().parse::<Capability>().unwrap(), cap);
        }
        assert!("fs.write".parse::<Capability>().is_err());
        assert!("enclave.attest".parse::<Capability>().is_err());
    }

    #[test]
    fn path_prefixes_are_component_wise() {
        let w = Capability::FsWriteIrrev;
        assert!(w.target_matches("corpus", "corpus/a.txt"));
        assert!(w.target_matches("corpus/", "corpus"));
        assert!(w.target_matches("", "anything/at/all"));
        assert!(!w.target_matches("corpus", "corpus2/a.txt"));
        assert!(!w.target_matches("corpus/a", "corpus"));
    }

    #[test]
    fn host_normalization() {
        let n = Capability::NetEgress;
        assert!(n.target_matches("api.example.com", "API.Example.com."));
        assert!(!n.target_matches("example.com", "evil-example.com"));
        assert!(!n.target_matches("example.com", "sub.example.com"));
    }

    #[test]
    fn exact_kinds() {
        assert!(Capability::ToolInvoke.target_matches("grep", "grep"));
        assert!(!Capability::ToolInvoke.target_matches("grep", "grep2"));
        assert!(!Capability::Pay.target_matches("USD", "usd"));
    }
}
