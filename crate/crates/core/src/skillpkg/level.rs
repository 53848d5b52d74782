use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// How far the runtime trusts a manifest's behavioural claims.
///
/// Totally ordered: `Unverified < Declared < Tested < Formal`. Set at
/// bootstrap from the signed manifest; nothing in a session raises it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub enum VerificationLevel {
    #[default]
    Unverified,
    Declared,
    Tested,
    Formal,
}

impl VerificationLevel {
    pub const ALL: [VerificationLevel; 4] = [
        VerificationLevel::Unverified,
        VerificationLevel::Declared,
        VerificationLevel::Tested,
        VerificationLevel::Formal,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            VerificationLevel::Unverified => "unverified",
            VerificationLevel::Declared => "declared",
            VerificationLevel::Tested => "tested",
            VerificationLevel::Formal => "formal",
        }
    }
}

impl fmt::Display for VerificationLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VerificationLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        VerificationLevel::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown verification level {s:?}"))
    }
}

impl Serialize for VerificationLevel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for VerificationLevel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}
