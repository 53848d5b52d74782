use std::collections::BTreeSet;

use serde_json::{Map, Value};
use thiserror::Error;

use super::VerificationLevel;
use crate::canonical::{self, parse_strict, uint, EncodingError};
use crate::capability::{Capability, CapabilityDecl};
use crate::hash::Digest;
use crate::lattice::Label;

const FIELDS: [&str; 7] = [
    "caps",
    "contentHash",
    "label",
    "signer",
    "skillId",
    "verification",
    "version",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ManifestError {
    #[error("manifest is not valid strict JSON: {0}")]
    Syntax(String),
    #[error("manifest must be a JSON object")]
    NotObject,
    #[error("unknown manifest field {0:?}")]
    UnknownField(String),
    #[error("missing mandatory field {0:?}")]
    Missing(&'static str),
    #[error("field {0:?}: {1}")]
    Invalid(&'static str, String),
}

/// The signed declaration of a skill.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub skill_id: String,
    pub label: Label,
    pub caps: BTreeSet<CapabilityDecl>,
    pub signer: String,
    pub version: u64,
    pub verification: VerificationLevel,
    pub content_hash: Digest,
}

impl Manifest {
    pub fn to_value(&self) -> Value {
        let mut obj = Map::new();
        obj.insert("skillId".into(), Value::String(self.skill_id.clone()));
        obj.insert("label".into(), Value::String(self.label.to_string()));
        obj.insert(
            "caps".into(),
            Value::Array(
                self.caps
                    .iter()
                    .map(|c| {
                        let mut m = Map::new();
                        m.insert("token".into(), Value::String(c.token.token().into()));
                        m.insert("target".into(), Value::String(c.target.clone()));
                        Value::Object(m)
                    })
                    .collect(),
            ),
        );
        obj.insert("signer".into(), Value::String(self.signer.clone()));
        obj.insert("version".into(), uint(self.version));
        obj.insert("verification".into(), Value::String(self.verification.as_str().into()));
        obj.insert("contentHash".into(), Value::String(self.content_hash.to_hex()));
        Value::Object(obj)
    }

    /// Deterministic signing bytes. Caps serialize in sorted order, so two
    /// equal manifests always produce identical bytes.
    pub fn canonicalize(&self) -> Result<Vec<u8>, EncodingError> {
        canonical::to_canonical_bytes(&self.to_value())
    }

    /// Strict parse. Unknown fields, duplicate or prototype-pollution keys,
    /// missing mandatory fields and out-of-vocabulary capability tokens are all
    /// rejected. An absent `verification` means `unverified`.
    pub fn parse(bytes: &[u8], max_rank: u32) -> Result<Manifest, ManifestError> {
        let value = parse_strict(bytes).map_err(|e| ManifestError::Syntax(e.message().to_string()))?;
        Self::from_value(value, max_rank)
    }

    pub fn from_value(value: Value, max_rank: u32) -> Result<Manifest, ManifestError> {
        let Value::Object(mut obj) = value else {
            return Err(ManifestError::NotObject);
        };
        if let Some(k) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
            return Err(ManifestError::UnknownField(k.clone()));
        }
        let skill_id = take_string(&mut obj, "skillId")?;
        if skill_id.is_empty() {
            return Err(ManifestError::Invalid("skillId", "empty".into()));
        }
        let label = Label::parse_bounded(&take_string(&mut obj, "label")?, max_rank)
            .map_err(|e| ManifestError::Invalid("label", e.to_string()))?;
        let signer = take_string(&mut obj, "signer")?;
        if signer.is_empty() {
            return Err(ManifestError::Invalid("signer", "empty".into()));
        }
        let version = match obj.remove("version") {
            None => return Err(ManifestError::Missing("version")),
            Some(v) => v
                .as_u64()
                .filter(|v| *v >= 1)
                .ok_or_else(|| ManifestError::Invalid("version", "must be a positive integer".into()))?,
        };
        let verification = match obj.remove("verification") {
            None => VerificationLevel::Unverified,
            Some(Value::String(s)) => s.parse().map_err(|e| ManifestError::Invalid("verification", e))?,
            Some(_) => return Err(ManifestError::Invalid("verification", "not a string".into())),
        };
        let content_hash = take_string(&mut obj, "contentHash")?
            .parse()
            .map_err(|e| ManifestError::Invalid("contentHash", e))?;
        let caps = match obj.remove("caps") {
            None => return Err(ManifestError::Missing("caps")),
            Some(Value::Array(items)) => parse_caps(items)?,
            Some(_) => return Err(ManifestError::Invalid("caps", "not an array".into())),
        };
        Ok(Manifest {
            skill_id,
            label,
            caps,
            signer,
            version,
            verification,
            content_hash,
        })
    }
}

fn take_string(obj: &mut Map<String, Value>, key: &'static str) -> Result<String, ManifestError> {
    match obj.remove(key) {
        None => Err(ManifestError::Missing(key)),
        Some(Value::String(s)) => Ok(s),
        Some(_) => Err(ManifestError::Invalid(key, "not a string".into())),
    }
}

fn parse_caps(items: Vec<Value>) -> Result<BTreeSet<CapabilityDecl>, ManifestError> {
    let mut caps = BTreeSet::new();
    for item in items {
        let Value::Object(mut m) = item else {
            return Err(ManifestError::Invalid("caps", "entry is not an object".into()));
        };
        if let Some(k) = m.keys().find(|k| *k != "token" && *k != "target") {
            return Err(ManifestError::Invalid("caps", format!("unknown entry field {k:?}")));
        }
        let token = match m.remove("token") {
            Some(Value::String(s)) => s
                .parse::<Capability>()
                .map_err(|e| ManifestError::Invalid("caps", e.to_string()))?,
            _ => return Err(ManifestError::Invalid("caps", "entry token missing".into())),
        };
        let target = match m.remove("target") {
            Some(Value::String(s)) => s,
            _ => return Err(ManifestError::Invalid("caps", "entry target missing".into())),
        };
        if !caps.insert(CapabilityDecl::new(token, target)) {
            return Err(ManifestError::Invalid("caps", "duplicate entry".into()));
        }
    }
    Ok(caps)
}
