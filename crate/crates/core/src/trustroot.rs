//! The trust root: the finite set of signers whose signatures the loader
//! accepts, each bounded by a maximum clearance and a maximum verification
//! level it may attest.
//!
//! The root is built during bootstrap and then locked. There is no unlock.

use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::VerifyingKey;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use thiserror::Error;

use crate::audit::{AuditError, AuditLog, RecordType};
use crate::lattice::Label;
use crate::skillpkg::VerificationLevel;

#[derive(Debug, Error)]
pub enum TrustRootError {
    #[error("trust root is locked")]
    Locked,
    #[error("no signer with key id {0:?}")]
    Absent(String),
    #[error("invalid signer entry: {0}")]
    Invalid(String),
    #[error("trust root file: {0}")]
    File(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SignerEntry {
    pub key_id: String,
    pub pub_key: VerifyingKey,
    pub max_clearance: Label,
    pub max_level: VerificationLevel,
}

impl SignerEntry {
    pub fn new(
        key_id: impl Into<String>,
        pub_key: VerifyingKey,
        max_clearance: Label,
        max_level: VerificationLevel,
    ) -> Result<SignerEntry, TrustRootError> {
        let key_id = key_id.into();
        if key_id.is_empty() {
            return Err(TrustRootError::Invalid("empty key id".into()));
        }
        Ok(SignerEntry {
            key_id,
            pub_key,
            max_clearance,
            max_level,
        })
    }
}

#[derive(Debug, Default)]
pub struct TrustRoot {
    entries: BTreeMap<String, SignerEntry>,
    locked: bool,
}

impl TrustRoot {
    pub fn new() -> TrustRoot {
        TrustRoot::default()
    }

    /// Inserts or replaces the entry under its key id.
    pub fn set(&mut self, entry: SignerEntry) -> Result<(), TrustRootError> {
        if self.locked {
            return Err(TrustRootError::Locked);
        }
        self.entries.insert(entry.key_id.clone(), entry);
        Ok(())
    }

    pub fn remove(&mut self, key_id: &str) -> Result<SignerEntry, TrustRootError> {
        if self.locked {
            return Err(TrustRootError::Locked);
        }
        self.entries
            .remove(key_id)
            .ok_or_else(|| TrustRootError::Absent(key_id.to_string()))
    }

    /// Locks the root and records a `trustroot.lock` event. Repeat calls are
    /// no-ops on the entry map but are still recorded.
    ///
    /// The root is locked even when the audit append fails.
    pub fn lock(&mut self, audit: &AuditLog) -> Result<(), AuditError> {
        let already = self.locked;
        self.locked = true;
        let mut payload = Map::new();
        payload.insert("alreadyLocked".into(), Value::Bool(already));
        payload.insert(
            "keyIds".into(),
            Value::Array(self.entries.keys().cloned().map(Value::String).collect()),
        );
        audit.append(RecordType::TrustRootLock, None, payload)?;
        Ok(())
    }

    pub fn is_locked(&self) -> bool {
        self.locked
    }

    pub fn resolve(&self, key_id: &str) -> Option<&SignerEntry> {
        self.entries.get(key_id)
    }

    pub fn entries(&self) -> impl Iterator<Item = &SignerEntry> {
        self.entries.values()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// On-disk trust root document.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct TrustRootFile {
    #[serde(default)]
    pub locked: bool,
    #[serde(default)]
    pub entries: Vec<SignerEntryFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
pub struct SignerEntryFile {
    pub key_id: String,
    /// base64 of the 32-byte Ed25519 public key
    pub pub_key: String,
    pub max_clearance: String,
    pub max_verification_level: VerificationLevel,
}

impl SignerEntryFile {
    pub fn from_entry(e: &SignerEntry) -> SignerEntryFile {
        SignerEntryFile {
            key_id: e.key_id.clone(),
            pub_key: B64.encode(e.pub_key.as_bytes()),
            max_clearance: e.max_clearance.to_string(),
            max_verification_level: e.max_level,
        }
    }

    pub fn to_entry(&self, max_rank: u32) -> Result<SignerEntry, TrustRootError> {
        let bytes = B64
            .decode(&self.pub_key)
            .map_err(|e| TrustRootError::Invalid(format!("{}: pubKey: {e}", self.key_id)))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| TrustRootError::Invalid(format!("{}: pubKey must be 32 bytes", self.key_id)))?;
        let pub_key = VerifyingKey::from_bytes(&arr)
            .map_err(|e| TrustRootError::Invalid(format!("{}: pubKey: {e}", self.key_id)))?;
        let max_clearance = Label::parse_bounded(&self.max_clearance, max_rank)
            .map_err(|e| TrustRootError::Invalid(format!("{}: maxClearance: {e}", self.key_id)))?;
        SignerEntry::new(self.key_id.clone(), pub_key, max_clearance, self.max_verification_level)
    }
}

impl TrustRootFile {
    pub fn read(path: &Path) -> Result<TrustRootFile, TrustRootError> {
        let text = std::fs::read(path).map_err(|e| TrustRootError::File(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&text).map_err(|e| TrustRootError::File(e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<(), TrustRootError> {
        let mut text = serde_json::to_string_pretty(self).map_err(|e| TrustRootError::File(e.to_string()))?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| TrustRootError::File(format!("{}: {e}", path.display())))
    }

    /// Adds or replaces an entry. Refused once the document is marked locked.
    pub fn upsert(&mut self, entry: &SignerEntry) -> Result<(), TrustRootError> {
        if self.locked {
            return Err(TrustRootError::Locked);
        }
        let doc = SignerEntryFile::from_entry(entry);
        match self.entries.iter_mut().find(|e| e.key_id == doc.key_id) {
            Some(slot) => *slot = doc,
            None => self.entries.push(doc),
        }
        Ok(())
    }

    /// Builds an unlocked in-memory root. Duplicate key ids are rejected.
    pub fn to_trust_root(&self, max_rank: u32) -> Result<TrustRoot, TrustRootError> {
        let mut root = TrustRoot::new();
        for doc in &self.entries {
            if root.resolve(&doc.key_id).is_some() {
                return Err(TrustRootError::Invalid(format!("duplicate key id {:?}", doc.key_id)));
            }
            root.set(doc.to_entry(max_rank)?)?;
        }
        Ok(root)
    }

    pub fn summary(&self) -> Value {
        json!({
            "locked": self.locked,
            "entries": self.entries.iter().map(|e| json!({
                "keyId": e.key_id,
                "maxClearance": e.max_clearance,
                "maxVerificationLevel": e.max_verification_level.as_str(),
            })).collect::<Vec<_>>(),
        })
    }
}
