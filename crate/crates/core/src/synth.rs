//! Deterministic keys, roots and signed skills for the ensemble harness,
//! demos and tests.

use std::collections::BTreeSet;
use std::path::Path;

use ed25519_dalek::SigningKey;
use sha2::{Digest as _, Sha256};

use crate::audit::{AuditError, AuditLog};
use crate::capability::{Capability, CapabilityDecl};
use crate::hash::Digest;
use crate::lattice::Label;
use crate::skillpkg::{package, sign_skill, Manifest, PackageError, SkillArtifact, VerificationLevel};
use crate::trustroot::{SignerEntry, TrustRoot};

/// Ed25519 key derived from a seed and a tag. Reproducible, not secret.
pub fn signing_key(seed: u64, tag: &str) -> SigningKey {
    let mut h = Sha256::new();
    h.update(b"skillgate synth key\0");
    h.update(tag.as_bytes());
    h.update(seed.to_be_bytes());
    SigningKey::from_bytes(&h.finalize().into())
}

/// A locked root holding one signer.
pub fn locked_root(
    key_id: &str,
    key: &SigningKey,
    clearance: Label,
    max_level: VerificationLevel,
    audit: &AuditLog,
) -> Result<TrustRoot, AuditError> {
    let mut root = TrustRoot::new();
    let entry = SignerEntry::new(key_id, key.verifying_key(), clearance, max_level).expect("non-empty key id");
    root.set(entry).expect("fresh root is unlocked");
    root.lock(audit)?;
    Ok(root)
}

#[derive(Debug, Clone)]
pub struct SkillSpec {
    pub skill_id: String,
    pub signer: String,
    pub label: Label,
    pub caps: BTreeSet<CapabilityDecl>,
    pub version: u64,
    pub level: VerificationLevel,
    pub body: Vec<u8>,
}

impl SkillSpec {
    pub fn new(skill_id: &str, signer: &str) -> SkillSpec {
        SkillSpec {
            skill_id: skill_id.into(),
            signer: signer.into(),
            label: Label::public(),
            caps: BTreeSet::new(),
            version: 1,
            level: VerificationLevel::Declared,
            body: format!("# {skill_id}\n").into_bytes(),
        }
    }

    pub fn cap(mut self, token: Capability, target: &str) -> SkillSpec {
        self.caps.insert(CapabilityDecl::new(token, target));
        self
    }

    pub fn level(mut self, level: VerificationLevel) -> SkillSpec {
        self.level = level;
        self
    }

    pub fn version(mut self, version: u64) -> SkillSpec {
        self.version = version;
        self
    }

    pub fn label(mut self, label: Label) -> SkillSpec {
        self.label = label;
        self
    }

    fn manifest(&self, content: &[u8]) -> Manifest {
        Manifest {
            skill_id: self.skill_id.clone(),
            label: self.label.clone(),
            caps: self.caps.clone(),
            signer: self.signer.clone(),
            version: self.version,
            verification: self.level,
            content_hash: Digest::of(content),
        }
    }

    /// In-memory artifact whose content is the body bytes.
    pub fn artifact(&self, key: &SigningKey) -> SkillArtifact {
        let m = self.manifest(&self.body);
        let signature = sign_skill(&m, &self.body, key).expect("content hash set from the same bytes");
        SkillArtifact {
            manifest_bytes: m.canonicalize().expect("manifest has no floats"),
            content: self.body.clone(),
            signature,
        }
    }

    /// Writes `SKILL.md` into `dir` and signs the directory as a package.
    pub fn write_package(&self, dir: &Path, key: &SigningKey) -> Result<Manifest, PackageError> {
        std::fs::create_dir_all(dir).map_err(|source| PackageError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let skill = dir.join(package::SKILL_FILE);
        std::fs::write(&skill, &self.body).map_err(|source| PackageError::Io { path: skill, source })?;
        let mut m = self.manifest(&[]);
        package::sign_package(dir, &mut m, key)?;
        Ok(m)
    }
}
