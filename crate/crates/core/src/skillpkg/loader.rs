use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use ed25519_dalek::Signature;
use serde_json::{Map, Value};
use thiserror::Error;

use super::{verify_skill, Manifest, ManifestError, VerificationLevel};
use crate::audit::{AuditError, AuditLog, RecordType};
use crate::canonical::uint;
use crate::capability::CapabilityDecl;
use crate::hash::Digest;
use crate::lattice::Label;
use crate::trustroot::TrustRoot;

/// A skill as presented to the loader: raw manifest bytes, the content
/// archive and a detached signature.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkillArtifact {
    pub manifest_bytes: Vec<u8>,
    pub content: Vec<u8>,
    pub signature: Signature,
}

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("UnlockedTrustRootError: skills load only against a locked trust root")]
    UnlockedRoot,
    #[error("ParseError step 1: {0}")]
    Parse(ManifestError),
    #[error("UnknownSignerError step 2: signer {0:?} is not in the trust root")]
    UnknownSigner(String),
    #[error("BadSignatureError step 3: {0}")]
    BadSignature(String),
    #[error("SignerClearanceError step 4: label {label} exceeds signer {signer:?} clearance {clearance}")]
    SignerClearance {
        signer: String,
        label: Label,
        clearance: Label,
    },
    #[error("OperatorClearanceError step 5: label {label} exceeds operator clearance {clearance}")]
    OperatorClearance { label: Label, clearance: Label },
    #[error("AttestationAuthorityError step 6: level {level} exceeds signer {signer:?} authority {max}")]
    AttestationAuthority {
        signer: String,
        level: VerificationLevel,
        max: VerificationLevel,
    },
    #[error("ReplayError step 7: {0}")]
    Replay(ReplayError),
    #[error("audit append failed during load: {0}")]
    Audit(#[from] AuditError),
}

impl LoadError {
    /// Loader step that failed, 1 through 7.
    pub fn step(&self) -> Option<u8> {
        Some(match self {
            LoadError::Parse(_) => 1,
            LoadError::UnknownSigner(_) => 2,
            LoadError::BadSignature(_) => 3,
            LoadError::SignerClearance { .. } => 4,
            LoadError::OperatorClearance { .. } => 5,
            LoadError::AttestationAuthority { .. } => 6,
            LoadError::Replay(_) => 7,
            LoadError::UnlockedRoot | LoadError::Audit(_) => return None,
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LoadError::UnlockedRoot => "UnlockedTrustRootError",
            LoadError::Parse(_) => "ParseError",
            LoadError::UnknownSigner(_) => "UnknownSignerError",
            LoadError::BadSignature(_) => "BadSignatureError",
            LoadError::SignerClearance { .. } => "SignerClearanceError",
            LoadError::OperatorClearance { .. } => "OperatorClearanceError",
            LoadError::AttestationAuthority { .. } => "AttestationAuthorityError",
            LoadError::Replay(_) => "ReplayError",
            LoadError::Audit(_) => "AuditError",
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("skill {skill_id:?} version {version} is not newer than observed version {observed}")]
pub struct ReplayError {
    pub skill_id: String,
    pub version: u64,
    pub observed: u64,
}

/// Highest manifest version observed per skill identity.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ReplayGuard {
    observed: BTreeMap<String, u64>,
}

impl ReplayGuard {
    pub fn new() -> ReplayGuard {
        ReplayGuard::default()
    }

    pub fn check(&self, skill_id: &str, version: u64) -> Result<(), ReplayError> {
        match self.observed.get(skill_id) {
            Some(&observed) if version <= observed => Err(ReplayError {
                skill_id: skill_id.to_string(),
                version,
                observed,
            }),
            _ => Ok(()),
        }
    }

    /// Accepts only a strictly newer version and raises the high-water mark.
    pub fn check_and_record(&mut self, skill_id: &str, version: u64) -> Result<(), ReplayError> {
        self.check(skill_id, version)?;
        self.observed.insert(skill_id.to_string(), version);
        Ok(())
    }

    pub fn observed(&self, skill_id: &str) -> Option<u64> {
        self.observed.get(skill_id).copied()
    }
}

/// A skill that passed every load step. Read-only for the rest of the session.
#[derive(Debug, Clone)]
pub struct LoadedSkill {
    artifact: SkillArtifact,
    manifest: Manifest,
    install_dir: Option<PathBuf>,
    artifact_hash: Option<Digest>,
}

impl LoadedSkill {
    pub fn artifact(&self) -> &SkillArtifact {
        &self.artifact
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn skill_id(&self) -> &str {
        &self.manifest.skill_id
    }

    pub fn effective_level(&self) -> VerificationLevel {
        self.manifest.verification
    }

    pub fn registered_caps(&self) -> &BTreeSet<CapabilityDecl> {
        &self.manifest.caps
    }

    pub fn label(&self) -> &Label {
        &self.manifest.label
    }

    pub fn frozen(&self) -> bool {
        true
    }

    pub fn install_dir(&self) -> Option<&Path> {
        self.install_dir.as_deref()
    }

    /// Hash of the on-disk package (manifest and signature included) at load.
    pub fn artifact_hash(&self) -> Option<Digest> {
        self.artifact_hash
    }
}

/// Inputs shared by every load in one bootstrap.
pub struct LoadContext<'a> {
    pub root: &'a TrustRoot,
    pub operator_clearance: &'a Label,
    pub max_rank: u32,
    pub audit: &'a AuditLog,
}

/// Runs the seven load steps in order and stops at the first failure.
/// Every outcome is recorded: `skill.load.ok` or `skill.load.reject`.
pub fn load_skill(
    ctx: &LoadContext<'_>,
    artifact: SkillArtifact,
    install_dir: Option<PathBuf>,
    replay: &mut ReplayGuard,
) -> Result<LoadedSkill, LoadError> {
    let mut parsed_id = None;
    match run_steps(ctx, &artifact, replay, &mut parsed_id) {
        Ok(manifest) => {
            replay
                .check_and_record(&manifest.skill_id, manifest.version)
                .map_err(LoadError::Replay)?;
            let artifact_hash = match &install_dir {
                Some(dir) => super::artifact_hash(dir).ok(),
                None => None,
            };
            let mut p = Map::new();
            p.insert("skillId".into(), Value::String(manifest.skill_id.clone()));
            p.insert("version".into(), uint(manifest.version));
            p.insert("level".into(), Value::String(manifest.verification.as_str().into()));
            p.insert("label".into(), Value::String(manifest.label.to_string()));
            p.insert("signer".into(), Value::String(manifest.signer.clone()));
            p.insert("contentHash".into(), Value::String(manifest.content_hash.to_hex()));
            p.insert(
                "caps".into(),
                Value::Array(
                    manifest
                        .caps
                        .iter()
                        .map(|c| Value::String(format!("{} {}", c.token.token(), c.target)))
                        .collect(),
                ),
            );
            ctx.audit.append(RecordType::SkillLoadOk, None, p)?;
            Ok(LoadedSkill {
                artifact,
                manifest,
                install_dir,
                artifact_hash,
            })
        }
        Err(err) => {
            let mut p = Map::new();
            p.insert("step".into(), err.step().map(|s| uint(s as u64)).unwrap_or(Value::Null));
            p.insert("error".into(), Value::String(err.kind().into()));
            p.insert("message".into(), Value::String(err.to_string()));
            if let Some(id) = parsed_id {
                p.insert("skillId".into(), Value::String(id));
            }
            ctx.audit.append(RecordType::SkillLoadReject, None, p)?;
            Err(err)
        }
    }
}

fn run_steps(
    ctx: &LoadContext<'_>,
    artifact: &SkillArtifact,
    replay: &ReplayGuard,
    parsed_id: &mut Option<String>,
) -> Result<Manifest, LoadError> {
    if !ctx.root.is_locked() {
        return Err(LoadError::UnlockedRoot);
    }
    // 1
    let manifest = Manifest::parse(&artifact.manifest_bytes, ctx.max_rank).map_err(LoadError::Parse)?;
    *parsed_id = Some(manifest.skill_id.clone());
    // 2
    let signer = ctx
        .root
        .resolve(&manifest.signer)
        .ok_or_else(|| LoadError::UnknownSigner(manifest.signer.clone()))?;
    // 3
    verify_skill(&manifest, &artifact.content, &artifact.signature, &signer.pub_key)
        .map_err(LoadError::BadSignature)?;
    // 4
    if !manifest.label.dominated_by(&signer.max_clearance) {
        return Err(LoadError::SignerClearance {
            signer: signer.key_id.clone(),
            label: manifest.label.clone(),
            clearance: signer.max_clearance.clone(),
        });
    }
    // 5
    if !manifest.label.dominated_by(ctx.operator_clearance) {
        return Err(LoadError::OperatorClearance {
            label: manifest.label.clone(),
            clearance: ctx.operator_clearance.clone(),
        });
    }
    // 6
    if manifest.verification > signer.max_level {
        return Err(LoadError::AttestationAuthority {
            signer: signer.key_id.clone(),
            level: manifest.verification,
            max: signer.max_level,
        });
    }
    // 7
    replay
        .check(&manifest.skill_id, manifest.version)
        .map_err(LoadError::Replay)?;
    Ok(manifest)
}
