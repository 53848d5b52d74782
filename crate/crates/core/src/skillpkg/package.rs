//! On-disk skill package layout.
//!
//! A package is a directory holding `SKILL.md` and any referenced files, plus
//! `manifest.json` (canonical form) and `skill.sig` (base64 Ed25519
//! signature). The signed content is a deterministic archive of every file
//! except the manifest and signature.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use ed25519_dalek::{Signature, SigningKey};
use thiserror::Error;

use super::{sign_skill, Manifest, SignError, SkillArtifact};
use crate::hash::Digest;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SIGNATURE_FILE: &str = "skill.sig";
pub const SKILL_FILE: &str = "SKILL.md";

#[derive(Debug, Error)]
pub enum PackageError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("package member escapes the package root: {0}")]
    PathEscape(String),
    #[error("package has no {SKILL_FILE}")]
    MissingSkillFile,
    #[error("bad signature file: {0}")]
    BadSignatureFile(String),
    #[error(transparent)]
    Sign(#[from] SignError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PackageError + '_ {
    move |source| PackageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads every regular file under `dir` keyed by `/`-separated relative path.
/// Symbolic links are refused rather than followed.
pub fn read_members(dir: &Path, include_meta: bool) -> Result<BTreeMap<String, Vec<u8>>, PackageError> {
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    if !include_meta {
        out.remove(MANIFEST_FILE);
        out.remove(SIGNATURE_FILE);
    }
    Ok(out)
}

fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) -> Result<(), PackageError> {
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let path = entry.path();
        let ft = entry.file_type().map_err(io_err(&path))?;
        let rel = path
            .strip_prefix(root)
            .ok()
            .and_then(|p| p.to_str())
            .ok_or_else(|| PackageError::PathEscape(path.display().to_string()))?
            .replace(std::path::MAIN_SEPARATOR, "/");
        if ft.is_symlink() {
            return Err(PackageError::PathEscape(rel));
        } else if ft.is_dir() {
            walk(root, &path, out)?;
        } else if ft.is_file() {
            out.insert(rel, std::fs::read(&path).map_err(io_err(&path))?);
        }
    }
    Ok(())
}

/// Deterministic archive: for each member in path order,
/// `path ‖ 0x00 ‖ u64-be length ‖ bytes`.
pub fn encode_archive(members: &BTreeMap<String, Vec<u8>>) -> Vec<u8> {
    let mut out = Vec::new();
    for (path, data) in members {
        out.extend_from_slice(path.as_bytes());
        out.push(0);
        out.extend_from_slice(&(data.len() as u64).to_be_bytes());
        out.extend_from_slice(data);
    }
    out
}

/// The signed content of the package at `dir`.
pub fn content_archive(dir: &Path) -> Result<Vec<u8>, PackageError> {
    let members = read_members(dir, false)?;
    if !members.contains_key(SKILL_FILE) {
        return Err(PackageError::MissingSkillFile);
    }
    Ok(encode_archive(&members))
}

/// Digest of the whole on-disk artifact, manifest and signature included.
pub fn artifact_hash(dir: &Path) -> Result<Digest, PackageError> {
    Ok(Digest::of(&encode_archive(&read_members(dir, true)?)))
}

pub fn read_package(dir: &Path) -> Result<SkillArtifact, PackageError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_bytes = std::fs::read(&manifest_path).map_err(io_err(&manifest_path))?;
    let sig_path = dir.join(SIGNATURE_FILE);
    let sig_text = std::fs::read_to_string(&sig_path).map_err(io_err(&sig_path))?;
    let signature = decode_signature(sig_text.trim())?;
    Ok(SkillArtifact {
        manifest_bytes,
        content: content_archive(dir)?,
        signature,
    })
}

pub fn decode_signature(text: &str) -> Result<Signature, PackageError> {
    let bytes = B64
        .decode(text)
        .map_err(|e| PackageError::BadSignatureFile(e.to_string()))?;
    let arr: [u8; 64] = bytes
        .try_into()
        .map_err(|_| PackageError::BadSignatureFile("signature must be 64 bytes".into()))?;
    Ok(Signature::from_bytes(&arr))
}

/// Sets `manifest.content_hash` from the package content, then writes the
/// canonical manifest and the detached signature into `dir`.
pub fn sign_package(dir: &Path, manifest: &mut Manifest, key: &SigningKey) -> Result<Signature, PackageError> {
    let content = content_archive(dir)?;
    manifest.content_hash = Digest::of(&content);
    let sig = sign_skill(manifest, &content, key)?;
    let canon = manifest.canonicalize().map_err(SignError::from)?;
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, canon).map_err(io_err(&mpath))?;
    let spath = dir.join(SIGNATURE_FILE);
    std::fs::write(&spath, format!("{}\n", B64.encode(sig.to_bytes()))).map_err(io_err(&spath))?;
    Ok(sig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn archive_is_order_independent_and_excludes_meta() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("scripts")).unwrap();
        std::fs::write(dir.path().join("scripts/run.sh"), "echo hi").unwrap();
        std::fs::write(dir.path().join(SKILL_FILE), "# skill").unwrap();
        std::fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        let a = content_archive(dir.path()).unwrap();
        let members = read_members(dir.path(), false).unwrap();
        assert_eq!(members.keys().collect::<Vec<_>>(), vec!["SKILL.md", "scripts/run.sh"]);
        assert_eq!(a, encode_archive(&members));
        std::fs::write(dir.path().join(MANIFEST_FILE), "{\"x\":1}").unwrap();
        assert_eq!(a, content_archive(dir.path()).unwrap());
    }

    #[test]
    fn missing_skill_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("other.md"), "x").unwrap();
        assert!(matches!(
            content_archive(dir.path()),
            Err(PackageError::MissingSkillFile)
        ));
    }

    #[cfg(unix)]
    #[test]
    fn symlinks_refused() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join(SKILL_FILE), "# skill").unwrap();
        std::os::unix::fs::symlink("/etc/hostname", dir.path().join("leak")).unwrap();
        assert!(matches!(content_archive(dir.path()), Err(PackageError::PathEscape(_))));
    }
}
