use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use thiserror::Error;

use super::Manifest;
use crate::canonical::EncodingError;
use crate::hash::Digest;

#[derive(Debug, Error)]
pub enum SignError {
    #[error("manifest contentHash {declared} does not match content digest {actual}")]
    HashMismatch { declared: Digest, actual: Digest },
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

/// `canonical(manifest) ‖ 0x0A ‖ SHA-256(content)`
pub fn signing_message(manifest: &Manifest, content_digest: &Digest) -> Result<Vec<u8>, EncodingError> {
    let mut msg = manifest.canonicalize()?;
    msg.push(b'\n');
    msg.extend_from_slice(&content_digest.0);
    Ok(msg)
}

pub fn sign_skill(manifest: &Manifest, content: &[u8], key: &SigningKey) -> Result<Signature, SignError> {
    let actual = Digest::of(content);
    if manifest.content_hash != actual {
        return Err(SignError::HashMismatch {
            declared: manifest.content_hash,
            actual,
        });
    }
    let msg = signing_message(manifest, &actual)?;
    Ok(key.sign(&msg))
}

/// Checks the signature over the *actual* content and that the manifest's
/// declared hash names that content.
pub fn verify_skill(
    manifest: &Manifest,
    content: &[u8],
    signature: &Signature,
    key: &VerifyingKey,
) -> Result<(), String> {
    let actual = Digest::of(content);
    let msg = signing_message(manifest, &actual).map_err(|e| e.to_string())?;
    key.verify_strict(&msg, signature)
        .map_err(|_| "signature does not verify over manifest and content".to_string())?;
    if manifest.content_hash != actual {
        return Err(format!(
            "manifest contentHash {} does not match content digest {actual}",
            manifest.content_hash
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skillpkg::VerificationLevel;
    use std::collections::BTreeSet;

    fn manifest(content: &[u8]) -> Manifest {
        Manifest {
            skill_id: "s".into(),
            label: "0::".parse().unwrap(),
            caps: BTreeSet::new(),
            signer: "k".into(),
            version: 1,
            verification: VerificationLevel::Unverified,
            content_hash: Digest::of(content),
        }
    }

    #[test]
    fn sign_then_verify() {
        let key = SigningKey::from_bytes(&[7; 32]);
        let content = b"# SKILL\nbody".to_vec();
        let m = manifest(&content);
        let sig = sign_skill(&m, &content, &key).unwrap();
        assert!(verify_skill(&m, &content, &sig, &key.verifying_key()).is_ok());

        let mut flipped = content.clone();
        flipped[0] ^= 1;
        assert!(verify_skill(&m, &flipped, &sig, &key.verifying_key()).is_err());

        let other = SigningKey::from_bytes(&[8; 32]);
        assert!(verify_skill(&m, &content, &sig, &other.verifying_key()).is_err());

        let mut m2 = m.clone();
        m2.version = 2;
        assert!(verify_skill(&m2, &content, &sig, &key.verifying_key()).is_err());
    }

    #[test]
    fn hash_mismatch_refused() {
        let key = SigningKey::from_bytes(&[7; 32]);
        let m = manifest(b"one");
        assert!(matches!(
            sign_skill(&m, b"two", &key),
            Err(SignError::HashMismatch { .. })
        ));
    }

    #[test]
    fn message_layout() {
        let m = manifest(b"c");
        let d = Digest::of(b"c");
        let msg = signing_message(&m, &d).unwrap();
        let canon = m.canonicalize().unwrap();
        assert_eq!(&msg[..canon.len()], &canon[..]);
        assert_eq!(msg[canon.len()], 0x0a);
        assert_eq!(&msg[canon.len() + 1..], &d.0);
    }
}
