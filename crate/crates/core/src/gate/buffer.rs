use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde_json::{Map, Value};
use thiserror::Error;

use super::host::{FsWrite, Host, HostError};
use crate::audit::{AuditError, AuditLog, RecordType};
use crate::capability::Capability;
use crate::hash::{Digest, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BufferState {
    Open,
    Committed,
    RolledBack,
}

#[derive(Debug, Error)]
pub enum BufferError {
    #[error("ClosedBufferError: buffer is {0:?}")]
    Closed(BufferState),
    #[error("host failure during commit, all staged changes restored: {0}")]
    Host(HostError),
    #[error("audit failure during commit, all staged changes restored: {0}")]
    Audit(AuditError),
}

/// One touched target: the image before the first staged write and the
/// latest staged content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Staged {
    pub target: String,
    pub path: PathBuf,
    pub before: Option<Vec<u8>>,
    pub after: Vec<u8>,
    pub request_id: RequestId,
    pub origin_skill_id: String,
}

/// Holds reversible writes in memory. Nothing reaches the host until
/// [`commit`](Self::commit); a failed commit restores every before-image.
#[derive(Debug)]
pub struct TransactionBuffer {
    staged: Vec<Staged>,
    index: BTreeMap<PathBuf, usize>,
    state: BufferState,
}

impl Default for TransactionBuffer {
    fn default() -> Self {
        TransactionBuffer {
            staged: Vec::new(),
            index: BTreeMap::new(),
            state: BufferState::Open,
        }
    }
}

impl TransactionBuffer {
    pub fn new() -> TransactionBuffer {
        TransactionBuffer::default()
    }

    pub fn state(&self) -> BufferState {
        self.state
    }

    pub fn staged(&self) -> &[Staged] {
        &self.staged
    }

    fn ensure_open(&self) -> Result<(), BufferError> {
        match self.state {
            BufferState::Open => Ok(()),
            s => Err(BufferError::Closed(s)),
        }
    }

    /// Stages `bytes` for `path`. The before-image is captured on first touch.
    pub fn write(
        &mut self,
        host: &mut dyn Host,
        target: &str,
        path: &Path,
        bytes: Vec<u8>,
        request_id: RequestId,
        origin_skill_id: &str,
    ) -> Result<(), BufferError> {
        self.ensure_open()?;
        if let Some(&i) = self.index.get(path) {
            self.staged[i].after = bytes;
            return Ok(());
        }
        let before = host.read(path).map_err(BufferError::Host)?;
        self.index.insert(path.to_path_buf(), self.staged.len());
        self.staged.push(Staged {
            target: target.to_string(),
            path: path.to_path_buf(),
            before,
            after: bytes,
            request_id,
            origin_skill_id: origin_skill_id.to_string(),
        });
        Ok(())
    }

    /// Read-your-writes view of a staged target.
    pub fn read(&self, path: &Path) -> Option<&[u8]> {
        self.index.get(path).map(|&i| self.staged[i].after.as_slice())
    }

    /// Applies every staged change, then audits one `reversible.executed`
    /// per target. Any failure restores all before-images.
    pub fn commit(&mut self, host: &mut dyn Host, audit: &AuditLog) -> Result<usize, BufferError> {
        self.ensure_open()?;
        let mut applied = 0;
        for s in &self.staged {
            if let Err(e) = host.write(&s.path, &FsWrite::Overwrite(s.after.clone())) {
                self.restore(host, applied);
                return Err(BufferError::Host(e));
            }
            applied += 1;
        }
        for s in &self.staged {
            let mut p = Map::new();
            p.insert("op".into(), Value::String(Capability::FsWriteRev.token().into()));
            p.insert("target".into(), Value::String(s.target.clone()));
            p.insert("effect".into(), Value::String("commit".into()));
            p.insert("originSkillId".into(), Value::String(s.origin_skill_id.clone()));
            p.insert("postHash".into(), Value::String(Digest::of(&s.after).to_hex()));
            if let Err(e) = audit.append_unchecked(RecordType::ReversibleExecuted, Some(s.request_id), p) {
                self.restore(host, applied);
                return Err(BufferError::Audit(e));
            }
        }
        self.state = BufferState::Committed;
        Ok(self.staged.len())
    }

    fn restore(&mut self, host: &mut dyn Host, applied: usize) {
        for s in self.staged[..applied].iter().rev() {
            let res = match &s.before {
                Some(b) => host.write(&s.path, &FsWrite::Overwrite(b.clone())),
                None => host.write(&s.path, &FsWrite::Delete),
            };
            if let Err(e) = res {
                log::error!("could not restore {}: {e}", s.path.display());
            }
        }
        self.state = BufferState::RolledBack;
    }

    /// Discards staged changes. Nothing was applied, so every target still
    /// holds its before-image.
    pub fn rollback(&mut self) -> Result<usize, BufferError> {
        self.ensure_open()?;
        self.state = BufferState::RolledBack;
        Ok(self.staged.len())
    }
}
