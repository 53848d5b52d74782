use std::fs::{File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use serde_json::{Map, Value};
use thiserror::Error;

use super::chain::{verify_text, ChainHead, ChainVerdict};
use super::record::{AuditRecord, RecordType};
use crate::canonical::{to_canonical_bytes, uint};
use crate::hash::{Digest, RequestId};

/// Whether wall-clock time is stamped into records.
///
/// Harness mode leaves it out so seeded runs hash identically; every record
/// carries the logical counter `lt` in both modes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuditMode {
    Harness,
    Production,
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("audit storage failure: {0}")]
    Io(String),
    #[error("audit log is poisoned by an earlier storage failure: {0}")]
    Poisoned(String),
    #[error("record type {0} is written only by the capability gate")]
    Reserved(RecordType),
    #[error("payload is not canonically encodable: {0}")]
    Encoding(String),
    #[error("existing log fails chain verification at seq {0}")]
    Broken(u64),
}

struct LogState {
    records: Vec<AuditRecord>,
    sink: Option<Box<dyn Write + Send>>,
    mode: AuditMode,
    failure: Option<String>,
}

/// The single serialized writer for one hash-chained log.
///
/// Cloning yields another handle to the same log; every append from every
/// handle is serialized through one lock, so sequence numbers and hash links
/// are assigned in a single total order.
#[derive(Clone)]
pub struct AuditLog {
    inner: Arc<Mutex<LogState>>,
}

impl std::fmt::Debug for AuditLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let st = self.lock();
        f.debug_struct("AuditLog")
            .field("len", &st.records.len())
            .field("mode", &st.mode)
            .finish()
    }
}

impl AuditLog {
    pub fn in_memory(mode: AuditMode) -> AuditLog {
        Self::from_parts(Vec::new(), None, mode)
    }

    /// Appends every line to `sink` as it is written.
    pub fn with_sink(sink: Box<dyn Write + Send>, mode: AuditMode) -> AuditLog {
        Self::from_parts(Vec::new(), Some(sink), mode)
    }

    /// Opens (or creates) a JSONL log file. An existing file must verify; new
    /// records continue its chain.
    pub fn open(path: &Path, mode: AuditMode) -> Result<AuditLog, AuditError> {
        let existing = match std::fs::read_to_string(path) {
            Ok(text) => text,
            Err(e) if e.kind() == io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(AuditError::Io(e.to_string())),
        };
        if let ChainVerdict::BrokenAt(seq) = verify_text(&existing) {
            return Err(AuditError::Broken(seq));
        }
        let records = super::chain::parse_text(&existing).map_err(|(seq, _)| AuditError::Broken(seq))?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| AuditError::Io(e.to_string()))?;
        Ok(Self::from_parts(
            records,
            Some(Box::new(BufWriter::new(file)) as Box<dyn Write + Send>),
            mode,
        ))
    }

    pub fn create(path: &Path, mode: AuditMode) -> Result<AuditLog, AuditError> {
        let file = File::create(path).map_err(|e| AuditError::Io(e.to_string()))?;
        Ok(Self::with_sink(Box::new(BufWriter::new(file)), mode))
    }

    fn from_parts(records: Vec<AuditRecord>, sink: Option<Box<dyn Write + Send>>, mode: AuditMode) -> AuditLog {
        AuditLog {
            inner: Arc::new(Mutex::new(LogState {
                records,
                sink,
                mode,
                failure: None,
            })),
        }
    }

    fn lock(&self) -> MutexGuard<'_, LogState> {
        // a panic while holding the lock cannot leave a half-written record in
        // `records`, so the state is still consistent
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn mode(&self) -> AuditMode {
        self.lock().mode
    }

    /// Appends a non-gate record (load outcomes, lock events, aborts).
    ///
    /// Lifecycle records (`irreversible.*`, `reversible.executed`,
    /// `skill.mutation.attempt`) are refused here; only the capability gate
    /// writes them. The unchecked writer it uses is not public:
    ///
    /// ```compile_fail
    /// use skillgate::audit::{AuditLog, AuditMode, RecordType};
    /// let log = AuditLog::in_memory(AuditMode::Harness);
    /// log.append_unchecked(RecordType::IrreversibleExecuted, None, Default::default());
    /// ```
    pub fn append(
        &self,
        record_type: RecordType,
        request_id: Option<RequestId>,
        payload: Map<String, Value>,
    ) -> Result<AuditRecord, AuditError> {
        if record_type.is_gate_event() {
            return Err(AuditError::Reserved(record_type));
        }
        self.append_unchecked(record_type, request_id, payload)
    }

    pub(crate) fn append_unchecked(
        &self,
        record_type: RecordType,
        request_id: Option<RequestId>,
        mut payload: Map<String, Value>,
    ) -> Result<AuditRecord, AuditError> {
        let mut st = self.lock();
        if let Some(f) = &st.failure {
            return Err(AuditError::Poisoned(f.clone()));
        }
        let seq = st.records.len() as u64;
        let prev_hash = st.records.last().map(|r| r.self_hash).unwrap_or(Digest::ZERO);
        payload.insert("lt".into(), uint(seq));
        if st.mode == AuditMode::Production {
            let ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_millis() as u64)
                .unwrap_or(0);
            payload.insert("wallclockMs".into(), uint(ms));
        }
        let body = AuditRecord::body_value(seq, &prev_hash, record_type, request_id.as_ref(), &payload);
        let bytes = to_canonical_bytes(&body).map_err(|e| AuditError::Encoding(e.to_string()))?;
        let record = AuditRecord {
            seq,
            prev_hash,
            record_type,
            request_id,
            payload,
            self_hash: Digest::of(&bytes),
        };
        if let Some(sink) = st.sink.as_mut() {
            let mut line = record.to_line();
            line.push('\n');
            let res = sink.write_all(line.as_bytes()).and_then(|_| sink.flush());
            if let Err(e) = res {
                let msg = e.to_string();
                st.failure = Some(msg.clone());
                return Err(AuditError::Io(msg));
            }
        }
        st.records.push(record.clone());
        Ok(record)
    }

    pub fn len(&self) -> usize {
        self.lock().records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_poisoned(&self) -> bool {
        self.lock().failure.is_some()
    }

    /// Snapshot copy of every record.
    pub fn records(&self) -> Vec<AuditRecord> {
        self.lock().records.clone()
    }

    pub fn records_from(&self, seq: u64) -> Vec<AuditRecord> {
        let st = self.lock();
        st.records.iter().skip(seq as usize).cloned().collect()
    }

    pub fn head(&self) -> Option<ChainHead> {
        let st = self.lock();
        st.records.last().map(|r| ChainHead {
            len: r.seq + 1,
            hash: r.self_hash,
        })
    }

    /// The JSONL storage form, one record per line.
    pub fn to_jsonl(&self) -> String {
        let st = self.lock();
        let mut out = String::new();
        for r in &st.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    pub fn verify(&self) -> ChainVerdict {
        super::chain::verify_records(&self.lock().records)
    }
}
