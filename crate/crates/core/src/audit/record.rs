use std::fmt;
use std::str::FromStr;

use serde_json::{Map, Value};
use thiserror::Error;

use crate::canonical::{self, parse_strict, to_canonical_bytes, uint};
use crate::hash::{Digest, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordType {
    SkillLoadOk,
    SkillLoadReject,
    TrustRootLock,
    IrreversibleRequest,
    IrreversibleDecision,
    IrreversibleExecuted,
    IrreversibleError,
    ReversibleExecuted,
    SkillMutationAttempt,
    SessionAbort,
}

impl RecordType {
    pub const ALL: [RecordType; 10] = [
        RecordType::SkillLoadOk,
        RecordType::SkillLoadReject,
        RecordType::TrustRootLock,
        RecordType::IrreversibleRequest,
        RecordType::IrreversibleDecision,
        RecordType::IrreversibleExecuted,
        RecordType::IrreversibleError,
        RecordType::ReversibleExecuted,
        RecordType::SkillMutationAttempt,
        RecordType::SessionAbort,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RecordType::SkillLoadOk => "skill.load.ok",
            RecordType::SkillLoadReject => "skill.load.reject",
            RecordType::TrustRootLock => "trustroot.lock",
            RecordType::IrreversibleRequest => "irreversible.request",
            RecordType::IrreversibleDecision => "irreversible.decision",
            RecordType::IrreversibleExecuted => "irreversible.executed",
            RecordType::IrreversibleError => "irreversible.error",
            RecordType::ReversibleExecuted => "reversible.executed",
            RecordType::SkillMutationAttempt => "skill.mutation.attempt",
            RecordType::SessionAbort => "session.abort",
        }
    }

    /// Record types only the gate may write.
    pub fn is_gate_event(self) -> bool {
        matches!(
            self,
            RecordType::IrreversibleRequest
                | RecordType::IrreversibleDecision
                | RecordType::IrreversibleExecuted
                | RecordType::IrreversibleError
                | RecordType::ReversibleExecuted
                | RecordType::SkillMutationAttempt
        )
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RecordType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RecordType::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown record type {s:?}"))
    }
}

#[derive(Debug, Error)]
pub enum RecordParseError {
    #[error("malformed record: {0}")]
    Syntax(String),
    #[error("record line is not in canonical form")]
    NotCanonical,
    #[error("record field {0}: {1}")]
    Field(&'static str, String),
}

/// One hash-chained log entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditRecord {
    pub seq: u64,
    pub prev_hash: Digest,
    pub record_type: RecordType,
    pub request_id: Option<RequestId>,
    pub payload: Map<String, Value>,
    pub self_hash: Digest,
}

impl AuditRecord {
    pub(crate) fn body_value(
        seq: u64,
        prev_hash: &Digest,
        record_type: RecordType,
        request_id: Option<&RequestId>,
        payload: &Map<String, Value>,
    ) -> Value {
        let mut obj = Map::new();
        obj.insert("seq".into(), uint(seq));
        obj.insert("prevHash".into(), Value::String(prev_hash.to_hex()));
        obj.insert("type".into(), Value::String(record_type.as_str().into()));
        if let Some(rid) = request_id {
            obj.insert("requestId".into(), Value::String(rid.to_hex()));
        }
        obj.insert("payload".into(), Value::Object(payload.clone()));
        Value::Object(obj)
    }

    /// Hash over the canonical bytes of everything except `selfHash`.
    pub fn compute_hash(&self) -> Result<Digest, canonical::EncodingError> {
        let body = Self::body_value(
            self.seq,
            &self.prev_hash,
            self.record_type,
            self.request_id.as_ref(),
            &self.payload,
        );
        Ok(Digest::of(&to_canonical_bytes(&body)?))
    }

    pub fn to_value(&self) -> Value {
        let mut body = Self::body_value(
            self.seq,
            &self.prev_hash,
            self.record_type,
            self.request_id.as_ref(),
            &self.payload,
        );
        body.as_object_mut()
            .expect("body is an object")
            .insert("selfHash".into(), Value::String(self.self_hash.to_hex()));
        body
    }

    /// The storage line (without trailing newline).
    pub fn to_line(&self) -> String {
        canonical::to_canonical_string(&self.to_value()).expect("payloads are validated at append")
    }

    /// Parses one storage line. The line must be canonical; hashes are not
    /// checked here.
    pub fn from_line(line: &str) -> Result<AuditRecord, RecordParseError> {
        let value = parse_strict(line.as_bytes()).map_err(|e| RecordParseError::Syntax(e.message().to_string()))?;
        let canon = to_canonical_bytes(&value).map_err(|e| RecordParseError::Syntax(e.to_string()))?;
        if canon != line.as_bytes() {
            return Err(RecordParseError::NotCanonical);
        }
        let Value::Object(mut obj) = value else {
            return Err(RecordParseError::Syntax("record is not an object".into()));
        };
        let seq = obj
            .remove("seq")
            .and_then(|v| v.as_u64())
            .ok_or(RecordParseError::Field(
                "seq",
                "missing or not an unsigned integer".into(),
            ))?;
        let prev_hash = take_str(&mut obj, "prevHash")?
            .parse()
            .map_err(|e| RecordParseError::Field("prevHash", e))?;
        let self_hash = take_str(&mut obj, "selfHash")?
            .parse()
            .map_err(|e| RecordParseError::Field("selfHash", e))?;
        let record_type = take_str(&mut obj, "type")?
            .parse()
            .map_err(|e| RecordParseError::Field("type", e))?;
        let request_id = match obj.remove("requestId") {
            None => None,
            Some(Value::String(s)) => Some(s.parse().map_err(|e| RecordParseError::Field("requestId", e))?),
            Some(_) => return Err(RecordParseError::Field("requestId", "not a string".into())),
        };
        let payload = match obj.remove("payload") {
            Some(Value::Object(m)) => m,
            _ => return Err(RecordParseError::Field("payload", "missing or not an object".into())),
        };
        if let Some(extra) = obj.keys().next() {
            return Err(RecordParseError::Syntax(format!("unknown field {extra:?}")));
        }
        Ok(AuditRecord {
            seq,
            prev_hash,
            record_type,
            request_id,
            payload,
            self_hash,
        })
    }

    pub fn payload_str(&self, key: &str) -> Option<&str> {
        self.payload.get(key).and_then(Value::as_str)
    }

    pub fn payload_bool(&self, key: &str) -> Option<bool> {
        self.payload.get(key).and_then(Value::as_bool)
    }
}

fn take_str(obj: &mut Map<String, Value>, key: &'static str) -> Result<String, RecordParseError> {
    match obj.remove(key) {
        Some(Value::String(s)) => Ok(s),
        _ => Err(RecordParseError::Field(key, "missing or not a string".into())),
    }
}
