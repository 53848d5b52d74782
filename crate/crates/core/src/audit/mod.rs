//! Hash-chained, append-only audit log.
//!
//! Records are stored one per line in canonical JSON. Each record carries the
//! previous record's `selfHash` as `prevHash` (genesis links to 32 zero
//! bytes) and its own `selfHash` over the canonical bytes of every other
//! field.

mod chain;
mod log;
mod record;

pub(crate) use chain::executed_ok;
pub use chain::{
    extract_s, multiset, parse_text, verify_records, verify_records_anchored, verify_text, verify_text_anchored,
    ChainError, ChainHead, ChainVerdict, SEntry,
};
pub use log::{AuditError, AuditLog, AuditMode};
pub use record::{AuditRecord, RecordParseError, RecordType};
