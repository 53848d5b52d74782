use std::collections::BTreeMap;

use thiserror::Error;

use super::record::{AuditRecord, RecordParseError, RecordType};
use crate::hash::{Digest, RequestId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainVerdict {
    Ok,
    /// Lowest sequence position at which the chain no longer verifies.
    BrokenAt(u64),
}

impl ChainVerdict {
    pub fn is_ok(&self) -> bool {
        matches!(self, ChainVerdict::Ok)
    }
}

/// Externally retained tail of a log: its length and last self-hash.
///
/// A bare chain cannot reveal truncation of its final records; verifying
/// against a retained head can.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChainHead {
    pub len: u64,
    pub hash: Digest,
}

impl ChainHead {
    /// `<len>:<hex hash>`
    pub fn parse(text: &str) -> Result<ChainHead, String> {
        let (len, hash) = text
            .split_once(':')
            .ok_or_else(|| format!("expected <len>:<hash>, got {text:?}"))?;
        Ok(ChainHead {
            len: len.parse().map_err(|_| format!("bad length {len:?}"))?,
            hash: hash.parse()?,
        })
    }
}

impl std::fmt::Display for ChainHead {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.len, self.hash)
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("audit chain broken at seq {0}")]
    BrokenAt(u64),
}

fn check_record(index: u64, expected_prev: &Digest, record: &AuditRecord) -> bool {
    record.seq == index
        && record.prev_hash == *expected_prev
        && record.compute_hash().map(|h| h == record.self_hash).unwrap_or(false)
}

pub fn verify_records(records: &[AuditRecord]) -> ChainVerdict {
    let mut prev = Digest::ZERO;
    for (i, r) in records.iter().enumerate() {
        if !check_record(i as u64, &prev, r) {
            return ChainVerdict::BrokenAt(i as u64);
        }
        prev = r.self_hash;
    }
    ChainVerdict::Ok
}

/// Splits storage text into lines. Every line, including the last, must be
/// newline-terminated.
fn lines(text: &str) -> (Vec<&str>, bool) {
    if text.is_empty() {
        return (Vec::new(), true);
    }
    let terminated = text.ends_with('\n');
    let body = if terminated { &text[..text.len() - 1] } else { text };
    (body.split('\n').collect(), terminated)
}

/// Parses storage text. On failure returns the position of the first bad line.
pub fn parse_text(text: &str) -> Result<Vec<AuditRecord>, (u64, RecordParseError)> {
    let (lines, terminated) = lines(text);
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        let rec = AuditRecord::from_line(line).map_err(|e| (i as u64, e))?;
        out.push(rec);
    }
    if !terminated {
        return Err((
            out.len().saturating_sub(1) as u64,
            RecordParseError::Syntax("missing final newline".into()),
        ));
    }
    Ok(out)
}

/// Verifies a JSONL log as stored: every line must be canonical, parse, carry
/// its position as `seq`, link to its predecessor and hash to its `selfHash`.
pub fn verify_text(text: &str) -> ChainVerdict {
    let (lines, terminated) = lines(text);
    let mut prev = Digest::ZERO;
    for (i, line) in lines.iter().enumerate() {
        let i = i as u64;
        match AuditRecord::from_line(line) {
            Ok(r) if check_record(i, &prev, &r) => prev = r.self_hash,
            _ => return ChainVerdict::BrokenAt(i),
        }
    }
    if !terminated {
        return ChainVerdict::BrokenAt(lines.len().saturating_sub(1) as u64);
    }
    ChainVerdict::Ok
}

/// [`verify_text`] plus a check that the log still reaches `head`.
pub fn verify_text_anchored(text: &str, head: &ChainHead) -> ChainVerdict {
    let verdict = verify_text(text);
    if !verdict.is_ok() {
        return verdict;
    }
    let records = match parse_text(text) {
        Ok(r) => r,
        Err((seq, _)) => return ChainVerdict::BrokenAt(seq),
    };
    anchor_check(&records, head)
}

pub fn verify_records_anchored(records: &[AuditRecord], head: &ChainHead) -> ChainVerdict {
    let verdict = verify_records(records);
    if !verdict.is_ok() {
        return verdict;
    }
    anchor_check(records, head)
}

fn anchor_check(records: &[AuditRecord], head: &ChainHead) -> ChainVerdict {
    if head.len == 0 {
        return ChainVerdict::Ok;
    }
    let n = records.len() as u64;
    if n < head.len {
        return ChainVerdict::BrokenAt(n);
    }
    let at = head.len - 1;
    if records[at as usize].self_hash != head.hash {
        return ChainVerdict::BrokenAt(at);
    }
    ChainVerdict::Ok
}

/// One approved-and-executed entry of the audited set.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SEntry {
    pub op: String,
    pub target: String,
    pub request_id: Option<RequestId>,
    pub seq: u64,
}

/// The audited set: every `irreversible.executed` record with `ok = true`,
/// projected onto `(op, target)`. Errors and denials contribute nothing.
pub fn extract_s(records: &[AuditRecord]) -> Result<Vec<SEntry>, ChainError> {
    if let ChainVerdict::BrokenAt(seq) = verify_records(records) {
        return Err(ChainError::BrokenAt(seq));
    }
    Ok(executed_ok(records))
}

/// The `extract_s` projection over a slice that is assumed already verified
/// (a sub-range of a verified chain).
pub(crate) fn executed_ok(records: &[AuditRecord]) -> Vec<SEntry> {
    records
        .iter()
        .filter(|r| r.record_type == RecordType::IrreversibleExecuted && r.payload_bool("ok") == Some(true))
        .filter_map(|r| {
            Some(SEntry {
                op: r.payload_str("op")?.to_string(),
                target: r.payload_str("target")?.to_string(),
                request_id: r.request_id,
                seq: r.seq,
            })
        })
        .collect()
}

/// Counts `(op, target)` occurrences.
pub fn multiset(entries: &[SEntry]) -> BTreeMap<(String, String), usize> {
    let mut m = BTreeMap::new();
    for e in entries {
        *m.entry((e.op.clone(), e.target.clone())).or_insert(0) += 1;
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audit::{AuditLog, AuditMode};
    use serde_json::{json, Map, Value};

    fn payload(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    fn sample_log(n: usize) -> AuditLog {
        let log = AuditLog::in_memory(AuditMode::Harness);
        for i in 0..n {
            log.append(
                RecordType::SkillLoadOk,
                None,
                payload(json!({"skillId": format!("s{i}")})),
            )
            .unwrap();
        }
        log
    }

    #[test]
    fn untampered_verifies() {
        for n in [0, 1, 5] {
            let log = sample_log(n);
            assert_eq!(verify_text(&log.to_jsonl()), ChainVerdict::Ok);
            assert_eq!(log.verify(), ChainVerdict::Ok);
        }
    }

    #[test]
    fn payload_flip_breaks_at_record() {
        let log = sample_log(5);
        let text = log.to_jsonl().replacen("s3", "s9", 1);
        assert_eq!(verify_text(&text), ChainVerdict::BrokenAt(3));
    }

    #[test]
    fn splice_breaks_at_position() {
        let log = sample_log(5);
        let text = log.to_jsonl();
        let mut spliced: Vec<&str> = text.lines().collect();
        spliced.remove(2);
        let text = spliced.join("\n") + "\n";
        assert_eq!(verify_text(&text), ChainVerdict::BrokenAt(2));
    }

    #[test]
    fn truncation_needs_head() {
        let log = sample_log(4);
        let head = log.head().unwrap();
        let lines: Vec<String> = log.to_jsonl().lines().map(String::from).collect();
        let truncated = lines[..3].join("\n") + "\n";
        assert_eq!(verify_text(&truncated), ChainVerdict::Ok);
        assert_eq!(verify_text_anchored(&truncated, &head), ChainVerdict::BrokenAt(3));
        assert_eq!(verify_text_anchored(&log.to_jsonl(), &head), ChainVerdict::Ok);
        assert_eq!(ChainHead::parse(&head.to_string()).unwrap(), head);
    }

    #[test]
    fn missing_newline_is_broken() {
        let log = sample_log(2);
        let text = log.to_jsonl();
        assert_eq!(verify_text(text.trim_end()), ChainVerdict::BrokenAt(1));
    }

    #[test]
    fn extract_s_filters() {
        let log = AuditLog::in_memory(AuditMode::Harness);
        assert!(extract_s(&log.records()).unwrap().is_empty());
        log.append_unchecked(
            RecordType::IrreversibleExecuted,
            None,
            payload(json!({"op": "fs.write.irrev", "target": "f1", "ok": true})),
        )
        .unwrap();
        log.append_unchecked(
            RecordType::IrreversibleError,
            None,
            payload(json!({"op": "fs.write.irrev", "target": "f2", "error": "vanished"})),
        )
        .unwrap();
        let s = extract_s(&log.records()).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].op.as_str(), s[0].target.as_str()), ("fs.write.irrev", "f1"));
    }

    #[test]
    fn extract_s_requires_chain() {
        let log = sample_log(3);
        let mut records = log.records();
        records[1].payload.insert("x".into(), json!(1));
        assert!(matches!(extract_s(&records), Err(ChainError::BrokenAt(1))));
    }
}
