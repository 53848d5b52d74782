//! Reconciliation of the observed corpus delta D against the audited set S.
//!
//! Both sides are projected onto `(op, target)` and compared as multisets.
//! Whole-run mode compares one pair of snapshots; interval mode compares a
//! sequence of checkpoints, one log range per interval, so repeated writes to
//! one target keep their multiplicity.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use thiserror::Error;

use crate::audit::{executed_ok, verify_records, AuditRecord, ChainVerdict, RecordType, SEntry};
use crate::capability::Capability;
use crate::hash::Digest;

const IRREV: &str = "fs.write.irrev";

#[derive(Debug, Error)]
pub enum BicondError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("snapshot line {line}: {message}")]
    SnapshotFormat { line: usize, message: String },
    #[error("audit chain broken at seq {0}")]
    Chain(u64),
    #[error("checkpoint log length {len} exceeds log length {max}")]
    Checkpoint { len: usize, max: usize },
}

/// Relative path → SHA-256 of content, over a corpus root.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusSnapshot(pub BTreeMap<String, Digest>);

impl CorpusSnapshot {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sorted `hash path` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (path, d) in &self.0 {
            out.push_str(&d.to_hex());
            out.push(' ');
            out.push_str(path);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<CorpusSnapshot, BicondError> {
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let err = |message: &str| BicondError::SnapshotFormat {
                line: i + 1,
                message: message.to_string(),
            };
            if line.is_empty() {
                continue;
            }
            let (hash, path) = line.split_once(' ').ok_or_else(|| err("expected `<hash> <path>`"))?;
            let d: Digest = hash.parse().map_err(|e: String| err(&e))?;
            if !is_relative_path(path) {
                return Err(err("path must be relative and normalized"));
            }
            if map.insert(path.to_string(), d).is_some() {
                return Err(err("duplicate path"));
            }
        }
        Ok(CorpusSnapshot(map))
    }
}

/// True for a normalized relative path: no leading `/`, no empty, `.` or
/// `..` components.
pub fn is_relative_path(p: &str) -> bool {
    !p.is_empty() && !p.starts_with('/') && p.split('/').all(|c| !c.is_empty() && c != "." && c != "..")
}

/// Per-file digests of every regular file under `root`. Symbolic links are
/// skipped, not followed.
pub fn snapshot(root: &Path) -> Result<CorpusSnapshot, BicondError> {
    let mut map = BTreeMap::new();
    walk(root, "", &mut map)?;
    Ok(CorpusSnapshot(map))
}

fn walk(dir: &Path, prefix: &str, out: &mut BTreeMap<String, Digest>) -> Result<(), BicondError> {
    let io = |path: &Path| {
        let path = path.display().to_string();
        move |source| BicondError::Io { path, source }
    };
    for entry in std::fs::read_dir(dir).map_err(io(dir))? {
        let entry = entry.map_err(io(dir))?;
        let ft = entry.file_type().map_err(io(&entry.path()))?;
        let Some(name) = entry.file_name().to_str().map(str::to_string) else {
            continue;
        };
        let rel = if prefix.is_empty() {
            name
        } else {
            format!("{prefix}/{name}")
        };
        if ft.is_dir() {
            walk(&entry.path(), &rel, out)?;
        } else if ft.is_file() {
            let bytes = std::fs::read(entry.path()).map_err(io(&entry.path()))?;
            out.insert(rel, Digest::of(&bytes));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChangeKind {
    Created,
    Modified,
    Deleted,
}

impl ChangeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Created => "created",
            ChangeKind::Modified => "modified",
            ChangeKind::Deleted => "deleted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct DeltaEntry {
    pub op: String,
    pub target: String,
    pub kind: ChangeKind,
}

impl fmt::Display for DeltaEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) {}", self.op, self.target, self.kind.as_str())
    }
}

pub fn compute_delta(s0: &CorpusSnapshot, s1: &CorpusSnapshot) -> Vec<DeltaEntry> {
    let entry = |target: &str, kind| DeltaEntry {
        op: IRREV.to_string(),
        target: target.to_string(),
        kind,
    };
    let mut out = Vec::new();
    for (path, d0) in &s0.0 {
        match s1.0.get(path) {
            None => out.push(entry(path, ChangeKind::Deleted)),
            Some(d1) if d1 != d0 => out.push(entry(path, ChangeKind::Modified)),
            _ => {}
        }
    }
    for path in s1.0.keys() {
        if !s0.0.contains_key(path) {
            out.push(entry(path, ChangeKind::Created));
        }
    }
    out.sort();
    out
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BicondVerdict {
    pub pass: bool,
    pub unexplained_changes: Vec<DeltaEntry>,
    pub unmatched_executions: Vec<SEntry>,
}

/// Multiset difference of two keyed lists: the items of `a` beyond the
/// count of their key in `b`, and vice versa. Surplus items are taken from
/// the end of each list.
pub fn reconcile<A, B, K: Ord>(
    a: &[A],
    b: &[B],
    ka: impl Fn(&A) -> K,
    kb: impl Fn(&B) -> K,
) -> (Vec<usize>, Vec<usize>) {
    let mut ca: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, x) in a.iter().enumerate() {
        ca.entry(ka(x)).or_default().push(i);
    }
    let mut cb: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (i, x) in b.iter().enumerate() {
        cb.entry(kb(x)).or_default().push(i);
    }
    let surplus = |mine: &BTreeMap<K, Vec<usize>>, theirs: &BTreeMap<K, Vec<usize>>| {
        let mut out = Vec::new();
        for (k, idx) in mine {
            let n = theirs.get(k).map_or(0, Vec::len);
            if idx.len() > n {
                out.extend_from_slice(&idx[n..]);
            }
        }
        out.sort_unstable();
        out
    };
    (surplus(&ca, &cb), surplus(&cb, &ca))
}

/// Multiset equality of D and S on `(op, target)`.
pub fn check(delta: &[DeltaEntry], s: &[SEntry]) -> BicondVerdict {
    let (ud, us) = reconcile(
        delta,
        s,
        |d| (d.op.clone(), d.target.clone()),
        |e| (e.op.clone(), e.target.clone()),
    );
    let unexplained_changes: Vec<_> = ud.into_iter().map(|i| delta[i].clone()).collect();
    let unmatched_executions: Vec<_> = us.into_iter().map(|i| s[i].clone()).collect();
    BicondVerdict {
        pass: unexplained_changes.is_empty() && unmatched_executions.is_empty(),
        unexplained_changes,
        unmatched_executions,
    }
}

/// Diagnostic shape of a failure. The verdict itself stays binary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum FailureTag {
    /// Corpus change with no executed record: gate bypass.
    F1Shaped,
    /// Executed record with no corpus change: forgery or silent host failure.
    F2F3Shaped,
    /// Both directions within one interval: the op landed elsewhere.
    F4Shaped,
    /// Corpus change in an interval where the agent issued no gated call.
    External,
}

impl FailureTag {
    pub fn as_str(self) -> &'static str {
        match self {
            FailureTag::F1Shaped => "F1-shaped",
            FailureTag::F2F3Shaped => "F2/F3-shaped",
            FailureTag::F4Shaped => "F4-shaped",
            FailureTag::External => "external (not agent-attributable)",
        }
    }
}

/// A snapshot paired with the log length at the moment it was taken.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub snapshot: CorpusSnapshot,
    pub log_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntervalWitness {
    pub interval: usize,
    pub unexplained_changes: Vec<DeltaEntry>,
    pub unmatched_executions: Vec<SEntry>,
    pub tag: FailureTag,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BicondReport {
    pub verdict: BicondVerdict,
    pub witnesses: Vec<IntervalWitness>,
    /// Executed records outside the corpus scope (absolute targets, other
    /// capabilities). Reported, never compared.
    pub out_of_scope: Vec<SEntry>,
    /// Targets removed from D because their only audited activity was a
    /// reversible commit.
    pub reversible_only: Vec<String>,
}

impl BicondReport {
    pub fn tags(&self) -> BTreeSet<FailureTag> {
        self.witnesses.iter().map(|w| w.tag).collect()
    }

    pub fn render(&self) -> String {
        let mut out = format!("verdict: {}\n", if self.verdict.pass { "PASS" } else { "FAIL" });
        for w in &self.witnesses {
            out.push_str(&format!("interval {}: {}\n", w.interval, w.tag.as_str()));
            for d in &w.unexplained_changes {
                out.push_str(&format!("  unexplained change {d}\n"));
            }
            for s in &w.unmatched_executions {
                out.push_str(&format!(
                    "  unmatched execution ({}, {}) seq {}\n",
                    s.op, s.target, s.seq
                ));
            }
        }
        for s in &self.out_of_scope {
            out.push_str(&format!(
                "note: out-of-scope execution ({}, {}) seq {}\n",
                s.op, s.target, s.seq
            ));
        }
        for t in &self.reversible_only {
            out.push_str(&format!("note: reversible-only target {t}\n"));
        }
        out
    }
}

fn in_scope(e: &SEntry) -> bool {
    e.op == IRREV && is_relative_path(&e.target)
}

fn reversible_targets(records: &[AuditRecord]) -> BTreeSet<String> {
    records
        .iter()
        .filter(|r| r.record_type == RecordType::ReversibleExecuted)
        .filter(|r| r.payload_str("op") == Some(Capability::FsWriteRev.token()))
        .filter(|r| r.payload_str("effect") == Some("commit"))
        .filter_map(|r| r.payload_str("target").map(str::to_string))
        .collect()
}

fn has_gate_activity(records: &[AuditRecord]) -> bool {
    records.iter().any(|r| {
        matches!(
            r.record_type,
            RecordType::IrreversibleRequest | RecordType::ReversibleExecuted | RecordType::SkillMutationAttempt
        )
    })
}

fn classify(unexplained: bool, unmatched: bool, agent_active: bool) -> FailureTag {
    match (unexplained, unmatched) {
        (true, true) => FailureTag::F4Shaped,
        (true, false) if !agent_active => FailureTag::External,
        (true, false) => FailureTag::F1Shaped,
        _ => FailureTag::F2F3Shaped,
    }
}

/// Checks one interval; S entries are the executed records in `slice`.
fn check_interval(
    index: usize,
    s0: &CorpusSnapshot,
    s1: &CorpusSnapshot,
    slice: &[AuditRecord],
    collapse: bool,
    report: &mut BicondReport,
) {
    let (s, out): (Vec<SEntry>, Vec<SEntry>) = executed_ok(slice).into_iter().partition(in_scope);
    report.out_of_scope.extend(out);
    let mut s = s;
    if collapse {
        let mut seen = BTreeSet::new();
        s.retain(|e| seen.insert((e.op.clone(), e.target.clone())));
    }
    let s_targets: BTreeSet<&str> = s.iter().map(|e| e.target.as_str()).collect();
    let rev_only: BTreeSet<String> = reversible_targets(slice)
        .into_iter()
        .filter(|t| !s_targets.contains(t.as_str()))
        .collect();
    let delta: Vec<DeltaEntry> = compute_delta(s0, s1)
        .into_iter()
        .filter(|d| !rev_only.contains(&d.target))
        .collect();
    report.reversible_only.extend(rev_only);
    let v = check(&delta, &s);
    if !v.pass {
        let tag = classify(
            !v.unexplained_changes.is_empty(),
            !v.unmatched_executions.is_empty(),
            has_gate_activity(slice),
        );
        report.witnesses.push(IntervalWitness {
            interval: index,
            unexplained_changes: v.unexplained_changes.clone(),
            unmatched_executions: v.unmatched_executions.clone(),
            tag,
        });
        report.verdict.unexplained_changes.extend(v.unexplained_changes);
        report.verdict.unmatched_executions.extend(v.unmatched_executions);
    }
}

fn verified(records: &[AuditRecord]) -> Result<(), BicondError> {
    match verify_records(records) {
        ChainVerdict::Ok => Ok(()),
        ChainVerdict::BrokenAt(seq) => Err(BicondError::Chain(seq)),
    }
}

/// Whole-run check between a baseline and a final snapshot. End-to-end
/// snapshots cannot see how often a target changed, so S is collapsed to a
/// set on `(op, target)` before comparison.
pub fn check_run(
    s0: &CorpusSnapshot,
    s1: &CorpusSnapshot,
    records: &[AuditRecord],
) -> Result<BicondReport, BicondError> {
    verified(records)?;
    let mut report = BicondReport::default();
    check_interval(0, s0, s1, records, true, &mut report);
    report.verdict.pass = report.witnesses.is_empty();
    Ok(report)
}

/// Interval check over a checkpoint sequence. Each interval compares the
/// delta between consecutive snapshots with the executed records appended
/// between them, as exact multisets.
pub fn check_intervals(checkpoints: &[Checkpoint], records: &[AuditRecord]) -> Result<BicondReport, BicondError> {
    intervals(checkpoints, records, false)
}

/// Like [`check_intervals`], for intervals that may touch one target more
/// than once: each interval's S is collapsed to a set first.
pub fn check_rounds(checkpoints: &[Checkpoint], records: &[AuditRecord]) -> Result<BicondReport, BicondError> {
    intervals(checkpoints, records, true)
}

fn intervals(checkpoints: &[Checkpoint], records: &[AuditRecord], collapse: bool) -> Result<BicondReport, BicondError> {
    verified(records)?;
    let mut report = BicondReport::default();
    for c in checkpoints {
        if c.log_len > records.len() {
            return Err(BicondError::Checkpoint {
                len: c.log_len,
                max: records.len(),
            });
        }
    }
    for (i, pair) in checkpoints.windows(2).enumerate() {
        let (a, b) = (&pair[0], &pair[1]);
        let slice = &records[a.log_len.min(b.log_len)..b.log_len];
        check_interval(i, &a.snapshot, &b.snapshot, slice, collapse, &mut report);
    }
    report.verdict.pass = report.witnesses.is_empty();
    Ok(report)
}
