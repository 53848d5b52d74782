//! Every operator-facing option, in every combination that can start a
//! session, leaves classification, the lifecycle records and the chain in
//! place.

use std::io::Cursor;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use skillgate::audit::{verify_text, AuditLog, AuditMode, AuditRecord, RecordType};
use skillgate::capability::Capability;
use skillgate::config::{drive, open_session, ConfigError, Profile, RunHooks, RunOptions};
use skillgate::gate::{BrokerKind, BrokerRequest, Decision, PendingQueue, Prompter, Reversibility};
use skillgate::lattice::{Label, DEFAULT_MAX_RANK};
use skillgate::skillpkg::VerificationLevel;
use skillgate::synth::{locked_root, signing_key, SkillSpec};
use skillgate::trustroot::TrustRootFile;

struct Approve;

impl Prompter for Approve {
    fn ask(&self, _: &BrokerRequest, _: Duration) -> Option<Decision> {
        Some(Decision::Approve)
    }
}

struct World {
    tmp: tempfile::TempDir,
    root_file: PathBuf,
    pkg: PathBuf,
    policy: PathBuf,
}

fn world(locked: bool) -> World {
    let tmp = tempfile::tempdir().unwrap();
    let key = signing_key(8, "ops");
    let root = locked_root(
        "ops",
        &key,
        Label::public(),
        VerificationLevel::Formal,
        &AuditLog::in_memory(AuditMode::Harness),
    )
    .unwrap();
    let mut doc = TrustRootFile::default();
    for e in root.entries() {
        doc.upsert(e).unwrap();
    }
    doc.locked = locked;
    let root_file = tmp.path().join("root.json");
    doc.write(&root_file).unwrap();
    let pkg = tmp.path().join("skills/writer");
    SkillSpec::new("writer", "ops")
        .level(VerificationLevel::Declared)
        .cap(Capability::FsRead, "")
        .cap(Capability::FsWriteIrrev, "reports")
        .write_package(&pkg, &key)
        .unwrap();
    let policy = tmp.path().join("policy.txt");
    std::fs::write(&policy, "allow fs.write.irrev notes*\n").unwrap();
    World {
        tmp,
        root_file,
        pkg,
        policy,
    }
}

const INPUT: &str = concat!(
    "{\"op\":\"fs.write.irrev\",\"args\":{\"target\":\"reports/a.txt\",\"mode\":\"append\",\"content\":\"+\"},\"originSkillId\":\"writer\"}\n",
    "{\"op\":\"fs.write.irrev\",\"args\":{\"target\":\"notes.txt\",\"mode\":\"append\",\"content\":\"+\"},\"originSkillId\":\"writer\"}\n",
    "{\"op\":\"launch.missiles\",\"args\":{\"target\":\"x\"},\"originSkillId\":\"writer\"}\n",
    "{\"op\":\"tool.invoke\",\"args\":{\"target\":\"deploy\"},\"originSkillId\":\"writer\"}\n",
    "{\"op\":\"fs.write.irrev\",\"args\":{\"target\":\"../root.json\",\"mode\":\"delete\"},\"originSkillId\":\"writer\"}\n",
);

fn records_for<'a>(recs: &'a [AuditRecord], id: &str) -> Vec<&'a AuditRecord> {
    recs.iter()
        .filter(|r| r.request_id.map(|x| x.to_hex()).as_deref() == Some(id))
        .collect()
}

#[test]
fn no_option_disables_the_gate() {
    let brokers = [
        None,
        Some(BrokerKind::DenyAll),
        Some(BrokerKind::AllowAll),
        Some(BrokerKind::Policy),
        Some(BrokerKind::Interactive),
        Some(BrokerKind::Webhook),
    ];
    let mut combos = 0;
    for profile in Profile::ALL {
        for broker in brokers {
            for harness in [false, true] {
                for file_log in [false, true] {
                    for tools in [false, true] {
                        for seed in [None, Some(4)] {
                            run_combo(profile, broker, harness, file_log, tools, seed);
                            combos += 1;
                        }
                    }
                }
            }
        }
    }
    assert_eq!(combos, 2 * 6 * 2 * 2 * 2 * 2);
}

fn run_combo(
    profile: Profile,
    broker: Option<BrokerKind>,
    harness: bool,
    file_log: bool,
    tools: bool,
    seed: Option<u64>,
) {
    let w = world(true);
    let corpus = w.tmp.path().join("corpus");
    std::fs::create_dir_all(corpus.join("reports")).unwrap();
    let label = format!("{profile:?} {broker:?} harness={harness} file={file_log} tools={tools} seed={seed:?}");
    // A struct literal, so a new option cannot be added without being
    // listed here.
    let opts = RunOptions {
        profile,
        root_file: w.root_file.clone(),
        skills: vec![w.pkg.clone()],
        corpus: corpus.clone(),
        audit_path: file_log.then(|| w.tmp.path().join("audit.jsonl")),
        broker,
        policy: Some(w.policy.clone()),
        timeout: Duration::from_secs(5),
        operator_clearance: Label::public(),
        max_rank: DEFAULT_MAX_RANK,
        tools: if tools {
            vec![("deploy".into(), Some(Reversibility::Reversible))]
        } else {
            vec![]
        },
        seed,
        harness,
        replay_state: Some(w.tmp.path().join("replay.json")),
    };
    let queue = Arc::new(PendingQueue::new());
    let done = Arc::new(AtomicBool::new(false));
    let decider = {
        let (q, done) = (queue.clone(), done.clone());
        std::thread::spawn(move || {
            // Approves whatever the webhook broker publishes until the run ends.
            while !done.load(Ordering::SeqCst) {
                for p in q.list() {
                    let _ = q.decide(&p.request.request_id, Decision::Approve);
                }
                std::thread::sleep(Duration::from_millis(1));
            }
        })
    };
    let hooks = RunHooks {
        queue: Some(queue.clone()),
        prompter: Some(Box::new(Approve)),
    };
    let opened = open_session(&opts, hooks).unwrap_or_else(|e| panic!("{label}: {e}"));
    let audit = opened.session.audit().clone();
    let mut out = Vec::new();
    let summary = drive(opened.session, &mut Cursor::new(INPUT), &mut out).unwrap();
    assert!(summary.aborted.is_none(), "{label}");
    done.store(true, Ordering::SeqCst);
    decider.join().unwrap();

    let lines: Vec<Value> = String::from_utf8(out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5, "{label}");
    let outcome = |i: usize| lines[i]["outcome"].as_str().unwrap().to_string();

    assert_eq!(outcome(0), "executed", "{label}");
    let broker_approves = opts.broker_kind() != BrokerKind::DenyAll;
    assert_eq!(
        outcome(1),
        if broker_approves { "executed" } else { "denied" },
        "{label}"
    );
    for i in 2..5 {
        assert_eq!(outcome(i), "rejected", "{label} line {i}");
    }

    let recs = audit.records();
    assert!(audit.verify().is_ok(), "{label}");
    for (i, line) in lines.iter().enumerate() {
        let id = line["requestId"].as_str().unwrap();
        let mine = records_for(&recs, id);
        let types: Vec<RecordType> = mine.iter().map(|r| r.record_type).collect();
        assert_eq!(
            types[..2],
            [RecordType::IrreversibleRequest, RecordType::IrreversibleDecision],
            "{label} line {i}"
        );
        if i >= 2 {
            assert_eq!(
                mine[0].payload_str("route"),
                Some("deny-by-default"),
                "{label} line {i}"
            );
            assert_eq!(
                mine[1].payload_str("brokerId"),
                Some("deny-by-default"),
                "{label} line {i}"
            );
            assert_eq!(types.len(), 2, "{label} line {i}");
        }
    }
    assert!(
        recs.iter().all(|r| r.payload.contains_key("wallclockMs") != harness),
        "{label}"
    );
    if file_log {
        let text = std::fs::read_to_string(w.tmp.path().join("audit.jsonl")).unwrap();
        assert!(verify_text(&text).is_ok(), "{label}");
        assert_eq!(text.lines().count(), recs.len(), "{label}");
    }
    assert!(w.root_file.exists(), "{label}");
}

#[test]
fn profiles_treat_an_unlocked_root_differently() {
    let w = world(false);
    let corpus = w.tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    let mut opts = RunOptions::new(Profile::Strict, w.root_file.clone(), corpus);
    assert!(matches!(
        open_session(&opts, RunHooks::default()),
        Err(ConfigError::RootNotLocked(_))
    ));
    opts.profile = Profile::Dev;
    opts.broker = Some(BrokerKind::DenyAll);
    let opened = open_session(&opts, RunHooks::default()).unwrap();
    let recs = opened.session.audit().records();
    assert_eq!(recs[0].record_type, RecordType::TrustRootLock);
    assert_eq!(
        Profile::parse(Some("permissive")).unwrap_err().to_string(),
        "SKILLGATE_PROFILE must be \"strict\" or \"dev\", got \"permissive\""
    );
}
