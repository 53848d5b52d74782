use skillgate::audit::{AuditLog, AuditMode, RecordType};
use skillgate::canonical::to_canonical_bytes;
use skillgate::capability::Capability;
use skillgate::lattice::{Label, DEFAULT_MAX_RANK};
use skillgate::skillpkg::{load_skill, LoadContext, ReplayGuard, SkillArtifact, VerificationLevel};
use skillgate::synth::{locked_root, signing_key, SkillSpec};
use skillgate::trustroot::TrustRoot;

fn l(text: &str) -> Label {
    text.parse().unwrap()
}

struct Env {
    log: AuditLog,
    root: TrustRoot,
    operator: Label,
    replay: ReplayGuard,
}

/// Signer "ops" may sign up to 2:hr: at declared; the operator holds 1::.
fn env() -> Env {
    let log = AuditLog::in_memory(AuditMode::Harness);
    let root = locked_root(
        "ops",
        &signing_key(1, "ops"),
        l("2:hr:"),
        VerificationLevel::Declared,
        &log,
    )
    .unwrap();
    Env {
        log,
        root,
        operator: l("1::"),
        replay: ReplayGuard::new(),
    }
}

impl Env {
    fn load(&mut self, a: SkillArtifact) -> Result<(), Option<u8>> {
        let ctx = LoadContext {
            root: &self.root,
            operator_clearance: &self.operator,
            max_rank: DEFAULT_MAX_RANK,
            audit: &self.log,
        };
        let before = self.log.len();
        let r = load_skill(&ctx, a, None, &mut self.replay)
            .map(|_| ())
            .map_err(|e| e.step());
        let recs = self.log.records_from(before as u64);
        assert_eq!(recs.len(), 1, "exactly one load record per attempt");
        match &r {
            Ok(()) => assert_eq!(recs[0].record_type, RecordType::SkillLoadOk),
            Err(step) => {
                assert_eq!(recs[0].record_type, RecordType::SkillLoadReject);
                assert_eq!(
                    recs[0].payload.get("step").and_then(|v| v.as_u64()),
                    step.map(u64::from)
                );
            }
        }
        r
    }
}

fn spec() -> SkillSpec {
    SkillSpec::new("summarize", "ops").cap(Capability::FsRead, "")
}

fn key() -> ed25519_dalek::SigningKey {
    signing_key(1, "ops")
}

fn reencode(a: &SkillArtifact, edit: impl FnOnce(&mut serde_json::Map<String, serde_json::Value>)) -> SkillArtifact {
    let mut v: serde_json::Value = serde_json::from_slice(&a.manifest_bytes).unwrap();
    edit(v.as_object_mut().unwrap());
    SkillArtifact {
        manifest_bytes: to_canonical_bytes(&v).unwrap(),
        ..a.clone()
    }
}

#[test]
fn each_step_rejects_and_records() {
    let k = key();
    let cases: Vec<(&str, SkillArtifact, u8)> = vec![
        (
            "garbage manifest",
            SkillArtifact {
                manifest_bytes: b"{not json".to_vec(),
                ..spec().artifact(&k)
            },
            1,
        ),
        (
            "unknown manifest field",
            reencode(&spec().artifact(&k), |m| {
                m.insert("autoApprove".into(), true.into());
            }),
            1,
        ),
        (
            "unknown signer",
            SkillSpec {
                signer: "mallory".into(),
                ..spec()
            }
            .artifact(&k),
            2,
        ),
        (
            "content swapped",
            SkillArtifact {
                content: b"rm -rf".to_vec(),
                ..spec().artifact(&k)
            },
            3,
        ),
        ("wrong key", spec().artifact(&signing_key(2, "ops")), 3),
        (
            "version edited after signing",
            reencode(&spec().artifact(&k), |m| {
                m.insert("version".into(), 9.into());
            }),
            3,
        ),
        ("above signer clearance", spec().label(l("3::")).artifact(&k), 4),
        ("above operator clearance", spec().label(l("2::")).artifact(&k), 5),
        ("compartment outside operator", spec().label(l("1:hr:")).artifact(&k), 5),
        (
            "level above signer authority",
            spec().level(VerificationLevel::Formal).artifact(&k),
            6,
        ),
        // Fails 2 and 6; the first failing step is the one reported.
        (
            "unknown signer and level",
            SkillSpec {
                signer: "mallory".into(),
                ..spec().level(VerificationLevel::Formal)
            }
            .artifact(&k),
            2,
        ),
    ];
    for (name, artifact, step) in cases {
        let mut e = env();
        assert_eq!(e.load(artifact), Err(Some(step)), "{name}");
        assert_eq!(e.replay.observed("summarize"), None, "{name}");
    }
}

#[test]
fn replay_is_step_seven() {
    let mut e = env();
    let k = key();
    assert_eq!(e.load(spec().version(2).artifact(&k)), Ok(()));
    assert_eq!(e.load(spec().version(2).artifact(&k)), Err(Some(7)));
    assert_eq!(e.load(spec().version(1).artifact(&k)), Err(Some(7)));
    assert_eq!(e.load(spec().version(3).artifact(&k)), Ok(()));
    assert_eq!(e.replay.observed("summarize"), Some(3));
    assert!(e.log.verify().is_ok());
}

#[test]
fn unlocked_root_rejects_everything() {
    let log = AuditLog::in_memory(AuditMode::Harness);
    let ctx = LoadContext {
        root: &TrustRoot::new(),
        operator_clearance: &Label::public(),
        max_rank: DEFAULT_MAX_RANK,
        audit: &log,
    };
    let r = load_skill(&ctx, spec().artifact(&key()), None, &mut ReplayGuard::new());
    assert!(r.is_err());
    assert_eq!(log.records()[0].record_type, RecordType::SkillLoadReject);
}
