use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use serde_json::{json, Value};
use skillgate::audit::{AuditLog, AuditMode};
use skillgate::capability::Capability;
use skillgate::lattice::Label;
use skillgate::skillpkg::VerificationLevel;
use skillgate::synth::{locked_root, signing_key, SkillSpec};
use skillgate::trustroot::TrustRootFile;
use skillgate_ffi::*;

fn last_error() -> String {
    let p = sg_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

unsafe fn take(p: *mut std::ffi::c_char) -> String {
    let s = CStr::from_ptr(p).to_str().unwrap().to_string();
    sg_string_free(p);
    s
}

struct Fixture {
    _tmp: tempfile::TempDir,
    options: Value,
}

fn fixture(locked: bool) -> Fixture {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    std::fs::write(corpus.join("a.txt"), "alpha").unwrap();

    let key = signing_key(3, "ffi");
    let root = locked_root(
        "ops",
        &key,
        Label::public(),
        VerificationLevel::Declared,
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

    let pkg = tmp.path().join("writer");
    SkillSpec::new("writer", "ops")
        .cap(Capability::FsRead, "")
        .cap(Capability::FsWriteIrrev, "")
        .write_package(&pkg, &key)
        .unwrap();
    let path = |p: &Path| p.display().to_string();
    let options = json!({
        "rootFile": path(&root_file),
        "corpus": path(&corpus),
        "skills": [path(&pkg), path(&tmp.path().join("missing"))],
        "harness": true,
        "seed": 9,
    });
    Fixture { _tmp: tmp, options }
}

fn open(options: &Value) -> Result<*mut SgSession, (SgStatus, String)> {
    let text = CString::new(options.to_string()).unwrap();
    let mut h = ptr::null_mut();
    match unsafe { sg_session_open(text.as_ptr(), &mut h) } {
        SgStatus::Ok => Ok(h),
        s => Err((s, last_error())),
    }
}

#[test]
fn strict_profile_refuses_unlocked_root() {
    let f = fixture(false);
    let (status, msg) = open(&f.options).unwrap_err();
    assert_eq!(status, SgStatus::Unlocked);
    assert!(msg.contains("not marked locked"), "{msg}");
}

#[test]
fn session_round_trip() {
    let f = fixture(true);
    let h = open(&f.options).unwrap();
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(sg_session_rejected(h, &mut out), SgStatus::Ok);
        let rejected: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(rejected.as_array().unwrap().len(), 1);

        let env = json!({"op": "fs.write.irrev", "args": {"target": "a.txt", "mode": "append", "content": "!"}, "originSkillId": "writer"});
        let env = CString::new(env.to_string()).unwrap();
        assert_eq!(sg_session_dispatch(h, env.as_ptr(), &mut out), SgStatus::Ok);
        let result: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(result["outcome"], "executed");

        let mut n = 99usize;
        assert_eq!(sg_session_commit(h, &mut n), SgStatus::Ok);
        assert_eq!(n, 0);
        assert_eq!(sg_session_rollback(h, ptr::null_mut()), SgStatus::Ok);
        assert_eq!(sg_session_end_round(h, &mut out), SgStatus::Ok);
        let verdict: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(verdict["verdict"], "not-checked");

        let bad = CString::new("{\"op\":1}").unwrap();
        assert_eq!(sg_session_dispatch(h, bad.as_ptr(), &mut out), SgStatus::Parse);
        assert_eq!(sg_session_dispatch(h, ptr::null(), &mut out), SgStatus::InvalidArgument);

        assert_eq!(sg_session_audit_jsonl(h, &mut out), SgStatus::Ok);
        let log = take(out);
        assert!(log.contains("irreversible.executed"));
        let mut broken = 0i64;
        let c = CString::new(log.clone()).unwrap();
        assert_eq!(sg_audit_verify_text(c.as_ptr(), &mut broken), SgStatus::Ok);
        assert_eq!(broken, -1);

        // Changing one payload byte in the third record breaks the chain there.
        let mut lines: Vec<String> = log.lines().map(str::to_string).collect();
        lines[2] = lines[2].replacen("\"seq\":2", "\"seq\":2,\"x\":1", 1);
        let c = CString::new(lines.join("\n") + "\n").unwrap();
        assert_eq!(sg_audit_verify_text(c.as_ptr(), &mut broken), SgStatus::Ok);
        assert_eq!(broken, 2);

        sg_session_free(h);
    }
    std::fs::read_to_string(
        f.options["corpus"]
            .as_str()
            .map(|c| Path::new(c).join("a.txt"))
            .unwrap(),
    )
    .map(|s| assert_eq!(s, "alpha!"))
    .unwrap();
}

#[test]
fn bad_options_are_reported() {
    let f = fixture(true);
    let mut h = ptr::null_mut();
    let junk = CString::new("{not json").unwrap();
    assert_eq!(unsafe { sg_session_open(junk.as_ptr(), &mut h) }, SgStatus::Parse);
    assert!(h.is_null());
    assert_eq!(
        unsafe { sg_session_open(ptr::null(), &mut h) },
        SgStatus::InvalidArgument
    );

    let mut o = f.options.clone();
    o["broker"] = json!("interactive");
    assert_eq!(open(&o).unwrap_err().0, SgStatus::InvalidArgument);
    let mut o = f.options.clone();
    o["verbose"] = json!(true);
    let (s, msg) = open(&o).unwrap_err();
    assert_eq!(s, SgStatus::InvalidArgument);
    assert!(msg.contains("verbose"));

    // Dev profile without a broker falls back to deny-all rather than a
    // terminal prompt nobody can answer.
    let mut o = f.options.clone();
    o["profile"] = json!("dev");
    let h = open(&o).unwrap();
    let env = json!({"op": "fs.write.irrev", "args": {"target": "a.txt", "mode": "delete"}, "originSkillId": "nobody"});
    let env = CString::new(env.to_string()).unwrap();
    let mut out = ptr::null_mut();
    unsafe {
        assert_eq!(sg_session_dispatch(h, env.as_ptr(), &mut out), SgStatus::Ok);
        let v: Value = serde_json::from_str(&take(out)).unwrap();
        assert_eq!(v["outcome"], "rejected");
        sg_session_free(h);
        assert_eq!(
            sg_session_commit(ptr::null_mut(), ptr::null_mut()),
            SgStatus::InvalidArgument
        );
    }
}

#[test]
fn wilson_and_version() {
    let (mut lo, mut hi) = (0.0, 0.0);
    assert_eq!(unsafe { sg_wilson_ci(200, 200, &mut lo, &mut hi) }, SgStatus::Ok);
    assert_eq!((lo, hi), (0.981, 1.0));
    assert_eq!(
        unsafe { sg_wilson_ci(0, 0, &mut lo, &mut hi) },
        SgStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { sg_wilson_ci(1, 2, ptr::null_mut(), &mut hi) },
        SgStatus::InvalidArgument
    );
    let v = unsafe { CStr::from_ptr(sg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/skillgate.h")).unwrap();
    let src = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exported: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .filter_map(|rest| rest.split('(').next())
        .collect();
    assert!(exported.len() >= 12, "{exported:?}");
    for name in exported {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    assert!(header.contains("SG_STATUS_ABORTED = 6"));
    assert!(header.contains("typedef struct sg_session sg_session;"));
}
