use std::path::Path;
use std::process::{Command, Output};

fn skillgate(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_skillgate"));
    cmd.args(args).env_remove("SKILLGATE_PROFILE");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// keygen, root add/lock, skill sign. Returns (root file, package dir).
fn provision(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let keys = dir.join("ops");
    assert_eq!(skillgate(&["keygen", "--out", p(&keys)], &[]).status.code(), Some(0));
    let root = dir.join("root.json");
    let pubkey = keys.with_extension("pub");
    let o = skillgate(
        &[
            "root",
            "add",
            "--root",
            p(&root),
            "--key-id",
            "ops",
            "--pub",
            p(&pubkey),
            "--clearance",
            "1::",
            "--max-level",
            "declared",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let pkg = dir.join("writer");
    std::fs::create_dir_all(&pkg).unwrap();
    std::fs::write(pkg.join("SKILL.md"), "writes reports\n").unwrap();
    let o = skillgate(
        &[
            "skill",
            "sign",
            p(&pkg),
            "--key",
            p(&keys.with_extension("key")),
            "--skill-id",
            "writer",
            "--signer",
            "ops",
            "--level",
            "declared",
            "--cap",
            "fs.read",
            "--cap",
            "fs.write.irrev:reports/",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    (root, pkg)
}

#[test]
fn provision_run_and_verify_the_log() {
    let tmp = tempfile::tempdir().unwrap();
    let (root, pkg) = provision(tmp.path());
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(corpus.join("reports")).unwrap();
    std::fs::write(corpus.join("reports/q3.txt"), "draft").unwrap();
    let input = tmp.path().join("calls.jsonl");
    std::fs::write(
        &input,
        concat!(
            "{\"op\":\"fs.write.irrev\",\"args\":{\"target\":\"reports/q3.txt\",\"mode\":\"overwrite\",\"content\":\"final\"},\"originSkillId\":\"writer\"}\n",
            "{\"op\":\"fs.write.irrev\",\"args\":{\"target\":\"notes.txt\",\"mode\":\"overwrite\",\"content\":\"x\"},\"originSkillId\":\"writer\"}\n",
        ),
    )
    .unwrap();
    let log = tmp.path().join("audit.jsonl");
    let run = |env: &[(&str, &str)]| {
        skillgate(
            &[
                "run",
                "--root",
                p(&root),
                "--corpus",
                p(&corpus),
                "--skill",
                p(&pkg),
                "--audit",
                p(&log),
                "--input",
                p(&input),
                "--harness",
            ],
            env,
        )
    };

    // The strict default refuses a root that was never locked.
    let o = run(&[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not marked locked"), "{}", stderr(&o));
    let o = run(&[("SKILLGATE_PROFILE", "lenient")]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("SKILLGATE_PROFILE"));

    assert_eq!(
        skillgate(&["root", "lock", "--root", p(&root)], &[]).status.code(),
        Some(0)
    );
    let o = skillgate(&["skill", "verify", p(&pkg), "--root", p(&root)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("OK writer v1 level declared"));

    let o = run(&[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines[0]["outcome"], "executed");
    // Outside the declared target prefix, the strict deny-all broker decides.
    assert_eq!(lines[1]["outcome"], "denied");
    assert_eq!(std::fs::read_to_string(corpus.join("reports/q3.txt")).unwrap(), "final");
    assert!(!corpus.join("notes.txt").exists());

    let o = skillgate(&["audit", "verify", p(&log)], &[]);
    assert_eq!((o.status.code(), stdout(&o).trim()), (Some(0), "chain ok"));
    let head = stdout(&skillgate(&["audit", "head", p(&log)], &[])).trim().to_string();
    let o = skillgate(&["audit", "verify", p(&log), "--head", &head], &[]);
    assert_eq!(o.status.code(), Some(0));

    // Dropping the last record is invisible without the anchor and caught with it.
    let text = std::fs::read_to_string(&log).unwrap();
    let kept: Vec<&str> = text.lines().collect();
    std::fs::write(&log, kept[..kept.len() - 1].join("\n") + "\n").unwrap();
    assert_eq!(skillgate(&["audit", "verify", p(&log)], &[]).status.code(), Some(0));
    let o = skillgate(&["audit", "verify", p(&log), "--head", &head], &[]);
    assert_eq!(o.status.code(), Some(1));

    // Editing a record breaks the chain.
    std::fs::write(&log, text.replacen("reports/q3.txt", "reports/q4.txt", 1)).unwrap();
    let o = skillgate(&["audit", "verify", p(&log)], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).starts_with("chain broken at"));
}

#[test]
fn tampered_package_fails_verification() {
    let tmp = tempfile::tempdir().unwrap();
    let (root, pkg) = provision(tmp.path());
    std::fs::write(pkg.join("SKILL.md"), "writes reports and also deletes them\n").unwrap();
    let o = skillgate(&["skill", "verify", p(&pkg), "--root", p(&root)], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"), "{}", stderr(&o));
}

#[test]
fn interactive_and_webhook_need_their_channels() {
    let tmp = tempfile::tempdir().unwrap();
    let (root, _) = provision(tmp.path());
    let c = p(tmp.path());
    let o = skillgate(
        &["run", "--root", p(&root), "--corpus", c, "--broker", "interactive"],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--input"));
    let o = skillgate(&["run", "--root", p(&root), "--corpus", c, "--broker", "webhook"], &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--listen"));
}

#[test]
fn usage_errors_exit_64() {
    assert_eq!(skillgate(&["run", "--no-gate"], &[]).status.code(), Some(64));
    assert_eq!(
        skillgate(&["ensemble", "trial", "--n", "1"], &[]).status.code(),
        Some(64)
    );
    assert_eq!(skillgate(&["--help"], &[]).status.code(), Some(0));
    let o = skillgate(&["--version"], &[]);
    assert!(stdout(&o).contains(env!("CARGO_PKG_VERSION")));
}

#[test]
fn ensemble_trial_reports_expected_failure() {
    let o = skillgate(
        &[
            "ensemble",
            "trial",
            "--n",
            "10",
            "--k",
            "2",
            "--r",
            "5",
            "--seed",
            "4",
            "--scenario",
            "F2",
        ],
        &[],
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).starts_with("n=10 k=2 r=5 seed=4 scenario=F2: FAIL (expected)"),
        "{}",
        stdout(&o)
    );
    let o = skillgate(
        &["ensemble", "trial", "--n", "10", "--k", "2", "--r", "5", "--seed", "4"],
        &[],
    );
    assert!(stdout(&o).contains("PASS (expected)"));
    let o = skillgate(
        &["ensemble", "trial", "--n", "0", "--k", "2", "--r", "5", "--seed", "4"],
        &[],
    );
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bicond_check_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("corpus");
    std::fs::create_dir_all(&corpus).unwrap();
    std::fs::write(corpus.join("a.txt"), "a").unwrap();
    let base = tmp.path().join("base.snap");
    assert_eq!(
        skillgate(&["bicond", "snapshot", "--corpus", p(&corpus), "--out", p(&base)], &[])
            .status
            .code(),
        Some(0)
    );
    let log = tmp.path().join("empty.jsonl");
    std::fs::write(&log, "").unwrap();
    let check = || {
        skillgate(
            &[
                "bicond",
                "check",
                "--corpus",
                p(&corpus),
                "--baseline",
                p(&base),
                "--log",
                p(&log),
            ],
            &[],
        )
    };
    assert_eq!(check().status.code(), Some(0));
    std::fs::write(corpus.join("a.txt"), "b").unwrap();
    let o = check();
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stdout(&o).contains("unexplained change (fs.write.irrev, a.txt) modified"),
        "{}",
        stdout(&o)
    );
}
