//! The `skillgate` command line.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Duration;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Args, Parser, Subcommand};
use ed25519_dalek::{SigningKey, VerifyingKey};

use crate::api::{self, ApiState};
use crate::audit::{self, AuditLog, AuditMode, ChainHead, ChainVerdict};
use crate::bicond::{self, CorpusSnapshot};
use crate::capability::{Capability, CapabilityDecl};
use crate::config::{self, Profile, RunHooks, RunOptions};
use crate::ensemble::{self, EnsembleConfig, Scenario, SweepSpec};
use crate::gate::{BrokerKind, Reversibility};
use crate::lattice::{Label, DEFAULT_MAX_RANK};
use crate::skillpkg::{self, LoadContext, Manifest, ReplayGuard, VerificationLevel};
use crate::trustroot::{SignerEntry, TrustRootFile};

#[derive(Parser, Debug)]
#[command(
    name = "skillgate",
    version,
    about = "Skill-aware agent runtime with a gated, audited side-effect path"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate an Ed25519 signing key pair.
    Keygen {
        /// Writes <out>.key and <out>.pub.
        #[arg(long)]
        out: PathBuf,
    },
    /// Manage the trust root document.
    Root {
        #[command(subcommand)]
        command: RootCmd,
    },
    /// Sign or verify skill packages.
    Skill {
        #[command(subcommand)]
        command: SkillCmd,
    },
    /// Run a gated session over a JSONL stream of tool calls.
    Run(RunArgs),
    /// Run a session whose broker is the HTTP approval API.
    Serve(ServeArgs),
    /// The adversarial-ensemble harness.
    Ensemble {
        #[command(subcommand)]
        command: EnsembleCmd,
    },
    /// Audit log tools.
    Audit {
        #[command(subcommand)]
        command: AuditCmd,
    },
    /// Audit/world reconciliation.
    Bicond {
        #[command(subcommand)]
        command: BicondCmd,
    },
}

#[derive(Subcommand, Debug)]
enum RootCmd {
    /// Add or replace a signer. Refused once the document is locked.
    Add {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        key_id: String,
        /// Base64 public key, or a path to a .pub file.
        #[arg(long = "pub")]
        pub_key: String,
        #[arg(long)]
        clearance: String,
        #[arg(long)]
        max_level: VerificationLevel,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: u32,
    },
    /// Mark the document locked. There is no unlock.
    Lock {
        #[arg(long)]
        root: PathBuf,
    },
    Show {
        #[arg(long)]
        root: PathBuf,
    },
}

#[derive(Subcommand, Debug)]
enum SkillCmd {
    /// Write manifest.json and skill.sig into a package directory.
    Sign {
        dir: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        skill_id: String,
        #[arg(long)]
        signer: String,
        #[arg(long, default_value_t = 1)]
        version: u64,
        #[arg(long, default_value = "0::")]
        label: String,
        #[arg(long, default_value = "unverified")]
        level: VerificationLevel,
        /// `token` or `token:target`; repeatable.
        #[arg(long = "cap")]
        caps: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: u32,
    },
    /// Run the loader checks against a trust root without starting a session.
    Verify {
        dir: PathBuf,
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value = "0::")]
        clearance: String,
        #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
        max_rank: u32,
    },
}

#[derive(Args, Debug)]
struct SessionArgs {
    #[arg(long)]
    root: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Skill package directory; repeatable.
    #[arg(long = "skill")]
    skills: Vec<PathBuf>,
    /// Audit log file, continued when it exists. In memory otherwise.
    #[arg(long)]
    audit: Option<PathBuf>,
    #[arg(long)]
    policy: Option<PathBuf>,
    /// Broker decision timeout in seconds.
    #[arg(long, default_value_t = 60)]
    timeout: u64,
    #[arg(long, default_value = "0::")]
    clearance: String,
    #[arg(long, default_value_t = DEFAULT_MAX_RANK)]
    max_rank: u32,
    /// `name` or `name:reversible|irreversible`; repeatable.
    #[arg(long = "tool")]
    tools: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic records without wall-clock timestamps.
    #[arg(long)]
    harness: bool,
    #[arg(long)]
    replay_state: Option<PathBuf>,
    /// JSONL input; `-` or absent reads stdin.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    session: SessionArgs,
    #[arg(long)]
    broker: Option<BrokerKind>,
    /// Also serve the approval API here (needed for the webhook broker).
    #[arg(long)]
    listen: Option<String>,
    #[arg(long)]
    token: Option<String>,
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    session: SessionArgs,
    #[arg(long, default_value = "127.0.0.1:8787")]
    listen: String,
    #[arg(long)]
    token: Option<String>,
}

#[derive(Subcommand, Debug)]
enum EnsembleCmd {
    /// One trial; prints the verdict and witness report.
    Trial {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "clean")]
        scenario: Scenario,
        #[arg(long, default_value = "allow-all")]
        broker: BrokerKind,
        /// Write the trial's audit log here.
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// The N×K×R grid over many seeds.
    Sweep {
        #[arg(long, value_delimiter = ',', default_value = "10,50,200")]
        grid_n: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        grid_k: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "5,10,25")]
        grid_r: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        #[arg(long, value_delimiter = ',', default_value = "clean,F1,F2,F3,F4")]
        scenarios: Vec<Scenario>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads; defaults to one per CPU.
        #[arg(long)]
        threads: Option<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum AuditCmd {
    /// Verify the hash chain; with --head also detect truncation.
    Verify {
        log: PathBuf,
        /// Retained `len:hash` anchor.
        #[arg(long)]
        head: Option<String>,
    },
    /// Print the `len:hash` anchor to retain.
    Head { log: PathBuf },
}

#[derive(Subcommand, Debug)]
enum BicondCmd {
    /// Exit 0 on pass, 2 on fail with a witness report.
    Check {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        baseline: PathBuf,
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        head: Option<String>,
    },
    /// Write a corpus snapshot (`hash path` lines).
    Snapshot {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: i32,
    message: String,
}

type Outcome = Result<i32, Failure>;

fn fail(message: impl ToString) -> Failure {
    Failure {
        code: 1,
        message: message.to_string(),
    }
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 64,
            };
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::Keygen { out } => keygen(&out),
        Command::Root { command } => root(command),
        Command::Skill { command } => skill(command),
        Command::Run(args) => run_cmd(args.session, args.broker, args.listen, args.token),
        Command::Serve(args) => run_cmd(args.session, Some(BrokerKind::Webhook), Some(args.listen), args.token),
        Command::Ensemble { command } => ensemble_cmd(command),
        Command::Audit { command } => audit_cmd(command),
        Command::Bicond { command } => bicond_cmd(command),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| fail(format!("{}: {e}", path.display())))
}

fn keygen(out: &Path) -> Outcome {
    let key = SigningKey::generate(&mut rand::rngs::OsRng);
    let secret = out.with_extension("key");
    let public = out.with_extension("pub");
    write_file(&secret, &format!("{}\n", B64.encode(key.to_bytes())))?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        std::fs::set_permissions(&secret, std::fs::Permissions::from_mode(0o600)).map_err(fail)?;
    }
    let pub_b64 = B64.encode(key.verifying_key().as_bytes());
    write_file(&public, &format!("{pub_b64}\n"))?;
    println!("{pub_b64}");
    Ok(0)
}

fn decode32(text: &str, what: &str) -> Result<[u8; 32], Failure> {
    let bytes = B64.decode(text.trim()).map_err(|e| fail(format!("{what}: {e}")))?;
    bytes.try_into().map_err(|_| fail(format!("{what}: expected 32 bytes")))
}

fn load_key(path: &Path) -> Result<SigningKey, Failure> {
    Ok(SigningKey::from_bytes(&decode32(&read_text(path)?, "signing key")?))
}

fn label(text: &str, max_rank: u32) -> Result<Label, Failure> {
    Label::parse_bounded(text, max_rank).map_err(|e| fail(format!("label {text:?}: {e}")))
}

fn root(cmd: RootCmd) -> Outcome {
    match cmd {
        RootCmd::Add {
            root,
            key_id,
            pub_key,
            clearance,
            max_level,
            max_rank,
        } => {
            let mut doc = if root.exists() {
                TrustRootFile::read(&root).map_err(fail)?
            } else {
                TrustRootFile::default()
            };
            let text = if Path::new(&pub_key).is_file() {
                read_text(Path::new(&pub_key))?
            } else {
                pub_key
            };
            let vk = VerifyingKey::from_bytes(&decode32(&text, "public key")?).map_err(fail)?;
            let entry = SignerEntry::new(key_id, vk, label(&clearance, max_rank)?, max_level).map_err(fail)?;
            doc.upsert(&entry).map_err(fail)?;
            doc.write(&root).map_err(fail)?;
            Ok(0)
        }
        RootCmd::Lock { root } => {
            let mut doc = TrustRootFile::read(&root).map_err(fail)?;
            doc.locked = true;
            doc.write(&root).map_err(fail)?;
            Ok(0)
        }
        RootCmd::Show { root } => {
            let doc = TrustRootFile::read(&root).map_err(fail)?;
            println!("{}", serde_json::to_string_pretty(&doc.summary()).map_err(fail)?);
            Ok(0)
        }
    }
}

fn parse_cap(text: &str) -> Result<CapabilityDecl, Failure> {
    let (token, target) = text.split_once(':').unwrap_or((text, ""));
    let token: Capability = token.parse().map_err(fail)?;
    Ok(CapabilityDecl::new(token, target))
}

fn skill(cmd: SkillCmd) -> Outcome {
    match cmd {
        SkillCmd::Sign {
            dir,
            key,
            skill_id,
            signer,
            version,
            label: l,
            level,
            caps,
            max_rank,
        } => {
            let key = load_key(&key)?;
            let caps: BTreeSet<CapabilityDecl> = caps.iter().map(|c| parse_cap(c)).collect::<Result<_, _>>()?;
            let mut m = Manifest {
                skill_id,
                label: label(&l, max_rank)?,
                caps,
                signer,
                version,
                verification: level,
                content_hash: crate::hash::Digest([0; 32]),
            };
            skillpkg::sign_package(&dir, &mut m, &key).map_err(fail)?;
            println!(
                "signed {} v{} content {}",
                m.skill_id,
                m.version,
                m.content_hash.to_hex()
            );
            Ok(0)
        }
        SkillCmd::Verify {
            dir,
            root,
            clearance,
            max_rank,
        } => {
            let doc = TrustRootFile::read(&root).map_err(fail)?;
            // Offline check: a scratch log and an in-memory lock.
            let log = AuditLog::in_memory(AuditMode::Harness);
            let mut tr = doc.to_trust_root(max_rank).map_err(fail)?;
            tr.lock(&log).map_err(fail)?;
            let artifact = skillpkg::read_package(&dir).map_err(fail)?;
            let op = label(&clearance, max_rank)?;
            let ctx = LoadContext {
                root: &tr,
                operator_clearance: &op,
                max_rank,
                audit: &log,
            };
            let skill = skillpkg::load_skill(&ctx, artifact, None, &mut ReplayGuard::new()).map_err(fail)?;
            println!(
                "OK {} v{} level {} label {}",
                skill.skill_id(),
                skill.manifest().version,
                skill.effective_level(),
                skill.label()
            );
            Ok(0)
        }
    }
}

fn parse_tool(text: &str) -> Result<(String, Option<Reversibility>), Failure> {
    match text.split_once(':') {
        None => Ok((text.to_string(), None)),
        Some((name, "reversible")) => Ok((name.to_string(), Some(Reversibility::Reversible))),
        Some((name, "irreversible")) => Ok((name.to_string(), Some(Reversibility::Irreversible))),
        Some((_, tag)) => Err(fail(format!(
            "tool tag must be reversible or irreversible, got {tag:?}"
        ))),
    }
}

fn init_logging(verbose: bool) {
    let level = if verbose { "debug" } else { "warn" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
}

fn run_cmd(args: SessionArgs, broker: Option<BrokerKind>, listen: Option<String>, token: Option<String>) -> Outcome {
    let profile = Profile::from_env().map_err(fail)?;
    init_logging(args.verbose || profile.verbose());
    let mut opts = RunOptions::new(profile, args.root, args.corpus);
    opts.skills = args.skills;
    opts.audit_path = args.audit;
    opts.broker = broker;
    opts.policy = args.policy;
    opts.timeout = Duration::from_secs(args.timeout);
    opts.operator_clearance = label(&args.clearance, args.max_rank)?;
    opts.max_rank = args.max_rank;
    opts.tools = args.tools.iter().map(|t| parse_tool(t)).collect::<Result<_, _>>()?;
    opts.seed = args.seed;
    opts.harness = args.harness;
    opts.replay_state = args.replay_state;

    let from_stdin = args.input.as_deref().is_none_or(|p| p == Path::new("-"));
    if opts.broker_kind() == BrokerKind::Interactive && from_stdin {
        return Err(fail(
            "the interactive broker reads answers from stdin; pass calls with --input FILE",
        ));
    }
    if opts.broker_kind() == BrokerKind::Webhook && listen.is_none() {
        return Err(fail("the webhook broker needs --listen for its approval API"));
    }

    let opened = config::open_session(&opts, RunHooks::default()).map_err(fail)?;
    for (dir, why) in &opened.rejected {
        eprintln!("rejected {}: {why}", dir.display());
    }
    let _server = match listen {
        Some(addr) => {
            let state = ApiState {
                queue: opened.queue.clone().unwrap_or_default(),
                audit: opened.session.audit().clone(),
                token,
            };
            let server = api::serve(state, &addr).map_err(|e| fail(format!("listen {addr}: {e}")))?;
            eprintln!("approval API on http://{}", server.addr());
            Some(server)
        }
        None => None,
    };
    let mut input: Box<dyn BufRead> = match args.input {
        Some(p) if p != Path::new("-") => Box::new(BufReader::new(
            File::open(&p).map_err(|e| fail(format!("{}: {e}", p.display())))?,
        )),
        _ => Box::new(io::stdin().lock()),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    let summary = config::drive(opened.session, &mut input, &mut out).map_err(fail)?;
    out.flush().map_err(fail)?;
    for id in &summary.reverify {
        eprintln!("skill {id} changed on disk; re-verify before the next session");
    }
    if summary.discarded_writes > 0 {
        eprintln!("discarded {} uncommitted reversible writes", summary.discarded_writes);
    }
    Ok(if summary.aborted.is_some() { 3 } else { 0 })
}

fn ensemble_cmd(cmd: EnsembleCmd) -> Outcome {
    match cmd {
        EnsembleCmd::Trial {
            n,
            k,
            r,
            seed,
            scenario,
            broker,
            log_out,
        } => {
            let mut cfg = EnsembleConfig::new(n, k, r, seed, scenario);
            cfg.broker = broker;
            let t = ensemble::run_trial(&cfg).map_err(fail)?;
            if let Some(p) = log_out {
                write_file(&p, &t.log)?;
            }
            let verdict = if t.report.verdict.pass { "PASS" } else { "FAIL" };
            let expectation = if t.agree { "expected" } else { "UNEXPECTED" };
            println!("n={n} k={k} r={r} seed={seed} scenario={scenario}: {verdict} ({expectation})");
            print!("{}", t.report.render());
            Ok(if t.agree { 0 } else { 1 })
        }
        EnsembleCmd::Sweep {
            grid_n,
            grid_k,
            grid_r,
            seeds,
            base_seed,
            scenarios,
            out,
            threads,
        } => {
            let spec = SweepSpec {
                grid_n,
                grid_k,
                grid_r,
                seeds,
                base_seed,
                scenarios,
                broker: BrokerKind::AllowAll,
            };
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads.unwrap_or(0))
                .build()
                .map_err(fail)?;
            eprintln!("running {} trials", spec.trial_count());
            let report = pool.install(|| ensemble::sweep(&spec)).map_err(fail)?;
            if let Some(p) = out {
                write_file(&p, &report.to_csv())?;
            }
            print!("{}", report.render_table());
            for miss in &report.misses {
                println!("miss: {miss:?}");
            }
            Ok(if report.perfect() { 0 } else { 1 })
        }
    }
}

fn head_arg(text: Option<&str>) -> Result<Option<ChainHead>, Failure> {
    text.map(|h| ChainHead::parse(h).map_err(fail)).transpose()
}

fn audit_cmd(cmd: AuditCmd) -> Outcome {
    match cmd {
        AuditCmd::Verify { log, head } => {
            let text = read_text(&log)?;
            let verdict = match head_arg(head.as_deref())? {
                Some(h) => audit::verify_text_anchored(&text, &h),
                None => audit::verify_text(&text),
            };
            match verdict {
                ChainVerdict::Ok => {
                    println!("chain ok");
                    Ok(0)
                }
                ChainVerdict::BrokenAt(k) => {
                    println!("chain broken at {k}");
                    Ok(1)
                }
            }
        }
        AuditCmd::Head { log } => {
            let text = read_text(&log)?;
            let records = audit::parse_text(&text).map_err(|(seq, e)| fail(format!("record {seq}: {e}")))?;
            match records.last() {
                Some(r) => println!(
                    "{}",
                    ChainHead {
                        len: records.len() as u64,
                        hash: r.self_hash
                    }
                ),
                None => println!("0:{}", crate::hash::Digest([0; 32]).to_hex()),
            }
            Ok(0)
        }
    }
}

fn bicond_cmd(cmd: BicondCmd) -> Outcome {
    match cmd {
        BicondCmd::Snapshot { corpus, out } => {
            let text = bicond::snapshot(&corpus).map_err(fail)?.to_text();
            match out {
                Some(p) => write_file(&p, &text)?,
                None => print!("{text}"),
            }
            Ok(0)
        }
        BicondCmd::Check {
            corpus,
            baseline,
            log,
            head,
        } => {
            let s0 = CorpusSnapshot::parse(&read_text(&baseline)?).map_err(fail)?;
            let s1 = bicond::snapshot(&corpus).map_err(fail)?;
            let text = read_text(&log)?;
            if let Some(h) = head_arg(head.as_deref())? {
                if let ChainVerdict::BrokenAt(k) = audit::verify_text_anchored(&text, &h) {
                    println!("FAIL: audit chain broken at {k}");
                    return Ok(2);
                }
            }
            let records = match audit::parse_text(&text) {
                Ok(r) => r,
                Err((seq, e)) => {
                    println!("FAIL: audit chain broken at {seq}: {e}");
                    return Ok(2);
                }
            };
            match bicond::check_run(&s0, &s1, &records) {
                Ok(report) if report.verdict.pass => {
                    println!("PASS");
                    print!("{}", report.render());
                    Ok(0)
                }
                Ok(report) => {
                    println!("FAIL");
                    print!("{}", report.render());
                    Ok(2)
                }
                Err(e) => {
                    println!("FAIL: {e}");
                    Ok(2)
                }
            }
        }
    }
}
