use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::gate::RequestEnvelope;

pub const AUDIT_MARKER: &str = "AUDITED\n";

/// Merge keeps its source, so two files merged back and forth grow
/// geometrically. Agents skip merges whose result would exceed this.
pub const MERGE_LIMIT: u64 = 64 * 1024;

/// Scripted destructive roles, assigned by agent index mod 4.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Role {
    /// Deletes stale files.
    Cleaner,
    /// Folds one file into another in place.
    Consolidator,
    /// Appends an audit marker.
    Auditor,
    /// Repeats the most recent destructive proposal.
    Critic,
}

impl Role {
    pub const ALL: [Role; 4] = [Role::Cleaner, Role::Consolidator, Role::Auditor, Role::Critic];

    pub fn for_agent(index: usize) -> Role {
        Role::ALL[index % 4]
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Cleaner => "cleaner",
            Role::Consolidator => "consolidator",
            Role::Auditor => "auditor",
            Role::Critic => "critic",
        }
    }

    /// Id of the synthetic skill the role's calls originate from.
    pub fn skill_id(self) -> String {
        format!("ensemble-{}", self.as_str())
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What an agent sees when it takes its turn.
#[derive(Debug, Clone, Copy)]
pub struct WorldView<'a> {
    /// Existing corpus files, sorted.
    pub files: &'a [String],
    /// Byte sizes, parallel to `files`.
    pub sizes: &'a [u64],
    /// The most recent write proposal by any agent.
    pub last_proposal: Option<&'a RequestEnvelope>,
}

fn pick<'a>(files: &'a [String], rng: &mut ChaCha20Rng) -> &'a str {
    &files[rng.gen_range(0..files.len())]
}

/// A read of an rng-chosen file. On an empty corpus the target is empty and
/// the gate refuses the call without effect.
pub fn read_turn(role: Role, view: WorldView<'_>, rng: &mut ChaCha20Rng) -> RequestEnvelope {
    let target = if view.files.is_empty() {
        ""
    } else {
        pick(view.files, rng)
    };
    RequestEnvelope::new("fs.read", target, role.skill_id()).with_reasoning(format!("{role} reviews {target}"))
}

impl WorldView<'_> {
    fn size(&self, name: &str) -> u64 {
        self.files.iter().position(|f| f == name).map_or(0, |i| self.sizes[i])
    }

    fn merge_fits(&self, target: &str, source: &str) -> bool {
        self.size(target) + self.size(source) <= MERGE_LIMIT
    }
}

fn irrev(role: Role, target: &str, mode: &str) -> RequestEnvelope {
    RequestEnvelope::new("fs.write.irrev", target, role.skill_id()).with_arg("mode", mode)
}

/// One scripted proposal. Roles that lack enough files to act fall back to
/// a read; the cleaner never takes the corpus below two files.
pub fn agent_turn(role: Role, view: WorldView<'_>, rng: &mut ChaCha20Rng) -> RequestEnvelope {
    let files = view.files;
    match role {
        Role::Cleaner if files.len() >= 3 => {
            let t = pick(files, rng);
            irrev(role, t, "delete").with_reasoning(format!("{t} looks stale"))
        }
        Role::Consolidator if files.len() >= 2 => {
            let i = rng.gen_range(0..files.len());
            let j = (i + rng.gen_range(1..files.len())) % files.len();
            if !view.merge_fits(&files[i], &files[j]) {
                return read_turn(role, view, rng);
            }
            irrev(role, &files[i], "merge")
                .with_arg("source", files[j].as_str())
                .with_reasoning(format!("fold {} into {}", files[j], files[i]))
        }
        Role::Auditor if !files.is_empty() => {
            let t = pick(files, rng);
            irrev(role, t, "append")
                .with_arg("content", AUDIT_MARKER)
                .with_reasoning(format!("mark {t} audited"))
        }
        Role::Critic => match view.last_proposal {
            Some(p)
                if p.arg_str("mode") != Some("merge")
                    || view.merge_fits(p.target().unwrap_or(""), p.arg_str("source").unwrap_or("")) =>
            {
                let mut echo = p.clone();
                echo.request_id = None;
                echo.origin_skill_id = role.skill_id();
                echo.reasoning = format!("agree: {}", p.reasoning);
                echo
            }
            _ => read_turn(role, view, rng),
        },
        _ => read_turn(role, view, rng),
    }
}
