use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::bicond::{self, BicondError, CorpusSnapshot};

/// Name families for generated documents.
pub const FAMILIES: [&str; 5] = [
    "audit-log",
    "compliance-report",
    "financial-statement",
    "meeting-notes",
    "test-results",
];

fn file_name(family: usize, index: usize, rng: &mut ChaCha20Rng) -> String {
    let year = 2019 + rng.gen_range(0..6);
    let month = rng.gen_range(1..=12);
    match family {
        0 => format!("audit-log-{year}-{month:02}-{index:03}.log"),
        1 => format!("compliance-report-q{}-{year}-{index:03}.md", (month - 1) / 3 + 1),
        2 => format!("financial-statement-{year}-{month:02}-{index:03}.csv"),
        3 => format!(
            "meeting-notes-{year}-{month:02}-{:02}-{index:03}.txt",
            rng.gen_range(1..=28)
        ),
        _ => format!("test-results-run{:05}-{index:03}.json", rng.gen_range(0..100_000)),
    }
}

fn body(family: usize, rng: &mut ChaCha20Rng) -> String {
    let lines = rng.gen_range(2..6);
    let mut out = format!("{}\n", FAMILIES[family]);
    for i in 0..lines {
        out.push_str(&format!("entry {i}: {:016x}\n", rng.gen::<u64>()));
    }
    out
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> BicondError {
    let path = path.display().to_string();
    move |source| BicondError::Io { path, source }
}

/// Fills the empty directory `dir` with `n` documents and returns the
/// baseline snapshot. Families rotate with the file index, so any ten files
/// cover all five.
pub fn generate_corpus(n: usize, seed: u64, dir: &Path) -> Result<CorpusSnapshot, BicondError> {
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x636f_7270_7573);
    for i in 0..n {
        let family = i % FAMILIES.len();
        let name = file_name(family, i, &mut rng);
        let path = dir.join(&name);
        std::fs::write(&path, body(family, &mut rng)).map_err(io(&path))?;
    }
    bicond::snapshot(dir)
}

/// Sorted relative names of the regular files directly under `dir`.
pub fn list_files(dir: &Path) -> std::io::Result<Vec<String>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            if let Some(name) = entry.file_name().to_str() {
                out.push(name.to_string());
            }
        }
    }
    out.sort();
    Ok(out)
}
