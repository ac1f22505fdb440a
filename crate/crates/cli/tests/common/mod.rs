#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use clap::Parser;
use lata_cli::args::Cli;
use lata_core::llm::ChatBackend;
use lata_core::testkit::corpus::{write_corpus, Corpus};

pub const CLOCK: &str = "2026-02-10T12:00:00Z";

pub struct Setup {
    pub dir: tempfile::TempDir,
    pub corpus: Corpus,
    pub config: PathBuf,
}

impl Setup {
    pub fn root(&self) -> &Path {
        self.dir.path()
    }

    pub fn out(&self, name: &str) -> PathBuf {
        self.root().join(name)
    }
}

pub fn config_yaml(anonymize: bool, compiler: &str) -> String {
    format!(
        "grading:\n  anonymize: {anonymize}\n  correction_credit_fraction: 0.5\n  late_policy: {{ per_day_fraction: 0.1, grace_minutes: 15, cap_fraction: 0.5 }}\nllm:\n  max_retries: 3\nreport:\n  compiler: \"{compiler}\"\n  compile_timeout_secs: 20\npipeline:\n  worker_count: 4\n"
    )
}

pub fn setup(n: usize, seed: u64) -> Setup {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path(), n, seed).unwrap();
    let config = dir.path().join("lata.yml");
    std::fs::write(&config, config_yaml(true, "builtin:check")).unwrap();
    Setup { dir, corpus, config }
}

pub fn cli(args: &[&str]) -> Cli {
    Cli::try_parse_from(std::iter::once("lata").chain(args.iter().copied())).unwrap()
}

pub fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `lata run` in-process against `backend`, recording a transcript.
pub fn run_with(s: &Setup, out: &Path, backend: Arc<dyn ChatBackend>, record: Option<&Path>) -> u8 {
    let mut args = vec![
        "--config",
        p(&s.config),
        "run",
        "--export",
        p(&s.corpus.export_dir),
        "--assignment",
        p(&s.corpus.assignment_dir),
        "--out",
        p(out),
        "--clock",
        CLOCK,
    ];
    if let Some(r) = record {
        args.extend(["--record-transcript", p(r)]);
    }
    match lata_cli::execute(&cli(&args), Some(backend)) {
        Ok(o) => o.exit_code(),
        Err(e) => {
            eprintln!("{e}");
            lata_cli::EXIT_FAILURE
        }
    }
}

pub fn lata(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_lata")).args(args).output().unwrap()
}

/// Every file under `root`, keyed by relative path.
pub fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for path in entries {
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    if root.exists() {
        walk(root, root, &mut out);
    }
    out
}

/// Paths whose contents differ between two trees, including one-sided files.
pub fn tree_diff(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
