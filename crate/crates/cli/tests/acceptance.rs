//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use chrono::DateTime;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use common::*;
use lata_cli::pipeline::{GradeRecord, Layout};
use lata_core::grade::{load_assignment, raw_points, AssignmentPackage, ItemVerdict, Rubric, RubricItem};
use lata_core::ingest::anonymize_id;
use lata_core::ledger::{self, apply_regrade, GradeLedgerEntry, PassKind};
use lata_core::llm::{strip_think, ChatRequest, Endpoint, Field, LlmError, SchemaKind, SchemaSpec};
use lata_core::report::{deliver, escape_latex, extract_blocks, render_feedback, ArtifactKind, BuiltinChecker, HealSettings, StudentRef};
use lata_core::segment::{segment, SegmentMethod, SegmentationResult, SegmentationSpec};
use lata_core::testkit::corpus::{reference_solutions, Fixture, FixtureKind};
use lata_core::testkit::{DownBackend, ScriptedBackend, SyntheticModel};
use lata_core::texparse::{extract_body, tokenize};

/// Budget for a full 20-submission run pair.
const RUN_BUDGET_SECS: f64 = 60.0;
/// Non-model overhead allowed per submission.
const PER_SUBMISSION_BUDGET_SECS: f64 = 5.0;
const ANON_PAIRS: usize = 10_000;
const SEGMENT_FUZZ_BODIES: usize = 1_000;
const SCORING_PAIRS: usize = 1_000;
const THINK_FUZZ_CASES: usize = 10_000;
const SOLUTION_RUN: usize = 24;
const REGRADE_PAIRS: usize = 500;
const REPAIR_ATTEMPTS: u32 = 3;
const MAX_RETRIES: u32 = 3;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// The shared 20-submission corpus, its recorded transcript, and a first
/// run made against the rule-based model.
struct World {
    setup: Setup,
    transcript: PathBuf,
    recorded: PathBuf,
    model: Arc<SyntheticModel>,
    package: AssignmentPackage,
}

fn world() -> World {
    let setup = common::setup(20, 2026);
    let transcript = setup.root().join("transcript.jsonl");
    let recorded = setup.out("recorded");
    let model = Arc::new(SyntheticModel::new());
    let code = run_with(&setup, &recorded, model.clone(), Some(&transcript));
    assert_eq!(code, 0, "recording run failed");
    let package = load_assignment(&setup.corpus.assignment_dir).unwrap();
    World {
        setup,
        transcript,
        recorded,
        model,
        package,
    }
}

fn replay_run(w: &World, out: &Path, clock: bool) -> (i32, f64) {
    let s = &w.setup;
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
        "--mock-transcript",
        p(&w.transcript),
    ];
    if clock {
        args.extend(["--clock", CLOCK]);
    }
    let started = Instant::now();
    let o = lata(&args);
    (o.status.code().unwrap_or(-1), started.elapsed().as_secs_f64())
}

/// Blanks every field that carries wall-clock time or depends on it.
fn mask_timestamps(path: &str, bytes: &[u8]) -> Vec<u8> {
    if !path.ends_with(".jsonl") {
        return bytes.to_vec();
    }
    let text = String::from_utf8_lossy(bytes);
    let mut out = String::new();
    for line in text.lines() {
        let mut v: Value = serde_json::from_str(line).unwrap();
        v["checksum"] = json!("*");
        v["entry"]["graded_at"] = json!("*");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out.into_bytes()
}

fn criterion_1(w: &World) -> Check {
    let s = &w.setup;
    let (a, b) = (s.out("det-a"), s.out("det-b"));
    let (code_a, secs_a) = replay_run(w, &a, true);
    let (code_b, secs_b) = replay_run(w, &b, true);
    ensure(code_a == 0 && code_b == 0, || format!("exit codes {code_a}, {code_b}"))?;
    let (mut ta, mut tb) = (tree(&a), tree(&b));
    ensure(ta.remove("timings.json").is_some(), || "timings.json missing".into())?;
    tb.remove("timings.json");
    let diff = tree_diff(&ta, &tb);
    ensure(diff.is_empty(), || format!("pinned-clock trees differ in {diff:?}"))?;

    let reports = ta.keys().filter(|k| k.starts_with("reports/")).count();
    ensure(reports == 20, || format!("{reports} student artifacts, expected 20"))?;
    let summary: lata_cli::summary::RunSummary = serde_json::from_slice(&ta["summary.json"]).unwrap();
    ensure(summary.reconciles() && summary.counts.submissions == 20, || format!("summary does not reconcile: {:?}", summary.counts))?;
    let recorded = tree(&w.recorded);
    let mut rec = recorded.clone();
    rec.remove("timings.json");
    let diff = tree_diff(&rec, &ta);
    ensure(diff.is_empty(), || format!("replay differs from the recorded run in {diff:?}"))?;

    let (c, d) = (s.out("det-c"), s.out("det-d"));
    let (code_c, secs_c) = replay_run(w, &c, false);
    let (code_d, secs_d) = replay_run(w, &d, false);
    ensure(code_c == 0 && code_d == 0, || format!("exit codes {code_c}, {code_d}"))?;
    let mask = |t: BTreeMap<String, Vec<u8>>| -> BTreeMap<String, Vec<u8>> {
        t.into_iter()
            .filter(|(k, _)| k != "timings.json")
            .map(|(k, v)| {
                let m = mask_timestamps(&k, &v);
                (k, m)
            })
            .collect()
    };
    let diff = tree_diff(&mask(tree(&c)), &mask(tree(&d)));
    ensure(diff.is_empty(), || format!("unpinned trees differ outside timestamp fields in {diff:?}"))?;

    let worst_pair = (secs_a + secs_b).max(secs_c + secs_d);
    ensure(worst_pair < RUN_BUDGET_SECS, || format!("two runs took {worst_pair:.2}s"))?;
    let per = secs_a.max(secs_b).max(secs_c).max(secs_d) / 20.0;
    ensure(per < PER_SUBMISSION_BUDGET_SECS, || format!("{per:.3}s per submission"))?;
    Ok(format!(
        "{} files identical across pinned runs, identical modulo graded_at/checksum unpinned; two runs {:.2}s, {:.3}s/submission",
        ta.len(),
        worst_pair,
        per
    ))
}

/// FIPS 180-4 SHA-256, written out independently of the hashing crate
/// used by the pipeline.
mod oracle {
    const K: [u32; 64] = [
        0x428a2f98, 0x71374491, 0xb5c0fbcf, 0xe9b5dba5, 0x3956c25b, 0x59f111f1, 0x923f82a4, 0xab1c5ed5, 0xd807aa98, 0x12835b01,
        0x243185be, 0x550c7dc3, 0x72be5d74, 0x80deb1fe, 0x9bdc06a7, 0xc19bf174, 0xe49b69c1, 0xefbe4786, 0x0fc19dc6, 0x240ca1cc,
        0x2de92c6f, 0x4a7484aa, 0x5cb0a9dc, 0x76f988da, 0x983e5152, 0xa831c66d, 0xb00327c8, 0xbf597fc7, 0xc6e00bf3, 0xd5a79147,
        0x06ca6351, 0x14292967, 0x27b70a85, 0x2e1b2138, 0x4d2c6dfc, 0x53380d13, 0x650a7354, 0x766a0abb, 0x81c2c92e, 0x92722c85,
        0xa2bfe8a1, 0xa81a664b, 0xc24b8b70, 0xc76c51a3, 0xd192e819, 0xd6990624, 0xf40e3585, 0x106aa070, 0x19a4c116, 0x1e376c08,
        0x2748774c, 0x34b0bcb5, 0x391c0cb3, 0x4ed8aa4a, 0x5b9cca4f, 0x682e6ff3, 0x748f82ee, 0x78a5636f, 0x84c87814, 0x8cc70208,
        0x90befffa, 0xa4506ceb, 0xbef9a3f7, 0xc67178f2,
    ];

    pub fn sha256_hex(data: &[u8]) -> String {
        let mut h: [u32; 8] = [
            0x6a09e667, 0xbb67ae85, 0x3c6ef372, 0xa54ff53a, 0x510e527f, 0x9b05688c, 0x1f83d9ab, 0x5be0cd19,
        ];
        let mut msg = data.to_vec();
        let bit_len = (data.len() as u64).wrapping_mul(8);
        msg.push(0x80);
        while msg.len() % 64 != 56 {
            msg.push(0);
        }
        msg.extend_from_slice(&bit_len.to_be_bytes());
        for block in msg.chunks(64) {
            let mut w = [0u32; 64];
            for i in 0..16 {
                w[i] = u32::from_be_bytes([block[4 * i], block[4 * i + 1], block[4 * i + 2], block[4 * i + 3]]);
            }
            for i in 16..64 {
                let s0 = w[i - 15].rotate_right(7) ^ w[i - 15].rotate_right(18) ^ (w[i - 15] >> 3);
                let s1 = w[i - 2].rotate_right(17) ^ w[i - 2].rotate_right(19) ^ (w[i - 2] >> 10);
                w[i] = w[i - 16].wrapping_add(s0).wrapping_add(w[i - 7]).wrapping_add(s1);
            }
            let [mut a, mut b, mut c, mut d, mut e, mut f, mut g, mut hh] = h;
            for i in 0..64 {
                let s1 = e.rotate_right(6) ^ e.rotate_right(11) ^ e.rotate_right(25);
                let ch = (e & f) ^ (!e & g);
                let t1 = hh.wrapping_add(s1).wrapping_add(ch).wrapping_add(K[i]).wrapping_add(w[i]);
                let s0 = a.rotate_right(2) ^ a.rotate_right(13) ^ a.rotate_right(22);
                let maj = (a & b) ^ (a & c) ^ (b & c);
                let t2 = s0.wrapping_add(maj);
                hh = g;
                g = f;
                f = e;
                e = d.wrapping_add(t1);
                d = c;
                c = b;
                b = a;
                a = t1.wrapping_add(t2);
            }
            for (x, y) in h.iter_mut().zip([a, b, c, d, e, f, g, hh]) {
                *x = x.wrapping_add(y);
            }
        }
        h.iter().map(|x| format!("{x:08x}")).collect()
    }
}

fn random_id(rng: &mut ChaCha8Rng) -> String {
    const ALPHABET: &[u8] = b"0123456789abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ-_.@ ";
    let len = rng.gen_range(0..24);
    let mut s: String = (0..len).map(|_| ALPHABET[rng.gen_range(0..ALPHABET.len())] as char).collect();
    if rng.gen_bool(0.05) {
        s.push('é');
    }
    s
}

fn criterion_2(w: &World) -> Check {
    // Published test vectors for the oracle itself.
    ensure(
        oracle::sha256_hex(b"abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad",
        || "oracle fails the `abc` vector".into(),
    )?;
    ensure(
        oracle::sha256_hex(b"") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855",
        || "oracle fails the empty vector".into(),
    )?;
    let long = b"abcdbcdecdefdefgefghfghighijhijkijkljklmklmnlmnomnopnopq";
    ensure(
        oracle::sha256_hex(long) == "248d6a61d20638b8e5c026930c3e6039a33ce45964ff2167f6ecedd419db06c1",
        || "oracle fails the two-block vector".into(),
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    for i in 0..ANON_PAIRS {
        let (sid, internal) = (random_id(&mut rng), random_id(&mut rng));
        let expected = &oracle::sha256_hex(format!("{sid}{internal}").as_bytes())[..8];
        let got = anonymize_id(&sid, &internal);
        ensure(got == expected, || format!("pair {i} ({sid:?}, {internal:?}): {got} != {expected}"))?;
    }

    let requests = w.model.requests();
    ensure(!requests.is_empty(), || "no model requests recorded".into())?;
    let mut needles = Vec::new();
    for f in &w.setup.corpus.fixtures {
        needles.extend([f.sid.clone(), f.internal_id.clone(), f.name.to_lowercase(), f.email.to_lowercase()]);
    }
    let mut scanned = 0usize;
    for r in &requests {
        for m in &r.messages {
            let text = m.content.to_lowercase();
            scanned += text.len();
            if let Some(n) = needles.iter().find(|n| text.contains(n.as_str())) {
                return Err(format!("identity string {n:?} reached the model"));
            }
        }
    }
    Ok(format!(
        "{ANON_PAIRS} pairs match the oracle exactly; {} requests ({scanned} chars) free of {} identity strings",
        requests.len(),
        needles.len()
    ))
}

/// Non-overlap and partition, checked without the pipeline's own checker.
fn independent_invariants(r: &SegmentationResult, ids: &[String], body: &str) -> Result<(), String> {
    let mut spans: Vec<(usize, usize, &str)> = r.segments.iter().map(|s| (s.span.0, s.span.1, s.problem_id.as_str())).collect();
    spans.sort();
    for pair in spans.windows(2) {
        if pair[0].1 > pair[1].0 {
            return Err(format!("{} and {} overlap", pair[0].2, pair[1].2));
        }
    }
    for s in &r.segments {
        if s.span.0 > s.span.1 || body.get(s.span.0..s.span.1) != Some(s.text.as_str()) {
            return Err(format!("{} text is not its body slice", s.problem_id));
        }
    }
    let mut seen: Vec<&str> = r.segments.iter().map(|s| s.problem_id.as_str()).chain(r.missing.iter().map(String::as_str)).collect();
    let total = seen.len();
    seen.sort();
    seen.dedup();
    let expected: Vec<&str> = {
        let mut e: Vec<&str> = ids.iter().map(String::as_str).collect();
        e.sort();
        e
    };
    if seen.len() != total || seen != expected {
        return Err(format!("segments+missing {seen:?} do not partition {expected:?}"));
    }
    Ok(())
}

fn fixture_body(w: &World, f: &Fixture) -> String {
    let dir = w.setup.corpus.export_dir.join(&f.student_dir);
    let tex = std::fs::read_to_string(dir.join("homework.tex")).unwrap();
    extract_body(&tokenize(&tex)).text
}

fn fuzz_body(rng: &mut ChaCha8Rng) -> String {
    let pieces = [
        "%== P1 ==%\n",
        "%== P2 ==%\n",
        "%== P3 ==%\n",
        "%== P9 ==%\n",
        "%==P2==%\n",
        "\\section*{Problem 1}\n",
        "\\section*{Problem 2}\n",
        "Problem 3.\n",
        "Some work $x^2$.\n",
        "% a comment %== P1 ==%\n",
        "Ünïcødé 𝛼 text\n",
        "\n",
        "HALLUCINATE\n",
        "\\begin{align} a &= b \\end{align}\n",
    ];
    let n = rng.gen_range(0..14);
    (0..n).map(|_| *pieces.choose(rng).unwrap()).collect()
}

fn criterion_3(w: &World) -> Check {
    let spec = &w.package.segmentation;
    let fixtures = &w.setup.corpus.fixtures;

    let mut conformant = 0;
    for f in fixtures.iter().filter(|f| matches!(f.kind, FixtureKind::Conformant | FixtureKind::Injection)) {
        let body = fixture_body(w, f);
        let ep = Endpoint::new(DownBackend, 1, MAX_RETRIES);
        let r = segment(&body, spec, &ep, "m", 512).map_err(|e| e.to_string())?;
        ensure(ep.calls() == 0, || format!("{} made {} model calls", f.student_dir, ep.calls()))?;
        ensure(r.missing.is_empty() && !r.fallback_used, || format!("{} not fully segmented: {r:?}", f.student_dir))?;
        ensure(r.segments.iter().all(|s| s.method == SegmentMethod::Regex), || "non-marker segment".into())?;
        conformant += 1;
    }
    let seg_requests = w
        .model
        .requests()
        .iter()
        .filter(|r| r.messages[0].content.starts_with("You locate"))
        .count();
    let needs_fallback = fixtures
        .iter()
        .filter(|f| matches!(f.kind, FixtureKind::Markerless | FixtureKind::PartialMarkers | FixtureKind::Hallucinated))
        .count();
    ensure(seg_requests == needs_fallback, || format!("corpus run made {seg_requests} segmentation calls for {needs_fallback} non-conformant submissions"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0003);
    let fuzz_spec = SegmentationSpec::new(vec!["P1".into(), "P2".into(), "P3".into()]);
    let ep = Endpoint::new(SyntheticModel::new(), 1, MAX_RETRIES);
    for i in 0..SEGMENT_FUZZ_BODIES {
        let body = fuzz_body(&mut rng);
        let r = segment(&body, &fuzz_spec, &ep, "m", 512).map_err(|e| format!("body {i}: {e}"))?;
        independent_invariants(&r, &fuzz_spec.problem_ids, &body).map_err(|e| format!("body {i} {body:?}: {e}"))?;
    }

    let (mut recovered, mut hallucinated) = (0, 0);
    for f in fixtures {
        let ep = Endpoint::new(SyntheticModel::new(), 1, MAX_RETRIES);
        let body = match f.kind {
            FixtureKind::Markerless | FixtureKind::PartialMarkers | FixtureKind::Hallucinated => fixture_body(w, f),
            _ => continue,
        };
        let r = segment(&body, spec, &ep, "m", 512).map_err(|e| e.to_string())?;
        independent_invariants(&r, &spec.problem_ids, &body)?;
        if f.kind == FixtureKind::Hallucinated {
            ensure(r.missing == spec.problem_ids && r.segments.is_empty(), || format!("hallucinated anchors produced segments: {r:?}"))?;
            ensure(r.unverified == spec.problem_ids, || "hallucinated anchors not reported".into())?;
            hallucinated += 1;
        } else {
            ensure(r.missing.is_empty(), || format!("{:?} fixture left {:?} missing", f.kind, r.missing))?;
            ensure(r.segments.iter().any(|s| s.method == SegmentMethod::Llm), || "no model-located segment".into())?;
            recovered += 1;
        }
    }
    // The grade stage must not grade what could not be located.
    for f in fixtures.iter().filter(|f| f.kind == FixtureKind::Hallucinated) {
        let anon = anonymize_id(&f.sid, &f.internal_id);
        let g: GradeRecord = read(&Layout::new(&w.recorded).grade_file(&anon));
        ensure(g.problems.iter().all(|p| p.needs_human()), || "hallucinated fixture was graded".into())?;
    }
    ensure(recovered > 0 && hallucinated > 0, || "fixture mix lacks fallback cases".into())?;
    Ok(format!(
        "{conformant} conformant fixtures with 0 model calls; {SEGMENT_FUZZ_BODIES} fuzzed bodies hold invariants; {recovered} markerless recovered, {hallucinated} hallucinated left missing"
    ))
}

fn read<T: serde::de::DeserializeOwned>(path: &Path) -> T {
    serde_json::from_slice(&std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

/// Every achievable total of a subset of `points`.
fn subset_sums(points: &[f64]) -> Vec<f64> {
    let mut sums = vec![0.0];
    for &p in points {
        let more: Vec<f64> = sums.iter().map(|s| s + p).collect();
        sums.extend(more);
    }
    sums
}

fn walk_json(v: &Value, key: &str, f: &mut dyn FnMut(&str, &Value) -> Result<(), String>) -> Result<(), String> {
    f(key, v)?;
    match v {
        Value::Object(m) => m.iter().try_for_each(|(k, x)| walk_json(x, k, f)),
        Value::Array(a) => a.iter().try_for_each(|x| walk_json(x, key, f)),
        _ => Ok(()),
    }
}

fn criterion_4(w: &World) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0004);
    for case in 0..SCORING_PAIRS {
        let n = rng.gen_range(1..9);
        let items: Vec<RubricItem> = (0..n)
            .map(|i| RubricItem {
                item_id: format!("i{i}"),
                points: f64::from(rng.gen_range(1..=40u32)) / 4.0,
                criterion: "c".into(),
            })
            .collect();
        let rubric = Rubric { items };
        let mut verdicts: Vec<ItemVerdict> = rubric
            .items
            .iter()
            .map(|it| ItemVerdict {
                item_id: it.item_id.clone(),
                pass: rng.gen_bool(0.5),
                audit_reasoning: String::new(),
                student_hint: String::new(),
                think_trace: String::new(),
            })
            .collect();
        verdicts.shuffle(&mut rng);
        let mut expected = 0.0;
        for it in &rubric.items {
            for v in &verdicts {
                if v.item_id == it.item_id && v.pass {
                    expected += it.points;
                }
            }
        }
        let got = raw_points(&rubric, &verdicts);
        ensure(got == expected, || format!("case {case}: raw_points {got} != {expected}"))?;
    }

    let per_problem: BTreeMap<String, Vec<f64>> = w
        .package
        .problems
        .iter()
        .map(|p| (p.problem_id.clone(), subset_sums(&p.rubric.items.iter().map(|i| i.points).collect::<Vec<_>>())))
        .collect();
    let achievable: Vec<f64> = per_problem.values().flatten().copied().collect();
    let is_achievable = |x: f64| achievable.contains(&x);
    let tree = tree(&w.recorded);
    let mut values = 0usize;
    for (path, bytes) in &tree {
        if path.ends_with(".json") {
            let v: Value = serde_json::from_slice(bytes).map_err(|e| format!("{path}: {e}"))?;
            walk_json(&v, "", &mut |k, x| {
                match k {
                    "pass" => ensure(x.is_boolean(), || format!("{path}: non-boolean pass {x}"))?,
                    "raw_points" if x.is_number() => {
                        values += 1;
                        ensure(is_achievable(x.as_f64().unwrap()), || format!("{path}: raw_points {x} is not a rubric subset sum"))?
                    }
                    _ => {}
                }
                Ok(())
            })?;
        }
        if path.ends_with(".jsonl") {
            for line in String::from_utf8_lossy(bytes).lines() {
                let v: Value = serde_json::from_str(line).unwrap();
                for (pid, x) in v["entry"]["raw_points"].as_object().unwrap() {
                    values += 1;
                    let x = x.as_f64().unwrap();
                    ensure(per_problem[pid].contains(&x), || format!("{path}: {pid}={x} is partial credit"))?;
                }
            }
        }
    }
    let csv = String::from_utf8_lossy(&tree["scores.csv"]).into_owned();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    for line in csv.lines().skip(1) {
        for (col, cell) in header.iter().zip(line.split(',')).skip(4) {
            values += 1;
            let x: f64 = cell.parse().map_err(|_| format!("scores.csv: bad cell {cell}"))?;
            ensure(per_problem[*col].contains(&x), || format!("scores.csv: {col}={x} is partial credit"))?;
        }
    }
    Ok(format!("{SCORING_PAIRS} random pairs match the brute-force sum; {values} persisted per-problem scores are all rubric subset sums"))
}

fn student_facing(root: &Path) -> Vec<(String, String)> {
    tree(root)
        .into_iter()
        .filter(|(k, _)| k.starts_with("reports/") || (k.starts_with("build/") && k.ends_with(".tex")))
        .map(|(k, v)| (k, String::from_utf8_lossy(&v).into_owned()))
        .collect()
}

fn criterion_5(w: &World) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let pieces = ["<think>", "</think>", "<think", "think>", "</", "<", ">", "/", "x", "é", "{\"a\":1}", "\n", "<thi", "nk>", "</thi"];
    for case in 0..THINK_FUZZ_CASES {
        let n = rng.gen_range(0..16);
        let raw: String = (0..n).map(|_| *pieces.choose(&mut rng).unwrap()).collect();
        let split = strip_think(&raw);
        ensure(!split.clean.contains("<think>") && !split.clean.contains("</think>"), || {
            format!("case {case}: {raw:?} left {:?}", split.clean)
        })?;
    }

    let layout = Layout::new(&w.recorded);
    let mut audits = BTreeSet::new();
    let mut thinks = BTreeSet::new();
    let mut leaks = 0;
    for f in &w.setup.corpus.fixtures {
        let g: GradeRecord = read(&layout.grade_file(&anonymize_id(&f.sid, &f.internal_id)));
        for p in &g.problems {
            leaks += p.leak_events.len();
            for v in &p.verdicts {
                audits.insert(v.audit_reasoning.clone());
                if !v.think_trace.is_empty() {
                    thinks.insert(v.think_trace.clone());
                }
            }
        }
    }
    ensure(!audits.is_empty() && !thinks.is_empty(), || "corpus run produced no audit text".into())?;
    ensure(leaks > 0, || "the leak fixture did not exercise the leak guard".into())?;
    let windows: Vec<String> = reference_solutions()
        .iter()
        .flat_map(|s| {
            let chars: Vec<char> = s.chars().collect();
            (0..=chars.len().saturating_sub(SOLUTION_RUN)).map(move |i| chars[i..i + SOLUTION_RUN].iter().collect::<String>())
        })
        .collect();
    let artifacts = student_facing(&w.recorded);
    ensure(artifacts.len() >= 20, || format!("only {} student-facing files", artifacts.len()))?;
    for (path, text) in &artifacts {
        for t in ["<think>", "</think>", "AUDIT[", "REASONING for"] {
            ensure(!text.contains(t), || format!("{path} contains {t:?}"))?;
        }
        for a in audits.iter().chain(&thinks) {
            ensure(!text.contains(a.as_str()) && !text.contains(&escape_latex(a)), || format!("{path} contains audit text {a:?}"))?;
        }
        for win in &windows {
            ensure(!text.contains(win.as_str()) && !text.contains(&escape_latex(win)), || {
                format!("{path} contains solution run {win:?}")
            })?;
        }
    }
    Ok(format!(
        "{THINK_FUZZ_CASES} fuzzed replies leave no think tags; {} student-facing files free of {} audit texts, {} think traces and {} solution runs of {SOLUTION_RUN} chars ({leaks} leak(s) withheld)",
        artifacts.len(),
        audits.len(),
        thinks.len(),
        windows.len()
    ))
}

fn criterion_6() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let at = DateTime::parse_from_rfc3339(CLOCK).unwrap();
    let pids = ["P1", "P2", "P3", "P4"];
    for case in 0..REGRADE_PAIRS {
        let raws: BTreeMap<String, f64> = pids.iter().map(|p| (p.to_string(), rng.gen_range(0.0..10.0))).collect();
        let late = if rng.gen_bool(0.3) { 0.0 } else { rng.gen_range(0.0..=1.0) };
        let extra = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..5.0) };
        let original = GradeLedgerEntry {
            anon_id: "0a1b2c3d".into(),
            sid: Some(format!("sid{case}")),
            assignment_id: "hw".into(),
            pass_kind: PassKind::Original,
            final_score: ledger::compute_final(raws.values().copied(), extra, late).unwrap(),
            raw_points: raws.clone(),
            extra_credit: extra,
            late_fraction: late,
            graded_at: at,
            audit_ref: "audit/0a1b2c3d".into(),
        };
        let new: BTreeMap<String, f64> = pids
            .iter()
            .map(|p| {
                let x = match rng.gen_range(0..3) {
                    0 => raws[*p],
                    1 => rng.gen_range(0.0..10.0),
                    _ => 10.0,
                };
                (p.to_string(), x)
            })
            .collect();
        let fraction = match rng.gen_range(0..4) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..=1.0),
        };
        let c = apply_regrade(&original, &new, fraction, at, "audit/x".into()).map_err(|e| format!("case {case}: {e}"))?;
        ensure(c.pass_kind == PassKind::Correction, || format!("case {case}: wrong pass kind"))?;
        ensure(c.late_fraction.to_bits() == late.to_bits(), || format!("case {case}: late {} != {late}", c.late_fraction))?;
        ensure(c.extra_credit.to_bits() == extra.to_bits(), || format!("case {case}: extra {} != {extra}", c.extra_credit))?;
        let mut total = 0.0;
        for p in pids {
            let (o, n) = (raws[p], new[p]);
            let gain = if n > o { n - o } else { 0.0 };
            let expected = o + fraction * gain;
            ensure(c.raw_points[p].to_bits() == expected.to_bits(), || format!("case {case} {p}: {} != {expected}", c.raw_points[p]))?;
            ensure(c.raw_points[p] >= o, || format!("case {case} {p}: correction lowered a score"))?;
            total += expected;
        }
        let final_expected = (total * (1.0 - late) + extra).max(0.0);
        ensure((c.final_score - final_expected).abs() <= 1e-9, || format!("case {case}: final {} != {final_expected}", c.final_score))?;
    }
    Ok(format!("{REGRADE_PAIRS} pairs: late and extra bit-equal, blended raws bit-equal to the brute-force formula"))
}

fn heal_settings() -> HealSettings<'static> {
    HealSettings {
        model: "repair-model",
        max_output_tokens: 8192,
        max_attempts: REPAIR_ATTEMPTS,
        timeout: std::time::Duration::from_secs(10),
    }
}

fn repair_reply(src: &str) -> String {
    json!({ "corrected_source": src }).to_string()
}

fn criterion_7(w: &World) -> Check {
    let layout = Layout::new(&w.recorded);
    let f = w
        .setup
        .corpus
        .fixtures
        .iter()
        .find(|f| f.kind == FixtureKind::Conformant)
        .unwrap();
    let anon = anonymize_id(&f.sid, &f.internal_id);
    let grades: GradeRecord = read(&layout.grade_file(&anon));
    let ledger = ledger::load(&layout.identified_ledger()).unwrap();
    let entry = ledger.entries.iter().find(|e| e.anon_id == anon).unwrap();
    let student = StudentRef {
        anon_id: anon.clone(),
        sid: f.sid.clone(),
    };
    let doc = render_feedback(&student, &w.package, &grades.problems, entry);
    let mut broken = doc.clone();
    broken.tex_source = doc.tex_source.replacen("\\end{itemize}", "{\\end{itemize}", 1);
    ensure(broken.tex_source != doc.tex_source, || "could not plant an error".into())?;
    let still_broken = broken.tex_source.replacen("{\\end{itemize}", "\\end{itemize}$", 1);

    let dir = tempfile::tempdir().unwrap();
    let script = Arc::new(ScriptedBackend::new([repair_reply(&still_broken), repair_reply(&doc.tex_source)]));
    let llm = Endpoint::new(script.clone(), 1, MAX_RETRIES);
    let d = deliver(&broken, &dir.path().join("reports"), &dir.path().join("work"), &BuiltinChecker, &llm, &heal_settings())
        .map_err(|e| e.to_string())?;
    ensure(d.kind == ArtifactKind::Pdf && d.repaired, || format!("not repaired: {:?}", d.repair_log))?;
    let accepted_at = d.repair_log.iter().find(|r| r.accepted).map(|r| r.attempt).unwrap();
    ensure(accepted_at <= REPAIR_ATTEMPTS, || format!("accepted at attempt {accepted_at}"))?;
    let built = std::fs::read_to_string(dir.path().join("work").join(format!("repair-{accepted_at}")).join("feedback.tex")).unwrap();
    let (orig_blocks, new_blocks) = (extract_blocks(&doc.tex_source)?, extract_blocks(&built)?);
    ensure(orig_blocks == new_blocks, || "repaired blocks differ".into())?;
    let hint_blocks = orig_blocks.iter().filter(|b| b.name.starts_with("hint:") || b.name.starts_with("score:")).count();
    ensure(hint_blocks >= 4, || "document has too few blocks to be a meaningful check".into())?;

    let hints: Vec<&str> = grades
        .problems
        .iter()
        .flat_map(|p| &p.verdicts)
        .map(|v| v.student_hint.as_str())
        .collect();
    let target = hints[0];
    let mutated = doc.tex_source.replacen(&escape_latex(target), "Just copy the answer key.", 1);
    ensure(mutated != doc.tex_source, || "could not mutate a hint".into())?;
    let dir = tempfile::tempdir().unwrap();
    let llm = Endpoint::new(ScriptedBackend::new(vec![repair_reply(&mutated); REPAIR_ATTEMPTS as usize]), 1, MAX_RETRIES);
    let d2 = deliver(&broken, &dir.path().join("reports"), &dir.path().join("work"), &BuiltinChecker, &llm, &heal_settings())
        .map_err(|e| e.to_string())?;
    ensure(d2.kind == ArtifactKind::Text && !d2.repaired, || format!("mutating repair accepted: {:?}", d2.repair_log))?;
    ensure(d2.repair_log.len() == REPAIR_ATTEMPTS as usize && d2.repair_log.iter().all(|r| r.reason.contains("content check failed")), || {
        format!("unexpected repair log {:?}", d2.repair_log)
    })?;
    let txt = std::fs::read_to_string(&d2.artifact).map_err(|e| e.to_string())?;
    for h in &hints {
        ensure(txt.contains(h), || format!("fallback text lacks hint {h:?}"))?;
    }
    ensure(!txt.contains("Just copy the answer key."), || "fallback carries the mutated hint".into())?;
    Ok(format!(
        "planted error repaired on attempt {accepted_at} of {REPAIR_ATTEMPTS} with {} blocks unchanged; hint-mutating repair rejected {} times, text fallback carries all {} hints",
        orig_blocks.len(),
        d2.repair_log.len(),
        hints.len()
    ))
}

fn coercion_request() -> ChatRequest {
    ChatRequest {
        model: "m".into(),
        system_text: "Grade it.".into(),
        user_text: "work".into(),
        temperature: 0.0,
        max_output_tokens: 256,
        response_schema: Some(SchemaSpec::new(
            "verdict",
            vec![
                Field::required("pass", SchemaKind::Boolean),
                Field::required("item_id", SchemaKind::Enum(vec!["a".into(), "b".into()])),
                Field::optional("note", SchemaKind::String),
            ],
        )),
    }
}

fn criterion_8() -> Check {
    let bad = [
        "not json at all",
        "<think>{\"pass\": true, \"item_id\": \"a\"}</think>",
        "{\"pass\": \"yes\", \"item_id\": \"a\"}",
        "{\"pass\": true, \"item_id\": \"z\"}",
        "{\"item_id\": \"a\"}",
    ];
    let good = "<think>fine</think>```json\n{\"pass\": false, \"item_id\": \"b\", \"note\": \"ok\"}\n```";
    let request = coercion_request();
    let schema = request.response_schema.clone().unwrap();
    let mut successes = 0;
    for k in 1..=MAX_RETRIES as usize {
        for offset in 0..bad.len() {
            let mut replies: Vec<String> = (0..k - 1).map(|i| bad[(offset + i) % bad.len()].to_string()).collect();
            replies.push(good.to_string());
            let script = Arc::new(ScriptedBackend::new(replies));
            let ep = Endpoint::new(script.clone(), 1, MAX_RETRIES);
            let s = ep.complete_structured(&request).map_err(|e| format!("success expected on attempt {k}: {e}"))?;
            ensure(s.attempts.len() == k, || format!("attempt log {} for success on {k}", s.attempts.len()))?;
            ensure(schema.validate(&s.value).is_ok(), || "returned value does not re-validate".into())?;
            let seen = script.requests();
            for (i, req) in seen.iter().enumerate().skip(1) {
                let feedback = &req.messages.last().unwrap().content;
                let err = s.attempts[i - 1].error.as_deref().unwrap_or_default();
                ensure(!err.is_empty() && feedback.contains(err), || format!("retry {i} lacks validator feedback"))?;
                ensure(req.messages.len() == 2 + 2 * i, || "conversation not extended".into())?;
            }
            successes += 1;
        }
    }
    let too_many: Vec<String> = (0..MAX_RETRIES as usize + 1).map(|i| bad[i % bad.len()].to_string()).chain([good.to_string()]).collect();
    let ep = Endpoint::new(ScriptedBackend::new(too_many), 1, MAX_RETRIES);
    match ep.complete_structured(&request) {
        Err(LlmError::SchemaCoercion { attempts }) => {
            ensure(attempts.len() == MAX_RETRIES as usize, || format!("attempt log has {} entries", attempts.len()))?;
            ensure(attempts.iter().all(|a| a.error.is_some() && !a.raw_text.is_empty()), || "attempt log incomplete".into())?;
            ensure(ep.calls() == MAX_RETRIES as usize, || format!("{} calls for {MAX_RETRIES} retries", ep.calls()))?;
        }
        other => return Err(format!("expected SchemaCoercion, got {other:?}")),
    }
    Ok(format!(
        "{successes} scripted conversations succeed on attempt <= {MAX_RETRIES} with validator feedback; {} bad replies raise SchemaCoercion with a {MAX_RETRIES}-entry attempt log",
        MAX_RETRIES
    ))
}

fn main() {
    let started = Instant::now();
    let world = catch_unwind(world);
    let world = world.as_ref().ok();
    let criteria: [Criterion; 8] = [
        ("end-to-end determinism", Box::new(|| criterion_1(world.ok_or("corpus run failed")?))),
        ("anonymization", Box::new(|| criterion_2(world.ok_or("corpus run failed")?))),
        ("segmentation", Box::new(|| criterion_3(world.ok_or("corpus run failed")?))),
        ("binary scoring", Box::new(|| criterion_4(world.ok_or("corpus run failed")?))),
        ("think-strip and channel separation", Box::new(|| criterion_5(world.ok_or("corpus run failed")?))),
        ("regrade preservation", Box::new(criterion_6)),
        ("self-heal", Box::new(|| criterion_7(world.ok_or("corpus run failed")?))),
        ("schema coercion", Box::new(criterion_8)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            Err(e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {} ({name}): {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} ({name}): {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed in {:.1}s", 8 - failed, started.elapsed().as_secs_f64());
    if failed > 0 {
        std::process::exit(1);
    }
}
