//! The four pipeline stages and the corrections pass.
//!
//! Every stage reads and writes files under one output directory, so each
//! can be run on its own and inspected in between:
//!
//! ```text
//! ingest_report.json
//! stages/ingest.json
//! stages/segment/<anon_id>.json
//! stages/grade/<anon_id>.json
//! reports/<sid>.pdf | reports/<sid>.txt
//! build/<sid>/                      compiler workdir
//! audit/<anon_id>/audit.json, report.json
//! ledger/grades.anon.jsonl, ledger/grades.identified.jsonl
//! scores.csv, summary.json, summary.txt, timings.json
//! ```
//!
//! A corrections pass writes the same tree under `corrections/`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use chrono::{DateTime, FixedOffset, Utc};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use lata_core::config::Config;
use lata_core::grade::{grade_problem, AssignmentPackage, GradeContext, GradeStatus, ProblemGrade};
use lata_core::ingest::{llm_view, load_export, IngestReport, StudentSubmission};
use lata_core::ledger::{
    apply_regrade, compute_final, export_scores, find_original, AuditBundle, GradeLedgerEntry, LedgerWriter, PassKind,
    SegmentationAudit, ANON_LEDGER_FILE, IDENTIFIED_LEDGER_FILE,
};
use lata_core::llm::Endpoint;
use lata_core::report::{artifact_stem, compiler_for, deliver, render_feedback, ArtifactKind, HealSettings, RepairAttempt, StudentRef};
use lata_core::segment::{segment, SegmentationResult};
use lata_core::texparse::{extract_body, extract_macros, sanitize_for_llm, tokenize, SanitizeReport};

use crate::summary::{Counts, RunSummary, StudentStatus};

#[derive(Debug)]
pub enum Failure {
    /// Bad or missing input; nothing should be graded.
    Input(String),
    Io(String),
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Input(m) | Failure::Io(m) => f.write_str(m),
        }
    }
}

fn io_failure(path: &Path) -> impl FnOnce(std::io::Error) -> Failure + '_ {
    move |e| Failure::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corrections(&self) -> Layout {
        Layout::new(self.root.join("corrections"))
    }

    pub fn ingest_file(&self) -> PathBuf {
        self.root.join("stages").join("ingest.json")
    }

    pub fn ingest_report(&self) -> PathBuf {
        self.root.join("ingest_report.json")
    }

    pub fn segment_file(&self, anon_id: &str) -> PathBuf {
        self.root.join("stages").join("segment").join(format!("{anon_id}.json"))
    }

    pub fn grade_file(&self, anon_id: &str) -> PathBuf {
        self.root.join("stages").join("grade").join(format!("{anon_id}.json"))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn build(&self, stem: &str) -> PathBuf {
        self.root.join("build").join(stem)
    }

    pub fn audit(&self, anon_id: &str) -> PathBuf {
        self.root.join("audit").join(anon_id)
    }

    pub fn ledger_dir(&self) -> PathBuf {
        self.root.join("ledger")
    }

    pub fn identified_ledger(&self) -> PathBuf {
        self.ledger_dir().join(IDENTIFIED_LEDGER_FILE)
    }

    pub fn anon_ledger(&self) -> PathBuf {
        self.ledger_dir().join(ANON_LEDGER_FILE)
    }

    pub fn scores(&self) -> PathBuf {
        self.root.join("scores.csv")
    }

    pub fn summary_json(&self) -> PathBuf {
        self.root.join("summary.json")
    }

    pub fn summary_txt(&self) -> PathBuf {
        self.root.join("summary.txt")
    }

    pub fn timings(&self) -> PathBuf {
        self.root.join("timings.json")
    }

    fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().replace('\\', "/")
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_failure(dir))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("stage records serialize");
    text.push('\n');
    std::fs::write(path, text).map_err(io_failure(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path, produced_by: &str) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Failure::Input(format!("{}: {e} (run `lata {produced_by}` first)", path.display()))
    })?;
    serde_json::from_str(&text).map_err(|e| Failure::Input(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStage {
    pub submissions: Vec<StudentSubmission>,
    pub report: IngestReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubmissionStatus {
    Ready,
    Ungradeable { reason: String },
    IdentityLeak { message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub anon_id: String,
    pub status: SubmissionStatus,
    /// Sanitized macro definitions shown to the grader.
    pub macro_block: String,
    pub parse_errors: Vec<String>,
    pub missing_document_env: bool,
    pub sanitize: SanitizeReport,
    pub segmentation: SegmentationResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub anon_id: String,
    pub problems: Vec<ProblemGrade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeliveryRecord {
    pub artifact: String,
    pub kind: ArtifactKind,
    pub repaired: bool,
    pub pdf_pending: bool,
    pub compile_error: Option<String>,
    pub repair_log: Vec<RepairAttempt>,
}

pub struct Context {
    pub config: Config,
    pub layout: Layout,
    pub endpoint: Endpoint,
    pub pool: rayon::ThreadPool,
    pub clock: Option<DateTime<FixedOffset>>,
}

impl Context {
    pub fn new(config: Config, layout: Layout, endpoint: Endpoint, workers: usize, clock: Option<DateTime<FixedOffset>>) -> Self {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers.max(1))
            .build()
            .expect("thread pool builds");
        Self {
            config,
            layout,
            endpoint,
            pool,
            clock,
        }
    }

    fn now(&self) -> DateTime<FixedOffset> {
        self.clock.unwrap_or_else(|| Utc::now().fixed_offset())
    }

    /// Ordered parallel map over the worker pool.
    fn par_map<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(usize, &T) -> R + Sync + Send) -> Vec<R> {
        self.pool
            .install(|| items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect())
    }
}

pub fn stage_ingest(layout: &Layout, export_dir: &Path) -> Result<IngestStage, Failure> {
    let batch = load_export(export_dir).map_err(|e| Failure::Input(e.to_string()))?;
    let stage = IngestStage {
        submissions: batch.submissions,
        report: batch.report,
    };
    write_json(&layout.ingest_report(), &stage.report)?;
    write_json(&layout.ingest_file(), &stage)?;
    Ok(stage)
}

fn segment_one(ctx: &Context, package: &AssignmentPackage, sub: &StudentSubmission) -> SegmentRecord {
    let mut record = SegmentRecord {
        anon_id: sub.anon_id.clone(),
        status: SubmissionStatus::Ready,
        macro_block: String::new(),
        parse_errors: Vec::new(),
        missing_document_env: false,
        sanitize: SanitizeReport::default(),
        segmentation: SegmentationResult::default(),
    };
    let Some(source) = &sub.tex_source else {
        record.status = SubmissionStatus::Ungradeable {
            reason: "ungradeable: no source".into(),
        };
        return record;
    };
    let stream = tokenize(source);
    let macros = extract_macros(&stream);
    let body = extract_body(&stream);
    record.parse_errors = macros.errors.iter().map(ToString::to_string).collect();
    record.missing_document_env = body.missing_document_env;
    let sanitized = sanitize_for_llm(&macros.macro_block(), &body.text);
    record.macro_block = sanitized.macro_block.clone();
    record.sanitize = sanitized.report.clone();
    if let Err(e) = llm_view(sub, &sanitized.macro_block, &sanitized.body, ctx.config.anonymize()) {
        record.status = SubmissionStatus::IdentityLeak { message: e.to_string() };
        return record;
    }
    let llm = &ctx.config.llm;
    match segment(&body.text, &package.segmentation, &ctx.endpoint, &llm.segmenter_model, llm.max_output_tokens) {
        Ok(result) => record.segmentation = result,
        Err(e) => {
            record.status = SubmissionStatus::Ungradeable {
                reason: format!("segmentation: {e}"),
            }
        }
    }
    record
}

pub fn stage_segment(ctx: &Context, package: &AssignmentPackage) -> Result<Vec<SegmentRecord>, Failure> {
    let ingest: IngestStage = read_json(&ctx.layout.ingest_file(), "ingest")?;
    let records = ctx.par_map(&ingest.submissions, |_, sub| segment_one(ctx, package, sub));
    for r in &records {
        write_json(&ctx.layout.segment_file(&r.anon_id), r)?;
    }
    Ok(records)
}

fn grade_one(ctx: &Context, package: &AssignmentPackage, sub: &StudentSubmission, seg: &SegmentRecord) -> GradeRecord {
    let cfg = &ctx.config;
    let model = cfg.llm.grader_model.as_str();
    let flag_all = |reason: &str, unavailable: bool| {
        package
            .problems
            .iter()
            .map(|p| ProblemGrade::needs_human_grading(p, model, reason.to_string(), unavailable))
            .collect()
    };
    let problems = match &seg.status {
        SubmissionStatus::Ungradeable { reason } => flag_all(reason, false),
        SubmissionStatus::IdentityLeak { message } => flag_all(message, false),
        SubmissionStatus::Ready => {
            let label = if cfg.anonymize() { sub.anon_id.as_str() } else { sub.sid.as_str() };
            let ctx_g = GradeContext {
                label,
                macro_block: &seg.macro_block,
                suspicious: seg.sanitize.suspicious,
                model,
                max_output_tokens: cfg.llm.max_output_tokens,
                hint_leak_min_run: cfg.grading.hint_leak_min_run,
            };
            let result = &seg.segmentation;
            package
                .problems
                .iter()
                .map(|p| {
                    let found = result.segment(&p.problem_id);
                    if found.is_none() {
                        if let Some(fail) = &result.llm_failure {
                            return ProblemGrade::needs_human_grading(
                                p,
                                model,
                                format!("segmentation fallback failed: {}", fail.message),
                                fail.unavailable,
                            );
                        }
                        if result.unverified.contains(&p.problem_id) {
                            return ProblemGrade::needs_human_grading(
                                p,
                                model,
                                "segmentation anchors could not be verified".into(),
                                false,
                            );
                        }
                    }
                    grade_problem(found.map(|s| s.text.as_str()), found.map(|s| s.method), p, &ctx.endpoint, &ctx_g)
                })
                .collect()
        }
    };
    GradeRecord {
        anon_id: sub.anon_id.clone(),
        problems,
    }
}

pub fn stage_grade(ctx: &Context, package: &AssignmentPackage) -> Result<Vec<GradeRecord>, Failure> {
    let ingest: IngestStage = read_json(&ctx.layout.ingest_file(), "ingest")?;
    let segs = ingest
        .submissions
        .iter()
        .map(|s| read_json::<SegmentRecord>(&ctx.layout.segment_file(&s.anon_id), "segment"))
        .collect::<Result<Vec<_>, _>>()?;
    let pairs: Vec<_> = ingest.submissions.iter().zip(&segs).collect();
    let records = ctx.par_map(&pairs, |_, (sub, seg)| grade_one(ctx, package, sub, seg));
    for r in &records {
        write_json(&ctx.layout.grade_file(&r.anon_id), r)?;
    }
    Ok(records)
}

/// How the report stage turns grades into ledger entries.
pub enum ReportMode {
    Original,
    /// Entries of the original ledger; each student gets a correction entry
    /// against their original.
    Correction { originals: Vec<GradeLedgerEntry> },
}

struct Reported {
    entry: GradeLedgerEntry,
    status: StudentStatus,
    delivery: DeliveryRecord,
    fallback_used: bool,
    suspicious: bool,
    leaks: usize,
}

fn flags_for(seg: &SegmentRecord, grades: &[ProblemGrade]) -> (Vec<String>, bool) {
    let mut flags = Vec::new();
    let mut manual = false;
    match &seg.status {
        SubmissionStatus::Ready => {}
        SubmissionStatus::Ungradeable { reason } => {
            flags.push(reason.clone());
            manual = true;
        }
        SubmissionStatus::IdentityLeak { .. } => {
            flags.push("identity string in submission".into());
            manual = true;
        }
    }
    for g in grades {
        match &g.status {
            GradeStatus::NeedsHumanGrading { reason, .. } if seg.status == SubmissionStatus::Ready => {
                flags.push(format!("{}: needs human grading ({reason})", g.problem_id));
                manual = true;
            }
            GradeStatus::NeedsHumanGrading { .. } => manual = true,
            GradeStatus::NoWork => flags.push(format!("{}: no work found", g.problem_id)),
            GradeStatus::Graded => {}
        }
        if !g.leak_events.is_empty() {
            flags.push(format!("{}: {} hint(s) withheld by leak guard", g.problem_id, g.leak_events.len()));
        }
    }
    if seg.sanitize.suspicious || grades.iter().any(|g| g.sanitize.suspicious) {
        flags.push("suspicious content".into());
    }
    (flags, manual)
}

#[allow(clippy::too_many_arguments)]
fn report_one(
    ctx: &Context,
    package: &AssignmentPackage,
    mode: &ReportMode,
    sub: &StudentSubmission,
    seg: &SegmentRecord,
    mut grades: Vec<ProblemGrade>,
    graded_at: DateTime<FixedOffset>,
) -> Result<Reported, Failure> {
    let layout = &ctx.layout;
    let stem = artifact_stem(&sub.sid);
    for g in &mut grades {
        if let Some(p) = package.problem(&g.problem_id) {
            g.rescore(&p.rubric);
        }
    }
    let raws: BTreeMap<String, f64> = package
        .problems
        .iter()
        .map(|p| {
            let raw = grades.iter().find(|g| g.problem_id == p.problem_id).map_or(0.0, |g| g.raw_points);
            (p.problem_id.clone(), raw)
        })
        .collect();
    let audit_dir = layout.audit(&sub.anon_id);
    let audit_ref = layout.relative(&audit_dir);
    let entry = match mode {
        ReportMode::Original => {
            let late = ctx
                .config
                .grading
                .late_policy
                .penalty(sub.metadata.submitted_at, sub.metadata.due_at);
            let extra = sub.metadata.extra_credit.max(0.0);
            GradeLedgerEntry {
                anon_id: sub.anon_id.clone(),
                sid: Some(sub.sid.clone()),
                assignment_id: package.assignment_id.clone(),
                pass_kind: PassKind::Original,
                final_score: compute_final(raws.values().copied(), extra, late).map_err(|e| Failure::Input(e.to_string()))?,
                raw_points: raws,
                extra_credit: extra,
                late_fraction: late,
                graded_at,
                audit_ref,
            }
        }
        ReportMode::Correction { originals } => {
            let original = find_original(originals, &sub.sid, &package.assignment_id).map_err(|e| Failure::Input(e.to_string()))?;
            apply_regrade(original, &raws, ctx.config.grading.correction_credit_fraction, graded_at, audit_ref)
                .map_err(|e| Failure::Input(e.to_string()))?
        }
    };

    AuditBundle {
        anon_id: sub.anon_id.clone(),
        assignment_id: package.assignment_id.clone(),
        pass_kind: entry.pass_kind,
        sanitize: seg.sanitize.clone(),
        segmentation: SegmentationAudit::from_result(&seg.segmentation),
        problems: grades.clone(),
    }
    .write(&audit_dir)
    .map_err(|e| Failure::Io(e.to_string()))?;

    let student = StudentRef {
        anon_id: sub.anon_id.clone(),
        sid: sub.sid.clone(),
    };
    let doc = render_feedback(&student, package, &grades, &entry);
    let compiler = compiler_for(&ctx.config.report.compiler);
    let heal = HealSettings {
        model: &ctx.config.llm.grader_model,
        max_output_tokens: ctx.config.llm.max_output_tokens,
        max_attempts: ctx.config.report.repair_max_attempts,
        timeout: Duration::from_secs_f64(ctx.config.report.compile_timeout_secs),
    };
    let d = deliver(&doc, &layout.reports(), &layout.build(&stem), compiler.as_ref(), &ctx.endpoint, &heal)
        .map_err(|e| Failure::Io(e.to_string()))?;
    let delivery = DeliveryRecord {
        artifact: layout.relative(&d.artifact),
        kind: d.kind,
        repaired: d.repaired,
        pdf_pending: d.pdf_pending,
        compile_error: d.compile_error.clone(),
        repair_log: d.repair_log.clone(),
    };
    write_json(&audit_dir.join("report.json"), &delivery)?;

    let (mut flags, manual) = flags_for(seg, &grades);
    if d.repaired {
        flags.push("pdf produced by automated repair".into());
    }
    if d.pdf_pending {
        flags.push("pdf pending: no LaTeX compiler".into());
    } else if d.kind == ArtifactKind::Text {
        flags.push("plain-text fallback".into());
    }
    let status = StudentStatus {
        sid: sub.sid.clone(),
        anon_id: sub.anon_id.clone(),
        outcome: if manual { "flagged" } else { "graded" }.into(),
        final_score: entry.final_score,
        artifact: delivery.artifact.clone(),
        flags,
    };
    Ok(Reported {
        fallback_used: seg.segmentation.fallback_used,
        suspicious: seg.sanitize.suspicious || grades.iter().any(|g| g.sanitize.suspicious),
        leaks: grades.iter().map(|g| g.leak_events.len()).sum(),
        entry,
        status,
        delivery,
    })
}

/// Whether any segmentation or grading call found the endpoint unusable.
pub fn endpoint_unavailable(segs: &[SegmentRecord], grades: &[GradeRecord]) -> bool {
    segs.iter()
        .any(|s| s.segmentation.llm_failure.as_ref().is_some_and(|f| f.unavailable))
        || grades.iter().flat_map(|g| &g.problems).any(|p| {
            matches!(p.status, GradeStatus::NeedsHumanGrading { unavailable: true, .. })
        })
}

pub fn stage_report(ctx: &Context, package: &AssignmentPackage, mode: &ReportMode) -> Result<RunSummary, Failure> {
    let layout = &ctx.layout;
    let ingest: IngestStage = read_json(&layout.ingest_file(), "ingest")?;
    let mut segs = Vec::new();
    let mut grades = Vec::new();
    for s in &ingest.submissions {
        segs.push(read_json::<SegmentRecord>(&layout.segment_file(&s.anon_id), "segment")?);
        grades.push(read_json::<GradeRecord>(&layout.grade_file(&s.anon_id), "grade")?);
    }
    std::fs::create_dir_all(layout.ledger_dir()).map_err(io_failure(&layout.ledger_dir()))?;
    let writer = LedgerWriter::spawn(&layout.anon_ledger(), &layout.identified_ledger()).map_err(|e| Failure::Io(e.to_string()))?;
    let graded_at = ctx.now();
    let items: Vec<_> = ingest.submissions.iter().zip(&segs).zip(&grades).collect();
    let results = ctx.par_map(&items, |i, ((sub, seg), grade)| {
        let r = report_one(ctx, package, mode, sub, seg, grade.problems.clone(), graded_at)?;
        writer
            .sender()
            .send(i, r.entry.clone())
            .map_err(|e| Failure::Io(e.to_string()))?;
        Ok::<_, Failure>(r)
    });
    writer.finish().map_err(|e| Failure::Io(e.to_string()))?;
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    let mut entries: Vec<GradeLedgerEntry> = match mode {
        ReportMode::Original => Vec::new(),
        ReportMode::Correction { originals } => originals.clone(),
    };
    entries.extend(results.iter().map(|r| r.entry.clone()));
    let problem_ids: Vec<String> = package.problems.iter().map(|p| p.problem_id.clone()).collect();
    export_scores(&entries, &problem_ids, &layout.scores()).map_err(|e| Failure::Io(e.to_string()))?;

    let mut counts = Counts {
        submissions: results.len(),
        ..Default::default()
    };
    for r in &results {
        if r.status.outcome == "graded" {
            counts.graded += 1;
        } else {
            counts.flagged_manual += 1;
        }
        counts.llm_fallback_segmentations += usize::from(r.fallback_used);
        counts.repairs_attempted += usize::from(!r.delivery.repair_log.is_empty());
        counts.repairs_succeeded += usize::from(r.delivery.repaired);
        counts.leak_events += r.leaks;
        counts.suspicious_sanitize += usize::from(r.suspicious);
        match r.delivery.kind {
            ArtifactKind::Pdf => counts.pdf_reports += 1,
            ArtifactKind::Text => counts.text_fallbacks += 1,
        }
        counts.pdf_pending += usize::from(r.delivery.pdf_pending);
    }
    let summary = RunSummary {
        assignment_id: package.assignment_id.clone(),
        pass_kind: match mode {
            ReportMode::Original => "original".into(),
            ReportMode::Correction { .. } => "correction".into(),
        },
        counts,
        students: results.into_iter().map(|r| r.status).collect(),
        skipped: Vec::new(),
        endpoint_unavailable: endpoint_unavailable(&segs, &grades),
    };
    Ok(summary)
}

pub fn write_summary(layout: &Layout, summary: &RunSummary) -> Result<(), Failure> {
    write_json(&layout.summary_json(), summary)?;
    std::fs::write(layout.summary_txt(), summary.to_text()).map_err(io_failure(&layout.summary_txt()))
}

/// Drops students without an original entry (and those already corrected)
/// from a corrections export, returning their sids.
pub fn filter_corrections(
    stage: &mut IngestStage,
    originals: &[GradeLedgerEntry],
    already_corrected: &[GradeLedgerEntry],
    assignment_id: &str,
) -> Vec<String> {
    let mut skipped = Vec::new();
    stage.submissions.retain(|s| {
        let known = find_original(originals, &s.sid, assignment_id).is_ok();
        let done = already_corrected
            .iter()
            .any(|e| e.pass_kind == PassKind::Correction && e.student_key() == s.sid && e.assignment_id == assignment_id);
        if !known || done {
            skipped.push(s.sid.clone());
        }
        known && !done
    });
    skipped
}
