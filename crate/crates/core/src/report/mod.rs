//! Student feedback documents.
//!
//! Feedback is rendered from a fixed template in which every score and hint
//! sits between `%% BEGIN-BLOCK <name>` and `%% END-BLOCK` comment lines.
//! The blocks are what the student reads, so a compile repair is accepted
//! only if it leaves their text untouched. When no PDF can be produced the
//! student gets a plain-text rendering instead.

mod compile;

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grade::{AssignmentPackage, GradeStatus, ProblemGrade};
use crate::ledger::{GradeLedgerEntry, PassKind};
use crate::llm::{ChatRequest, Endpoint, Field, SchemaKind, SchemaSpec};

pub use compile::{check_structure, compiler_for, text_pdf, BuiltinChecker, Compiler, ProcessCompiler, RawCompile, StructureError, BUILTIN_COMPILER};

pub const TEX_NAME: &str = "feedback.tex";
pub const UNDER_REVIEW: &str = "This problem is under human review.";

const BEGIN: &str = "%% BEGIN-BLOCK ";
const END: &str = "%% END-BLOCK";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("LaTeX compiler `{program}` not found")]
    CompilerMissing { program: String },
    #[error("compile exceeded {secs} s")]
    Timeout { secs: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudentRef {
    pub anon_id: String,
    pub sid: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeedbackDocument {
    pub student: StudentRef,
    pub tex_source: String,
    /// Same content as plain text, used when no PDF can be built.
    pub plain_text: String,
}

/// Makes text inert inside LaTeX.
pub fn escape_latex(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '\\' => out.push_str("\\textbackslash{}"),
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            '#' | '$' | '%' | '&' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            c if c.is_control() && c != '\n' && c != '\t' => {}
            c => out.push(c),
        }
    }
    out
}

/// Points for display: at most two decimals, no trailing zeros.
pub fn fmt_points(x: f64) -> String {
    let s = format!("{:.2}", (x * 100.0).round() / 100.0);
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Filesystem-safe artifact stem for a sid.
pub fn artifact_stem(sid: &str) -> String {
    let s: String = sid
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect();
    if s.is_empty() || s.starts_with('.') {
        format!("_{s}")
    } else {
        s
    }
}

struct Writer {
    tex: String,
    text: String,
}

impl Writer {
    fn block(&mut self, name: &str, tex: &str) {
        self.tex.push_str(&format!("{BEGIN}{name}\n{tex}\n{END}\n"));
    }
}

/// Renders the feedback document. Problem scores and totals come from the
/// ledger entry; marks and hints from the grades.
pub fn render_feedback(
    student: &StudentRef,
    package: &AssignmentPackage,
    grades: &[ProblemGrade],
    entry: &GradeLedgerEntry,
) -> FeedbackDocument {
    let mut w = Writer {
        tex: String::new(),
        text: String::new(),
    };
    let pass_label = match entry.pass_kind {
        PassKind::Original => "",
        PassKind::Correction => " (corrections pass)",
    };
    w.tex.push_str(
        "\\documentclass[11pt]{article}\n\\usepackage[T1]{fontenc}\n\\usepackage[utf8]{inputenc}\n\\usepackage[margin=1in]{geometry}\n\\begin{document}\n",
    );
    w.tex.push_str(&format!(
        "\\section*{{Feedback: {}{}}}\nSubmission \\texttt{{{}}}\n\n",
        escape_latex(&package.assignment_id),
        pass_label,
        escape_latex(&student.anon_id)
    ));
    w.text.push_str(&format!(
        "Feedback: {}{}\nSubmission {}\n\n",
        package.assignment_id, pass_label, student.anon_id
    ));

    let totals = [
        format!("Points: {} / {}", fmt_points(entry.raw_total()), fmt_points(package.total_points)),
        format!("Late penalty: {}%", fmt_points(entry.late_fraction * 100.0)),
        format!("Extra credit: {}", fmt_points(entry.extra_credit)),
        format!("Final score: {}", fmt_points(entry.final_score)),
    ];
    let totals_tex: Vec<String> = totals.iter().map(|t| escape_latex(t)).collect();
    w.block("score:total", &totals_tex.join("\\par\n"));
    for t in &totals {
        w.text.push_str(t);
        w.text.push('\n');
    }

    for problem in &package.problems {
        let pid = &problem.problem_id;
        let credited = entry.raw_points.get(pid).copied().unwrap_or(0.0);
        let score = format!("Credited: {} / {}", fmt_points(credited), fmt_points(problem.rubric.total()));
        w.tex.push_str(&format!("\n\\subsection*{{Problem {}}}\n", escape_latex(pid)));
        w.block(&format!("score:{pid}"), &escape_latex(&score));
        w.text.push_str(&format!("\nProblem {pid}\n{score}\n"));

        let grade = grades.iter().find(|g| &g.problem_id == pid);
        let under_review = match grade {
            None => true,
            Some(g) => matches!(g.status, GradeStatus::NeedsHumanGrading { .. }),
        };
        if under_review {
            w.block(&format!("review:{pid}"), UNDER_REVIEW);
            w.text.push_str(&format!("{UNDER_REVIEW}\n"));
            continue;
        }
        let grade = grade.expect("checked above");
        w.tex.push_str("\\begin{itemize}\n");
        for item in &problem.rubric.items {
            let Some(v) = grade.verdicts.iter().find(|v| v.item_id == item.item_id) else {
                continue;
            };
            let mark = if v.pass { "PASS" } else { "FAIL" };
            let pts = fmt_points(item.points);
            w.tex.push_str("\\item\n");
            w.block(
                &format!("mark:{pid}:{}", item.item_id),
                &format!("\\textbf{{{mark}}} ({pts} pts) {}", escape_latex(&item.criterion)),
            );
            w.tex.push_str("\\par\n");
            w.block(&format!("hint:{pid}:{}", item.item_id), &escape_latex(&v.student_hint));
            w.text.push_str(&format!("  [{mark}] ({pts} pts) {}\n", item.criterion));
            w.text.push_str(&format!("      {}\n", v.student_hint.trim_end()));
        }
        w.tex.push_str("\\end{itemize}\n");
    }
    w.tex.push_str("\\end{document}\n");
    FeedbackDocument {
        student: student.clone(),
        tex_source: w.tex,
        plain_text: w.text,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub text: String,
}

/// The named blocks of a document, in order. Text is compared with
/// surrounding whitespace trimmed.
pub fn extract_blocks(tex: &str) -> Result<Vec<Block>, String> {
    let mut blocks = Vec::new();
    let mut open: Option<(String, Vec<&str>)> = None;
    for (n, line) in tex.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix(BEGIN.trim_end()) {
            if open.is_some() {
                return Err(format!("line {}: nested block", n + 1));
            }
            open = Some((name.trim().to_string(), Vec::new()));
        } else if trimmed == END {
            let (name, lines) = open.take().ok_or_else(|| format!("line {}: END-BLOCK without BEGIN-BLOCK", n + 1))?;
            blocks.push(Block {
                name,
                text: lines.join("\n").trim().to_string(),
            });
        } else if let Some((_, lines)) = open.as_mut() {
            lines.push(line);
        }
    }
    match open {
        Some((name, _)) => Err(format!("block `{name}` never closed")),
        None => Ok(blocks),
    }
}

/// Names the first block whose text differs, if any.
pub fn blocks_changed(original: &str, candidate: &str) -> Option<String> {
    let a = match extract_blocks(original) {
        Ok(a) => a,
        Err(e) => return Some(format!("original: {e}")),
    };
    let b = match extract_blocks(candidate) {
        Ok(b) => b,
        Err(e) => return Some(e),
    };
    for (x, y) in a.iter().zip(&b) {
        if x != y {
            return Some(format!("block `{}` changed", x.name));
        }
    }
    match a.len().cmp(&b.len()) {
        std::cmp::Ordering::Greater => Some(format!("block `{}` removed", a[b.len()].name)),
        std::cmp::Ordering::Less => Some(format!("block `{}` added", b[a.len()].name)),
        std::cmp::Ordering::Equal => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompileStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompileOutcome {
    pub status: CompileStatus,
    pub pdf_path: Option<PathBuf>,
    pub log_excerpt: String,
    pub attempts: u32,
}

/// The first `!` error line with two lines before and five after, or the
/// log tail when there is none.
pub fn log_excerpt(log: &str) -> String {
    let lines: Vec<&str> = log.lines().collect();
    match lines.iter().position(|l| l.starts_with('!')) {
        Some(i) => lines[i.saturating_sub(2)..(i + 6).min(lines.len())].join("\n"),
        None => lines[lines.len().saturating_sub(10)..].join("\n"),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ReportError> {
    std::fs::write(path, contents).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Compiles `tex_source` in `workdir`. Success requires a clean exit and a
/// nonempty PDF.
pub fn compile_source(
    tex_source: &str,
    workdir: &Path,
    compiler: &dyn Compiler,
    timeout: Duration,
) -> Result<CompileOutcome, ReportError> {
    std::fs::create_dir_all(workdir).map_err(|source| ReportError::Io {
        path: workdir.to_path_buf(),
        source,
    })?;
    let pdf = workdir.join(TEX_NAME.replace(".tex", ".pdf"));
    let _ = std::fs::remove_file(&pdf);
    write_file(&workdir.join(TEX_NAME), tex_source)?;
    let raw = compiler.run(workdir, TEX_NAME, timeout)?;
    let pdf_ok = std::fs::metadata(&pdf).map(|m| m.len() > 0).unwrap_or(false);
    let success = raw.exit_ok && pdf_ok;
    Ok(CompileOutcome {
        status: if success { CompileStatus::Success } else { CompileStatus::Failure },
        pdf_path: success.then_some(pdf),
        log_excerpt: if success { String::new() } else { log_excerpt(&raw.log) },
        attempts: 1,
    })
}

pub fn compile_pdf(
    doc: &FeedbackDocument,
    workdir: &Path,
    compiler: &dyn Compiler,
    timeout: Duration,
) -> Result<CompileOutcome, ReportError> {
    compile_source(&doc.tex_source, workdir, compiler, timeout)
}

#[derive(Debug, Clone, Copy)]
pub struct HealSettings<'a> {
    pub model: &'a str,
    pub max_output_tokens: u32,
    pub max_attempts: u32,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairAttempt {
    pub attempt: u32,
    pub accepted: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HealOutcome {
    pub outcome: CompileOutcome,
    pub repair_log: Vec<RepairAttempt>,
    pub repaired_source: Option<String>,
}

const REPAIR_SYSTEM: &str = "You repair LaTeX documents that failed to compile. \
Return the complete corrected source in corrected_source. Change only what is needed to fix the reported error. \
Lines starting with `%% BEGIN-BLOCK` and `%% END-BLOCK` delimit feedback blocks: keep those marker lines exactly, \
and do not change, remove, reorder or add any text between them.";

pub fn repair_schema() -> SchemaSpec {
    SchemaSpec::new("latex_repair", vec![Field::required("corrected_source", SchemaKind::String)])
}

pub fn build_repair_prompt(source: &str, failure: &str, settings: &HealSettings<'_>) -> ChatRequest {
    ChatRequest {
        model: settings.model.to_string(),
        system_text: REPAIR_SYSTEM.to_string(),
        user_text: format!("## Compiler error\n{failure}\n\n## Source\n{source}"),
        temperature: 0.0,
        max_output_tokens: settings.max_output_tokens,
        response_schema: Some(repair_schema()),
    }
}

/// Bounded repair loop after a failed compile. Each round shows the model
/// the original source and the latest failure; a candidate is accepted only
/// when its blocks match the original and it compiles.
pub fn self_heal_compile(
    doc: &FeedbackDocument,
    first: &CompileOutcome,
    llm: &Endpoint,
    compiler: &dyn Compiler,
    workdir: &Path,
    settings: &HealSettings<'_>,
) -> HealOutcome {
    let mut outcome = first.clone();
    let mut repair_log = Vec::new();
    let mut failure = first.log_excerpt.clone();
    for attempt in 1..=settings.max_attempts {
        outcome.attempts += 1;
        let reject = |reason: String, log: &mut Vec<RepairAttempt>| {
            log.push(RepairAttempt {
                attempt,
                accepted: false,
                reason: reason.clone(),
            });
            reason
        };
        let request = build_repair_prompt(&doc.tex_source, &failure, settings);
        let candidate = match llm.complete_structured(&request) {
            Ok(s) => s.value["corrected_source"].as_str().unwrap_or_default().to_string(),
            Err(e) => {
                let unavailable = e.is_unavailable();
                reject(format!("repair request failed: {e}"), &mut repair_log);
                if unavailable {
                    break;
                }
                continue;
            }
        };
        if let Some(why) = blocks_changed(&doc.tex_source, &candidate) {
            failure = format!(
                "{}\n\nYour previous repair was rejected: {why}. Feedback block text must stay identical.",
                first.log_excerpt
            );
            reject(format!("content check failed: {why}"), &mut repair_log);
            continue;
        }
        let dir = workdir.join(format!("repair-{attempt}"));
        match compile_source(&candidate, &dir, compiler, settings.timeout) {
            Ok(c) if c.status == CompileStatus::Success => {
                repair_log.push(RepairAttempt {
                    attempt,
                    accepted: true,
                    reason: "compiled with feedback blocks unchanged".into(),
                });
                outcome.status = CompileStatus::Success;
                outcome.pdf_path = c.pdf_path;
                outcome.log_excerpt = String::new();
                return HealOutcome {
                    outcome,
                    repair_log,
                    repaired_source: Some(candidate),
                };
            }
            Ok(c) => {
                failure = c.log_excerpt.clone();
                reject(format!("repaired source still fails: {}", first_error(&c.log_excerpt)), &mut repair_log);
            }
            Err(e) => {
                failure = e.to_string();
                reject(e.to_string(), &mut repair_log);
            }
        }
    }
    HealOutcome {
        outcome,
        repair_log,
        repaired_source: None,
    }
}

fn first_error(excerpt: &str) -> &str {
    excerpt.lines().find(|l| l.starts_with('!')).unwrap_or("unknown error")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactKind {
    Pdf,
    Text,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    /// Path of the student artifact.
    pub artifact: PathBuf,
    pub kind: ArtifactKind,
    pub compile: Option<CompileOutcome>,
    pub repair_log: Vec<RepairAttempt>,
    pub repaired: bool,
    /// Set when no compiler was available; the PDF is still owed.
    pub pdf_pending: bool,
    pub compile_error: Option<String>,
}

/// Produces exactly one student artifact under `reports_dir`: the compiled
/// (possibly repaired) PDF, or the plain-text fallback. `workdir` is this
/// document's private build directory.
pub fn deliver(
    doc: &FeedbackDocument,
    reports_dir: &Path,
    workdir: &Path,
    compiler: &dyn Compiler,
    llm: &Endpoint,
    settings: &HealSettings<'_>,
) -> Result<Delivery, ReportError> {
    std::fs::create_dir_all(reports_dir).map_err(|source| ReportError::Io {
        path: reports_dir.to_path_buf(),
        source,
    })?;
    let stem = artifact_stem(&doc.student.sid);
    let pdf_out = reports_dir.join(format!("{stem}.pdf"));
    let txt_out = reports_dir.join(format!("{stem}.txt"));
    let mut delivery = Delivery {
        artifact: txt_out.clone(),
        kind: ArtifactKind::Text,
        compile: None,
        repair_log: Vec::new(),
        repaired: false,
        pdf_pending: false,
        compile_error: None,
    };
    let first = match compile_pdf(doc, workdir, compiler, settings.timeout) {
        Ok(c) => Some(c),
        Err(ReportError::CompilerMissing { program }) => {
            delivery.pdf_pending = true;
            delivery.compile_error = Some(format!("LaTeX compiler `{program}` not found"));
            None
        }
        Err(ReportError::Timeout { secs }) => Some(CompileOutcome {
            status: CompileStatus::Failure,
            pdf_path: None,
            log_excerpt: format!("! Compilation timed out after {secs} s."),
            attempts: 1,
        }),
        Err(e) => return Err(e),
    };
    if let Some(first) = first {
        let outcome = if first.status == CompileStatus::Success {
            first
        } else {
            let healed = self_heal_compile(doc, &first, llm, compiler, workdir, settings);
            delivery.repaired = healed.repaired_source.is_some();
            delivery.repair_log = healed.repair_log;
            if let Some(src) = &healed.repaired_source {
                write_file(&workdir.join("feedback.repaired.tex"), src)?;
            }
            healed.outcome
        };
        if let Some(pdf) = &outcome.pdf_path {
            std::fs::copy(pdf, &pdf_out).map_err(|source| ReportError::Io {
                path: pdf_out.clone(),
                source,
            })?;
            delivery.artifact = pdf_out.clone();
            delivery.kind = ArtifactKind::Pdf;
        } else {
            delivery.compile_error = Some(first_error(&outcome.log_excerpt).to_string());
        }
        delivery.compile = Some(outcome);
    }
    let stale = match delivery.kind {
        ArtifactKind::Pdf => &txt_out,
        ArtifactKind::Text => {
            write_file(&txt_out, &doc.plain_text)?;
            &pdf_out
        }
    };
    let _ = std::fs::remove_file(stale);
    Ok(delivery)
}
