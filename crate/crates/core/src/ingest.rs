//! Submission export loading.
//!
//! An export is one directory per student plus a top-level
//! `submission_metadata.yml`. Identity fields stay on [`StudentSubmission`];
//! anything that reaches a model goes through [`llm_view`], which carries only
//! the anonymized id.
//!
//! Two metadata layouts are accepted. The native layout:
//!
//! ```yaml
//! assignment_id: hw1
//! due_at: "2026-01-20T23:59:00-08:00"
//! submissions:
//!   submission_0001:          # student directory name
//!     internal_id: "0001"
//!     sid: "932000001"
//!     name: Ada Lovelace
//!     email: ada@example.edu
//!     submitted_at: "2026-01-20T20:00:00-08:00"
//!     submission_count: 1
//!     extra_credit: 0         # optional
//! ```
//!
//! and the platform layout, where each `submission_<id>` key holds a
//! `:submitters` list and a `:created_at` stamp. The platform file carries no
//! due date, so `assignment_id` and `due_at` must be added at the top level.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const METADATA_FILE: &str = "submission_metadata.yml";

/// Identity substrings shorter than this are not scanned for.
const MIN_IDENTITY_NEEDLE: usize = 4;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("missing {0}")]
    MissingMetadata(PathBuf),
    #[error("bad submission metadata: {0}")]
    Metadata(String),
    #[error("export {0} contains no student directories")]
    EmptyExport(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> IngestError + '_ {
    move |source| IngestError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionMetadata {
    pub submitted_at: DateTime<FixedOffset>,
    pub due_at: DateTime<FixedOffset>,
    pub assignment_id: String,
    pub submission_count: u32,
    #[serde(default)]
    pub extra_credit: f64,
}

impl SubmissionMetadata {
    pub fn lateness(&self) -> chrono::Duration {
        self.submitted_at
            .signed_duration_since(self.due_at)
            .max(chrono::Duration::zero())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentSubmission {
    pub internal_id: String,
    pub sid: String,
    pub name: String,
    pub email: String,
    pub student_dir: String,
    /// Chosen source file, relative to the student directory.
    pub tex_file: Option<String>,
    /// `None` when the directory held no `.tex` file.
    pub tex_source: Option<String>,
    pub metadata: SubmissionMetadata,
    pub anon_id: String,
}

impl StudentSubmission {
    pub fn is_gradeable(&self) -> bool {
        self.tex_source.is_some()
    }

    /// Identity strings long enough to scan for.
    pub fn identity_needles(&self) -> Vec<String> {
        let mut out = vec![self.sid.clone(), self.name.clone(), self.email.clone()];
        if let Some((local, _)) = self.email.split_once('@') {
            out.push(local.to_string());
        }
        out.retain(|s| s.trim().chars().count() >= MIN_IDENTITY_NEEDLE);
        out.iter_mut().for_each(|s| *s = s.trim().to_lowercase());
        out.sort();
        out.dedup();
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub warnings: Vec<IngestWarning>,
    pub ungradeable: Vec<Ungradeable>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub student_dir: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ungradeable {
    pub student_dir: String,
    pub anon_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportBatch {
    pub submissions: Vec<StudentSubmission>,
    pub report: IngestReport,
}

/// First 8 lowercase hex characters of SHA-256 over `sid` followed directly
/// by `internal_id`.
pub fn anonymize_id(sid: &str, internal_id: &str) -> String {
    let mut h = Sha256::new();
    h.update(sid.as_bytes());
    h.update(internal_id.as_bytes());
    hex::encode(h.finalize())[..8].to_string()
}

struct Identity {
    internal_id: String,
    sid: String,
    name: String,
    email: String,
    metadata: SubmissionMetadata,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeMetadata {
    assignment_id: String,
    due_at: DateTime<FixedOffset>,
    submissions: BTreeMap<String, NativeEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NativeEntry {
    internal_id: String,
    sid: String,
    name: String,
    email: String,
    submitted_at: DateTime<FixedOffset>,
    #[serde(default = "one")]
    submission_count: u32,
    #[serde(default)]
    extra_credit: f64,
}

fn one() -> u32 {
    1
}

/// Parses either metadata layout into per-directory identities.
fn parse_metadata(text: &str) -> Result<BTreeMap<String, Identity>, IngestError> {
    let value: serde_yaml::Value =
        serde_yaml::from_str(text).map_err(|e| IngestError::Metadata(e.to_string()))?;
    let map = value
        .as_mapping()
        .ok_or_else(|| IngestError::Metadata("top level must be a mapping".into()))?;
    if map.contains_key("submissions") {
        let native: NativeMetadata =
            serde_yaml::from_value(value).map_err(|e| IngestError::Metadata(e.to_string()))?;
        let mut out = BTreeMap::new();
        for (dir, e) in native.submissions {
            if e.submission_count == 0 {
                return Err(IngestError::Metadata(format!("{dir}: submission_count must be >= 1")));
            }
            out.insert(
                dir,
                Identity {
                    internal_id: e.internal_id,
                    sid: e.sid,
                    name: e.name,
                    email: e.email,
                    metadata: SubmissionMetadata {
                        submitted_at: e.submitted_at,
                        due_at: native.due_at,
                        assignment_id: native.assignment_id.clone(),
                        submission_count: e.submission_count,
                        extra_credit: e.extra_credit,
                    },
                },
            );
        }
        Ok(out)
    } else {
        parse_platform_metadata(map)
    }
}

fn parse_platform_metadata(map: &serde_yaml::Mapping) -> Result<BTreeMap<String, Identity>, IngestError> {
    let bad = |m: String| IngestError::Metadata(m);
    let top_str = |k: &str| {
        map.get(k)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| bad(format!("platform metadata needs a top-level `{k}`")))
    };
    let assignment_id = top_str("assignment_id")?;
    let due_at = parse_timestamp(&top_str("due_at")?).map_err(bad)?;
    let mut out = BTreeMap::new();
    for (k, v) in map {
        let Some(key) = k.as_str() else { continue };
        let Some(internal_id) = key.strip_prefix("submission_") else {
            continue;
        };
        let submitter = v
            .get(":submitters")
            .and_then(|s| s.get(0))
            .ok_or_else(|| bad(format!("{key}: no :submitters")))?;
        let field = |name: &str| {
            submitter
                .get(name)
                .map(|x| match x {
                    serde_yaml::Value::Number(n) => n.to_string(),
                    other => other.as_str().unwrap_or_default().to_string(),
                })
                .ok_or_else(|| bad(format!("{key}: submitter lacks {name}")))
        };
        let created = v
            .get(":created_at")
            .and_then(|x| x.as_str())
            .ok_or_else(|| bad(format!("{key}: no :created_at")))?;
        out.insert(
            key.to_string(),
            Identity {
                internal_id: internal_id.to_string(),
                sid: field(":sid")?,
                name: field(":name")?,
                email: field(":email")?,
                metadata: SubmissionMetadata {
                    submitted_at: parse_timestamp(created).map_err(bad)?,
                    due_at,
                    assignment_id: assignment_id.clone(),
                    submission_count: 1,
                    extra_credit: 0.0,
                },
            },
        );
    }
    if out.is_empty() {
        return Err(bad("no `submissions` map and no `submission_<id>` entries".into()));
    }
    Ok(out)
}

fn parse_timestamp(s: &str) -> Result<DateTime<FixedOffset>, String> {
    DateTime::parse_from_rfc3339(s)
        .or_else(|_| DateTime::parse_from_str(s, "%Y-%m-%d %H:%M:%S%.f %z"))
        .map_err(|e| format!("timestamp `{s}` must carry a UTC offset: {e}"))
}

/// Loads every student directory of an export, sorted by internal id.
pub fn load_export(export_dir: &Path) -> Result<ExportBatch, IngestError> {
    let meta_path = export_dir.join(METADATA_FILE);
    if !meta_path.is_file() {
        return Err(IngestError::MissingMetadata(meta_path));
    }
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    let mut identities = parse_metadata(&text)?;

    let mut dirs: Vec<String> = Vec::new();
    for entry in fs::read_dir(export_dir).map_err(io_err(export_dir))? {
        let entry = entry.map_err(io_err(export_dir))?;
        if entry.file_type().map_err(io_err(&entry.path()))?.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(IngestError::EmptyExport(export_dir.to_path_buf()));
    }

    let mut report = IngestReport::default();
    let mut submissions = Vec::new();
    for dir in dirs {
        let Some(id) = identities.remove(&dir) else {
            report.warnings.push(IngestWarning {
                student_dir: dir,
                message: "directory has no metadata entry; skipped".into(),
            });
            continue;
        };
        let anon_id = anonymize_id(&id.sid, &id.internal_id);
        let path = export_dir.join(&dir);
        let (tex_file, tex_source) = match pick_tex_file(&path, &dir, &mut report)? {
            Some(file) => {
                let full = path.join(&file);
                let bytes = fs::read(&full).map_err(io_err(&full))?;
                let (text, lossy) = crate::texparse::decode_source(&bytes);
                if lossy {
                    report.warnings.push(IngestWarning {
                        student_dir: dir.clone(),
                        message: format!("{file}: invalid UTF-8 replaced"),
                    });
                }
                (Some(file), Some(text))
            }
            None => {
                report.ungradeable.push(Ungradeable {
                    student_dir: dir.clone(),
                    anon_id: anon_id.clone(),
                    reason: "ungradeable: no source".into(),
                });
                (None, None)
            }
        };
        submissions.push(StudentSubmission {
            internal_id: id.internal_id,
            sid: id.sid,
            name: id.name,
            email: id.email,
            student_dir: dir,
            tex_file,
            tex_source,
            metadata: id.metadata,
            anon_id,
        });
    }
    for dir in identities.keys() {
        report.warnings.push(IngestWarning {
            student_dir: dir.clone(),
            message: "metadata entry has no directory".into(),
        });
    }
    submissions.sort_by(|a, b| a.internal_id.cmp(&b.internal_id).then(a.student_dir.cmp(&b.student_dir)));
    Ok(ExportBatch {
        submissions,
        report,
    })
}

/// Picks the largest top-level `.tex` file; ties go to the first name.
fn pick_tex_file(dir: &Path, label: &str, report: &mut IngestReport) -> Result<Option<String>, IngestError> {
    let mut candidates: Vec<(u64, String)> = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        let p = entry.path();
        if p.is_file() && p.extension().is_some_and(|e| e.eq_ignore_ascii_case("tex")) {
            let len = entry.metadata().map_err(io_err(&p))?.len();
            candidates.push((len, entry.file_name().to_string_lossy().into_owned()));
        }
    }
    candidates.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
    if candidates.len() > 1 {
        report.warnings.push(IngestWarning {
            student_dir: label.to_string(),
            message: format!(
                "{} .tex files found; using largest ({})",
                candidates.len(),
                candidates[0].1
            ),
        });
    }
    Ok(candidates.into_iter().next().map(|(_, name)| name))
}

/// What the models are allowed to see of a submission.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmView {
    pub anon_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sid: Option<String>,
    pub macro_block: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("identity string detected in submission {anon_id}; needs manual handling")]
pub struct IdentityLeakError {
    pub anon_id: String,
}

/// Builds the model-facing view from sanitized text.
///
/// With anonymization on, the view carries the anonymized id only, and a
/// body or macro block that mentions the student's identity is refused.
pub fn llm_view(
    sub: &StudentSubmission,
    macro_block: &str,
    body: &str,
    anonymize: bool,
) -> Result<LlmView, IdentityLeakError> {
    if anonymize {
        let haystacks = [macro_block.to_lowercase(), body.to_lowercase()];
        let leaked = sub
            .identity_needles()
            .iter()
            .any(|n| haystacks.iter().any(|h| h.contains(n.as_str())));
        if leaked {
            return Err(IdentityLeakError {
                anon_id: sub.anon_id.clone(),
            });
        }
    }
    Ok(LlmView {
        anon_id: sub.anon_id.clone(),
        sid: (!anonymize).then(|| sub.sid.clone()),
        macro_block: macro_block.to_string(),
        body: body.to_string(),
    })
}
