//! Append-only grade records.
//!
//! Each ledger line is `{"checksum": <sha256 of entry JSON>, "entry": {...}}`.
//! Two files are kept: an anonymized one with `sid` stripped, and an
//! identified one for instructor use. Nothing here rewrites a line once it
//! is written.

use std::collections::{BTreeMap, HashMap};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread::JoinHandle;

use chrono::{DateTime, FixedOffset};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grade::ProblemGrade;
use crate::segment::{SegmentMethod, SegmentationResult};
use crate::texparse::SanitizeReport;

pub const ANON_LEDGER_FILE: &str = "grades.anon.jsonl";
pub const IDENTIFIED_LEDGER_FILE: &str = "grades.identified.jsonl";
pub const AUDIT_FILE: &str = "audit.json";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("{field} out of range: {value}")]
    Range { field: &'static str, value: f64 },
    #[error("no original entry for `{student}` on `{assignment_id}`")]
    MissingOriginal { student: String, assignment_id: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("ledger writer stopped unexpectedly")]
    WriterGone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PassKind {
    Original,
    Correction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeLedgerEntry {
    pub anon_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sid: Option<String>,
    pub assignment_id: String,
    pub pass_kind: PassKind,
    /// Problem id to points earned.
    pub raw_points: BTreeMap<String, f64>,
    pub extra_credit: f64,
    pub late_fraction: f64,
    pub final_score: f64,
    pub graded_at: DateTime<FixedOffset>,
    /// Audit bundle directory, relative to the output directory.
    pub audit_ref: String,
}

impl GradeLedgerEntry {
    pub fn raw_total(&self) -> f64 {
        self.raw_points.values().sum()
    }

    pub fn anonymized(&self) -> Self {
        Self {
            sid: None,
            ..self.clone()
        }
    }

    /// The identity a record is keyed by: sid when present, else anon_id.
    pub fn student_key(&self) -> &str {
        self.sid.as_deref().unwrap_or(&self.anon_id)
    }

    fn checksum(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_string(self).expect("entry serializes")))
    }
}

/// `max(0, Σraws × (1 − late) + extra)`.
pub fn compute_final(raws: impl IntoIterator<Item = f64>, extra_credit: f64, late_fraction: f64) -> Result<f64, LedgerError> {
    let mut sum = 0.0;
    for r in raws {
        if !(r.is_finite() && r >= 0.0) {
            return Err(LedgerError::Range { field: "raw_points", value: r });
        }
        sum += r;
    }
    if !(extra_credit.is_finite() && extra_credit >= 0.0) {
        return Err(LedgerError::Range {
            field: "extra_credit",
            value: extra_credit,
        });
    }
    if !(0.0..=1.0).contains(&late_fraction) {
        return Err(LedgerError::Range {
            field: "late_fraction",
            value: late_fraction,
        });
    }
    Ok((sum * (1.0 - late_fraction) + extra_credit).max(0.0))
}

/// Finds the original-pass entry for a student (matched on sid, or anon_id
/// when the entry carries none).
pub fn find_original<'a>(
    entries: &'a [GradeLedgerEntry],
    student: &str,
    assignment_id: &str,
) -> Result<&'a GradeLedgerEntry, LedgerError> {
    entries
        .iter()
        .rev()
        .find(|e| e.pass_kind == PassKind::Original && e.assignment_id == assignment_id && e.student_key() == student)
        .ok_or_else(|| LedgerError::MissingOriginal {
            student: student.to_string(),
            assignment_id: assignment_id.to_string(),
        })
}

/// Builds the correction entry for `original`. Per problem the credited
/// score is `orig + fraction × max(0, new − orig)`; problems missing from
/// `new_raws` keep their original score. Late fraction and extra credit are
/// copied unchanged.
pub fn apply_regrade(
    original: &GradeLedgerEntry,
    new_raws: &BTreeMap<String, f64>,
    correction_credit_fraction: f64,
    graded_at: DateTime<FixedOffset>,
    audit_ref: String,
) -> Result<GradeLedgerEntry, LedgerError> {
    if original.pass_kind != PassKind::Original {
        return Err(LedgerError::MissingOriginal {
            student: original.student_key().to_string(),
            assignment_id: original.assignment_id.clone(),
        });
    }
    if !(0.0..=1.0).contains(&correction_credit_fraction) {
        return Err(LedgerError::Range {
            field: "correction_credit_fraction",
            value: correction_credit_fraction,
        });
    }
    let mut raw_points = original.raw_points.clone();
    for (pid, &new) in new_raws {
        let orig = original.raw_points.get(pid).copied().unwrap_or(0.0);
        raw_points.insert(pid.clone(), orig + correction_credit_fraction * (new - orig).max(0.0));
    }
    let final_score = compute_final(raw_points.values().copied(), original.extra_credit, original.late_fraction)?;
    Ok(GradeLedgerEntry {
        anon_id: original.anon_id.clone(),
        sid: original.sid.clone(),
        assignment_id: original.assignment_id.clone(),
        pass_kind: PassKind::Correction,
        raw_points,
        extra_credit: original.extra_credit,
        late_fraction: original.late_fraction,
        final_score,
        graded_at,
        audit_ref,
    })
}

#[derive(Serialize, Deserialize)]
struct Record {
    checksum: String,
    entry: GradeLedgerEntry,
}

fn record_line(entry: &GradeLedgerEntry) -> String {
    let mut line = serde_json::to_string(&Record {
        checksum: entry.checksum(),
        entry: entry.clone(),
    })
    .expect("record serializes");
    line.push('\n');
    line
}

fn open_append(path: &Path) -> Result<File, LedgerError> {
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|source| LedgerError::Io {
            path: path.to_path_buf(),
            source,
        })
}

/// Appends entries to a ledger file.
pub fn persist(entries: &[GradeLedgerEntry], path: &Path) -> Result<(), LedgerError> {
    let mut f = open_append(path)?;
    let buf: String = entries.iter().map(record_line).collect();
    f.write_all(buf.as_bytes())
        .and_then(|_| f.flush())
        .map_err(|source| LedgerError::Io {
            path: path.to_path_buf(),
            source,
        })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptRecord {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LoadedLedger {
    /// Latest entry per (student, assignment, pass kind), in order of first
    /// appearance.
    pub entries: Vec<GradeLedgerEntry>,
    pub corrupt: Vec<CorruptRecord>,
}

/// Reads a ledger. Unparseable lines and checksum mismatches are skipped
/// and listed in `corrupt`.
pub fn load(path: &Path) -> Result<LoadedLedger, LedgerError> {
    let io = |source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    };
    let reader = BufReader::new(File::open(path).map_err(io)?);
    let mut out = LoadedLedger::default();
    let mut index: HashMap<(String, String, PassKind), usize> = HashMap::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Record = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                out.corrupt.push(CorruptRecord {
                    line: i + 1,
                    message: e.to_string(),
                });
                continue;
            }
        };
        if record.entry.checksum() != record.checksum {
            out.corrupt.push(CorruptRecord {
                line: i + 1,
                message: "checksum mismatch".into(),
            });
            continue;
        }
        let e = record.entry;
        let key = (e.student_key().to_string(), e.assignment_id.clone(), e.pass_kind);
        match index.get(&key) {
            Some(&at) => out.entries[at] = e,
            None => {
                index.insert(key, out.entries.len());
                out.entries.push(e);
            }
        }
    }
    Ok(out)
}

/// Sole appender to the two ledger files. Entries arrive tagged with a
/// sequence number from any thread and are written in sequence order, so
/// file contents do not depend on worker scheduling.
pub struct LedgerWriter {
    tx: Option<mpsc::Sender<(usize, GradeLedgerEntry)>>,
    handle: Option<JoinHandle<Result<usize, LedgerError>>>,
}

#[derive(Clone)]
pub struct LedgerSender {
    tx: mpsc::Sender<(usize, GradeLedgerEntry)>,
}

impl LedgerSender {
    pub fn send(&self, seq: usize, entry: GradeLedgerEntry) -> Result<(), LedgerError> {
        self.tx.send((seq, entry)).map_err(|_| LedgerError::WriterGone)
    }
}

impl LedgerWriter {
    pub fn spawn(anonymized: &Path, identified: &Path) -> Result<Self, LedgerError> {
        let mut anon = (open_append(anonymized)?, anonymized.to_path_buf());
        let mut ident = (open_append(identified)?, identified.to_path_buf());
        let (tx, rx) = mpsc::channel::<(usize, GradeLedgerEntry)>();
        let handle = std::thread::spawn(move || {
            let write = |(f, p): &mut (File, PathBuf), e: &GradeLedgerEntry| {
                f.write_all(record_line(e).as_bytes())
                    .and_then(|_| f.flush())
                    .map_err(|source| LedgerError::Io {
                        path: p.clone(),
                        source,
                    })
            };
            let mut pending = BTreeMap::new();
            let mut next = 0usize;
            let mut written = 0usize;
            let mut emit = |e: GradeLedgerEntry| -> Result<(), LedgerError> {
                write(&mut anon, &e.anonymized())?;
                write(&mut ident, &e)?;
                written += 1;
                Ok(())
            };
            for (seq, entry) in rx {
                pending.insert(seq, entry);
                while let Some(e) = pending.remove(&next) {
                    emit(e)?;
                    next += 1;
                }
            }
            // Gaps (sequence numbers never sent) are skipped at shutdown.
            for (_, e) in pending {
                emit(e)?;
            }
            Ok(written)
        });
        Ok(Self {
            tx: Some(tx),
            handle: Some(handle),
        })
    }

    pub fn sender(&self) -> LedgerSender {
        LedgerSender {
            tx: self.tx.clone().expect("writer not finished"),
        }
    }

    /// Waits for all senders to drop and returns the number of entries
    /// written.
    pub fn finish(mut self) -> Result<usize, LedgerError> {
        drop(self.tx.take());
        self.handle
            .take()
            .expect("finish called once")
            .join()
            .map_err(|_| LedgerError::WriterGone)?
    }
}

/// Writes the upload CSV: one row per student, sorted by sid, with the
/// correction entry taking precedence over the original.
pub fn export_scores(entries: &[GradeLedgerEntry], problem_ids: &[String], path: &Path) -> Result<(), LedgerError> {
    let mut chosen: BTreeMap<(String, String), &GradeLedgerEntry> = BTreeMap::new();
    for e in entries {
        let key = (e.student_key().to_string(), e.assignment_id.clone());
        match chosen.get(&key) {
            Some(prev) if prev.pass_kind > e.pass_kind => {}
            _ => {
                chosen.insert(key, e);
            }
        }
    }
    let io = |e: csv::Error| LedgerError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(io)?;
    let mut header = vec!["sid".to_string(), "assignment_id".into(), "final_score".into(), "pass_kind".into()];
    header.extend(problem_ids.iter().cloned());
    w.write_record(&header).map_err(io)?;
    for ((student, assignment), e) in chosen {
        let mut row = vec![
            student,
            assignment,
            e.final_score.to_string(),
            match e.pass_kind {
                PassKind::Original => "original".into(),
                PassKind::Correction => "correction".into(),
            },
        ];
        row.extend(
            problem_ids
                .iter()
                .map(|p| e.raw_points.get(p).map(f64::to_string).unwrap_or_default()),
        );
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|source| LedgerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Everything needed to explain a submission's grade without re-running
/// the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditBundle {
    pub anon_id: String,
    pub assignment_id: String,
    pub pass_kind: PassKind,
    pub sanitize: SanitizeReport,
    pub segmentation: SegmentationAudit,
    pub problems: Vec<ProblemGrade>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationAudit {
    pub methods: BTreeMap<String, SegmentMethod>,
    pub missing: Vec<String>,
    pub fallback_used: bool,
    pub warnings: Vec<String>,
    pub llm_attempts: usize,
}

impl SegmentationAudit {
    pub fn from_result(r: &SegmentationResult) -> Self {
        Self {
            methods: r.segments.iter().map(|s| (s.problem_id.clone(), s.method)).collect(),
            missing: r.missing.clone(),
            fallback_used: r.fallback_used,
            warnings: r.warnings.clone(),
            llm_attempts: r.llm_attempts.len(),
        }
    }
}

impl AuditBundle {
    pub fn write(&self, dir: &Path) -> Result<PathBuf, LedgerError> {
        let path = dir.join(AUDIT_FILE);
        let io = |source| LedgerError::Io {
            path: path.clone(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(io)?;
        let mut json = serde_json::to_string_pretty(self).expect("audit serializes");
        json.push('\n');
        std::fs::write(&path, json).map_err(io)?;
        Ok(path)
    }
}
