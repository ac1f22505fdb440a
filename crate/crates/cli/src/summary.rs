use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub submissions: usize,
    pub graded: usize,
    pub flagged_manual: usize,
    pub llm_fallback_segmentations: usize,
    pub repairs_attempted: usize,
    pub repairs_succeeded: usize,
    pub leak_events: usize,
    pub suspicious_sanitize: usize,
    pub pdf_reports: usize,
    pub text_fallbacks: usize,
    pub pdf_pending: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentStatus {
    pub sid: String,
    pub anon_id: String,
    /// `graded` or `flagged`.
    pub outcome: String,
    pub final_score: f64,
    /// Student artifact, relative to the output directory.
    pub artifact: String,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub assignment_id: String,
    pub pass_kind: String,
    pub counts: Counts,
    pub students: Vec<StudentStatus>,
    /// Students in a corrections export with no original ledger entry.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
    pub endpoint_unavailable: bool,
}

/// Wall-clock seconds per stage. Kept apart from the summary so that the
/// rest of the output tree is reproducible.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub stage_seconds: BTreeMap<String, f64>,
}

impl RunSummary {
    pub fn reconciles(&self) -> bool {
        self.counts.graded + self.counts.flagged_manual == self.counts.submissions
            && self.students.len() == self.counts.submissions
    }

    pub fn to_text(&self) -> String {
        let c = &self.counts;
        let mut s = String::new();
        writeln!(s, "assignment {} ({} pass)", self.assignment_id, self.pass_kind).unwrap();
        writeln!(s, "submissions        {}", c.submissions).unwrap();
        writeln!(s, "graded             {}", c.graded).unwrap();
        writeln!(s, "flagged for human  {}", c.flagged_manual).unwrap();
        writeln!(s, "model segmentation {}", c.llm_fallback_segmentations).unwrap();
        writeln!(s, "repairs            {} attempted, {} succeeded", c.repairs_attempted, c.repairs_succeeded).unwrap();
        writeln!(s, "hint leaks blocked {}", c.leak_events).unwrap();
        writeln!(s, "suspicious input   {}", c.suspicious_sanitize).unwrap();
        writeln!(
            s,
            "reports            {} pdf, {} text ({} pdf pending)",
            c.pdf_reports, c.text_fallbacks, c.pdf_pending
        )
        .unwrap();
        if self.endpoint_unavailable {
            writeln!(s, "model endpoint was unavailable for some calls").unwrap();
        }
        for sid in &self.skipped {
            writeln!(s, "skipped {sid}: no original ledger entry").unwrap();
        }
        writeln!(s).unwrap();
        for st in &self.students {
            write!(s, "{:<12} {:<8} {:<7} {:>7}  {}", st.sid, st.anon_id, st.outcome, format!("{:.2}", st.final_score), st.artifact).unwrap();
            if !st.flags.is_empty() {
                write!(s, "  [{}]", st.flags.join("; ")).unwrap();
            }
            writeln!(s).unwrap();
        }
        s
    }
}
