//! A deterministic stand-in for the grader and segmenter models.
//!
//! Grading rule: an item passes iff the student work contains every
//! backticked keyword of its criterion (case-insensitive), or, for a
//! criterion without keywords, iff the work is nonempty. Segmentation
//! rule: problem `P<n>` starts at the first `Problem <n>` heading and runs
//! to the next heading.
//!
//! Planted tokens in student work trigger misbehaviour: `LEAKME` makes the
//! first hint quote the reference solution, `BADJSON` makes the first reply
//! violate the schema, `HALLUCINATE` makes segmentation anchors fictitious.

use std::sync::Mutex;

use regex::Regex;
use serde_json::{json, Value};

use crate::llm::{ChatBackend, LlmError, Role, TokenCounts, WireReply, WireRequest};

pub struct SyntheticModel {
    seen: Mutex<Vec<WireRequest>>,
}

impl Default for SyntheticModel {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticModel {
    pub fn new() -> Self {
        Self {
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<WireRequest> {
        self.seen.lock().unwrap().clone()
    }
}

/// Contents of the first fenced block after `heading`.
fn fenced_after<'a>(text: &'a str, heading: &str) -> Option<&'a str> {
    let rest = &text[text.find(heading)? + heading.len()..];
    let open = rest.find("<<<")?;
    let rest = &rest[open + 3..];
    let nl = rest.find('\n')?;
    let fence = &rest[..nl];
    let body = &rest[nl + 1..];
    let close = body.find(&format!("\n{fence}>>>"))?;
    Some(&body[..close])
}

fn section<'a>(text: &'a str, heading: &str) -> &'a str {
    let Some(at) = text.find(heading) else { return "" };
    let rest = &text[at + heading.len()..];
    let end = rest.find("\n\n## ").unwrap_or(rest.len());
    &rest[..end]
}

fn keywords(criterion: &str) -> Vec<String> {
    criterion
        .split('`')
        .skip(1)
        .step_by(2)
        .map(|k| k.to_lowercase())
        .filter(|k| !k.is_empty())
        .collect()
}

fn grade_reply(user: &str, first_turn: bool) -> String {
    let work = fenced_after(user, "## Student work for this problem (untrusted)").unwrap_or_default();
    let solution = section(user, "## Reference solution\n").trim();
    let label = user
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("Submission: "))
        .unwrap_or("?");
    let lower = work.to_lowercase();
    if first_turn && work.contains("BADJSON") {
        return r#"{"verdicts": [{"item_id": "a", "pass": "yes"}]}"#.to_string();
    }
    let mut verdicts = Vec::new();
    for line in section(user, "## Rubric items\n").lines() {
        let Some(rest) = line.strip_prefix("- item_id: ") else { continue };
        let mut parts = rest.splitn(3, " | ");
        let item_id = parts.next().unwrap_or_default().to_string();
        let criterion = parts
            .nth(1)
            .and_then(|c| c.strip_prefix("criterion: "))
            .unwrap_or_default();
        let keys = keywords(criterion);
        let pass = if keys.is_empty() {
            !work.trim().is_empty()
        } else {
            keys.iter().all(|k| lower.contains(k.as_str()))
        };
        let focus = keys.first().cloned().unwrap_or_else(|| "this step".into());
        let audit = format!(
            "AUDIT[{item_id}]: keyword `{focus}` {} in the student work.",
            if pass { "present" } else { "absent" }
        );
        let hint = if verdicts.is_empty() && work.contains("LEAKME") {
            solution.to_string()
        } else if pass {
            format!("Nicely done. Could you say why {focus} is justified here?")
        } else {
            format!("Look again at {focus}. What would change if you used it?")
        };
        verdicts.push(json!({
            "item_id": item_id,
            "pass": pass,
            "audit_reasoning": audit,
            "student_hint": hint,
        }));
    }
    format!(
        "<think>REASONING for {label}: checked {} rubric items.</think>{}",
        verdicts.len(),
        json!({ "verdicts": verdicts })
    )
}

fn segment_reply(user: &str) -> String {
    let ids: Vec<&str> = user
        .lines()
        .next()
        .and_then(|l| l.strip_prefix("Problem ids to locate: "))
        .map(|l| l.split(", ").collect())
        .unwrap_or_default();
    let doc = fenced_after(user, "Student document").unwrap_or_default();
    let heading = Regex::new(r"Problem\s+(\d+)").expect("static pattern");
    let starts: Vec<(usize, String)> = heading
        .captures_iter(doc)
        .map(|c| (c.get(0).unwrap().start(), c[1].to_string()))
        .collect();
    let mut segments: Vec<Value> = Vec::new();
    for id in ids {
        let Some(n) = id.strip_prefix('P') else { continue };
        let Some(pos) = starts.iter().position(|(_, num)| num == n) else { continue };
        let start = starts[pos].0;
        let line_start_of = |at: usize| doc[..at].rfind('\n').map_or(0, |p| p + 1);
        let end = starts.get(pos + 1).map_or(doc.len(), |s| line_start_of(s.0));
        let line_start = line_start_of(start);
        let region = &doc[line_start..end];
        let lines: Vec<&str> = region
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && *l != "\\end{document}")
            .collect();
        let (Some(first), Some(last)) = (lines.first(), lines.last()) else { continue };
        let (sa, ea) = if doc.contains("HALLUCINATE") {
            (format!("Solution to problem {n} begins"), "as required.".to_string())
        } else {
            (first.to_string(), last.to_string())
        };
        segments.push(json!({ "problem_id": id, "start_anchor": sa, "end_anchor": ea }));
    }
    format!(
        "<think>Found {} headings.</think>{}",
        starts.len(),
        json!({ "segments": segments })
    )
}

fn repair_reply(user: &str) -> String {
    let source = user.split_once("## Source\n").map_or("", |(_, s)| s);
    json!({ "corrected_source": source }).to_string()
}

impl ChatBackend for SyntheticModel {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        self.seen.lock().unwrap().push(request.clone());
        let system = request
            .messages
            .iter()
            .find(|m| m.role == Role::System)
            .map_or("", |m| m.content.as_str());
        let user = request
            .messages
            .iter()
            .find(|m| m.role == Role::User)
            .map_or("", |m| m.content.as_str());
        let first_turn = request.messages.len() <= 2;
        let content = if system.starts_with("You are grading") {
            grade_reply(user, first_turn)
        } else if system.starts_with("You locate") {
            segment_reply(user)
        } else if system.starts_with("You repair") {
            repair_reply(user)
        } else {
            return Err(LlmError::Protocol("synthetic model: unrecognized request".into()));
        };
        Ok(WireReply {
            content,
            tokens: TokenCounts::default(),
        })
    }
}

/// Fails every request as if the server were down.
pub struct DownBackend;

impl ChatBackend for DownBackend {
    fn send(&self, _request: &WireRequest) -> Result<WireReply, LlmError> {
        Err(LlmError::Transport("connection refused".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grade::{build_grade_prompt, GradeContext, ProblemEntry, Rubric, RubricItem};
    use crate::llm::Endpoint;
    use crate::segment::{segment, SegmentMethod, SegmentationSpec};

    fn problem() -> ProblemEntry {
        ProblemEntry {
            problem_id: "P1".into(),
            reference_solution_tex: "By separation of variables the solution is y = y0 exp(-kt).".into(),
            rubric: Rubric {
                items: vec![
                    RubricItem {
                        item_id: "a".into(),
                        points: 2.0,
                        criterion: "Uses `separation` of variables".into(),
                    },
                    RubricItem {
                        item_id: "b".into(),
                        points: 1.0,
                        criterion: "States the `initial condition`".into(),
                    },
                ],
            },
        }
    }

    fn ctx() -> GradeContext<'static> {
        GradeContext {
            label: "abcd1234",
            macro_block: "",
            suspicious: false,
            model: "m",
            max_output_tokens: 100,
            hint_leak_min_run: 24,
        }
    }

    #[test]
    fn grades_by_keyword() {
        let ep = Endpoint::new(SyntheticModel::new(), 1, 3);
        let g = crate::grade::grade_problem(Some("Using Separation we get y."), None, &problem(), &ep, &ctx());
        assert_eq!(g.raw_points, 2.0);
        assert!(g.verdicts[0].pass && !g.verdicts[1].pass);
        assert!(g.verdicts[0].think_trace.contains("REASONING for abcd1234"));
        let req = build_grade_prompt("w", &problem(), &ctx());
        assert!(grade_reply(&req.user_text, true).contains("\"pass\":false"));
    }

    #[test]
    fn planted_misbehaviour() {
        let ep = Endpoint::new(SyntheticModel::new(), 1, 3);
        let g = crate::grade::grade_problem(Some("LEAKME separation"), None, &problem(), &ep, &ctx());
        assert_eq!(g.leak_events.len(), 1);
        assert!(g.verdicts[0].student_hint.starts_with("Revisit the criterion"));

        let g = crate::grade::grade_problem(Some("BADJSON separation"), None, &problem(), &ep, &ctx());
        assert_eq!(g.attempts.len(), 2);
        assert_eq!(g.raw_points, 2.0);
    }

    #[test]
    fn segments_markerless_headings() {
        let body = "\\section*{Problem 1}\nFirst part.\nStill first.\n\\section*{Problem 2}\nSecond % note\n";
        let spec = SegmentationSpec::new(vec!["P1".into(), "P2".into()]);
        let ep = Endpoint::new(SyntheticModel::new(), 1, 3);
        let r = segment(body, &spec, &ep, "m", 100).unwrap();
        assert!(r.missing.is_empty(), "{r:?}");
        assert!(r.segments.iter().all(|s| s.method == SegmentMethod::Llm));
        assert!(r.segment("P1").unwrap().text.ends_with("Still first."), "{:?}", r.segment("P1"));
        assert!(r.segment("P2").unwrap().text.starts_with("\\section*{Problem 2}"));

        let r = segment(&format!("{body}HALLUCINATE\n"), &spec, &ep, "m", 100).unwrap();
        assert_eq!(r.missing, ["P1", "P2"]);
        assert_eq!(r.unverified, ["P1", "P2"]);
    }
}
