//! Separation of model reasoning from the answer.

use serde::{Deserialize, Serialize};

pub const THINK_OPEN: &str = "<think>";
pub const THINK_CLOSE: &str = "</think>";

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkSplit {
    pub clean: String,
    pub think: String,
    /// An opening tag had no matching close; everything after it was
    /// treated as reasoning.
    pub unterminated: bool,
}

/// Removes every `<think>...</think>` block from `raw`.
///
/// Blocks match non-greedily and the removed contents are concatenated into
/// `think`. A closing tag with no opener marks everything before it as
/// reasoning. The result never contains either tag, even when removing a
/// block splices a new tag together from the surrounding text.
pub fn strip_think(raw: &str) -> ThinkSplit {
    let mut split = strip_once(raw);
    while split.clean.contains(THINK_OPEN) || split.clean.contains(THINK_CLOSE) {
        let again = strip_once(&split.clean);
        split.think.push_str(&again.think);
        split.unterminated |= again.unterminated;
        split.clean = again.clean;
    }
    split
}

fn strip_once(raw: &str) -> ThinkSplit {
    let mut out = ThinkSplit::default();
    let mut rest = raw;
    loop {
        let open = rest.find(THINK_OPEN);
        let close = rest.find(THINK_CLOSE);
        match (open, close) {
            (Some(o), c) if c.is_none_or(|c| o < c) => {
                out.clean.push_str(&rest[..o]);
                let after = &rest[o + THINK_OPEN.len()..];
                match after.find(THINK_CLOSE) {
                    Some(e) => {
                        out.think.push_str(&after[..e]);
                        rest = &after[e + THINK_CLOSE.len()..];
                    }
                    None => {
                        out.think.push_str(after);
                        out.unterminated = true;
                        return out;
                    }
                }
            }
            (_, Some(c)) => {
                // closing tag with no opener before it
                out.think.push_str(&rest[..c]);
                rest = &rest[c + THINK_CLOSE.len()..];
            }
            _ => {
                out.clean.push_str(rest);
                return out;
            }
        }
    }
}
