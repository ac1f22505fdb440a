//! Fixtures and offline backends for tests and benchmarks.

pub mod corpus;
mod synthetic;

pub use synthetic::{DownBackend, SyntheticModel};


use std::collections::VecDeque;
use std::sync::Mutex;

use crate::llm::{ChatBackend, LlmError, TokenCounts, WireReply, WireRequest};

/// Serves canned replies in order, whatever the request, and remembers
/// every request it saw.
pub struct ScriptedBackend {
    replies: Mutex<VecDeque<String>>,
    seen: Mutex<Vec<WireRequest>>,
}

impl ScriptedBackend {
    pub fn new<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            replies: Mutex::new(replies.into_iter().map(Into::into).collect()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn requests(&self) -> Vec<WireRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        self.seen.lock().unwrap().push(request.clone());
        let content = self
            .replies
            .lock()
            .unwrap()
            .pop_front()
            .ok_or_else(|| LlmError::Transport("script exhausted".into()))?;
        Ok(WireReply {
            content,
            tokens: TokenCounts::default(),
        })
    }
}
