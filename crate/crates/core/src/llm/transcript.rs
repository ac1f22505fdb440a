//! Recorded model traffic.
//!
//! A transcript is newline-delimited JSON, one `{digest, request, response}`
//! record per round trip. [`RecordingBackend`] writes one while forwarding to
//! a live backend; [`ReplayBackend`] serves it back keyed by request digest
//! and refuses anything it has not seen.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ChatBackend, LlmError, WireReply, WireRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub digest: String,
    pub request: WireRequest,
    pub response: WireReply,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("transcript line {line}: {message}")]
    Corrupt { line: usize, message: String },
}

pub struct ReplayBackend {
    replies: HashMap<String, WireReply>,
}

impl ReplayBackend {
    pub fn from_records(records: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let mut replies = HashMap::new();
        for r in records {
            replies.entry(r.digest).or_insert(r.response);
        }
        Self { replies }
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        Ok(Self::from_records(read_transcript(path)?))
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }
}

impl ChatBackend for ReplayBackend {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        let digest = request.digest();
        self.replies
            .get(&digest)
            .cloned()
            .ok_or(LlmError::MockMiss { digest })
    }
}

/// Reads every record; a record whose digest does not match its request is
/// treated as corrupt.
pub fn read_transcript(path: &Path) -> Result<Vec<TranscriptRecord>, TranscriptError> {
    let io = |source| TranscriptError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TranscriptRecord = serde_json::from_str(&line).map_err(|e| TranscriptError::Corrupt {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.request.digest() != rec.digest {
            return Err(TranscriptError::Corrupt {
                line: i + 1,
                message: "digest does not match request".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub struct RecordingBackend<B> {
    inner: B,
    out: Mutex<File>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    /// Appends to `path`, creating it if needed.
    pub fn new(inner: B, path: &Path) -> Result<Self, TranscriptError> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|source| TranscriptError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self {
            inner,
            out: Mutex::new(file),
        })
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        let response = self.inner.send(request)?;
        let record = TranscriptRecord {
            digest: request.digest(),
            request: request.clone(),
            response: response.clone(),
        };
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut f = self.out.lock().expect("transcript writer poisoned");
        f.write_all(line.as_bytes())
            .and_then(|_| f.flush())
            .map_err(|e| LlmError::Transport(format!("cannot record transcript: {e}")))?;
        Ok(response)
    }
}
