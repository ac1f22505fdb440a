//! Gateway to locally hosted chat-completion models.
//!
//! Every model call goes through an [`Endpoint`], which owns the in-flight
//! limiter for the shared inference host, splits reasoning from answers, and
//! coerces replies to a [`SchemaSpec`] with repair-style retries. Backends are
//! pluggable: [`http::HttpBackend`] talks to a server, and
//! [`transcript::ReplayBackend`] serves recorded replies for offline runs.

pub mod http;
pub mod schema;
pub mod think;
pub mod transcript;

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use schema::{extract_json_object, Field, SchemaKind, SchemaSpec, SchemaViolation};
pub use think::{strip_think, ThinkSplit};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_output_tokens: u32,
    pub response_schema: Option<SchemaSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
        }
    }
}

/// One round trip as the backend sees it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl WireRequest {
    /// Stable key over the model and the full conversation.
    pub fn digest(&self) -> String {
        #[derive(Serialize)]
        struct Key<'a> {
            model: &'a str,
            messages: &'a [ChatMessage],
        }
        let key = serde_json::to_vec(&Key {
            model: &self.model,
            messages: &self.messages,
        })
        .expect("request serializes");
        hex::encode(Sha256::digest(&key))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub prompt: Option<u64>,
    pub completion: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireReply {
    pub content: String,
    #[serde(default)]
    pub tokens: TokenCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub raw_text: String,
    pub think_text: String,
    pub clean_text: String,
    pub think_unterminated: bool,
    #[serde(skip)]
    pub latency_secs: f64,
    pub tokens: TokenCounts,
}

/// One try of a structured call, kept for the audit trail.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub digest: String,
    pub raw_text: String,
    /// Validation error fed back to the model; `None` for the accepted try.
    pub error: Option<String>,
}

#[derive(Debug, Clone, Error)]
pub enum LlmError {
    #[error("endpoint unavailable: {0}")]
    Transport(String),
    #[error("no recorded reply for request digest {digest}")]
    MockMiss { digest: String },
    #[error("reply did not satisfy the schema after {} attempts", attempts.len())]
    SchemaCoercion { attempts: Vec<Attempt> },
    #[error("malformed server reply: {0}")]
    Protocol(String),
    #[error("structured call requires a response schema")]
    MissingSchema,
}

impl LlmError {
    /// True when the endpoint itself could not serve the call, as opposed to
    /// the model answering badly.
    pub fn is_unavailable(&self) -> bool {
        matches!(self, LlmError::Transport(_) | LlmError::MockMiss { .. } | LlmError::Protocol(_))
    }
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for Arc<B> {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        (**self).send(request)
    }
}

/// Counting semaphore bounding concurrent requests.
struct Limiter {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n.max(1)),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("limiter poisoned");
        while *free == 0 {
            free = self.cv.wait(free).expect("limiter poisoned");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("limiter poisoned") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Structured {
    pub value: Value,
    pub response: ChatResponse,
    pub attempts: Vec<Attempt>,
}

/// Extra check run after schema validation; its error is fed back to the
/// model like a schema violation.
pub type PostCheck<'a> = &'a (dyn Fn(&Value) -> Result<(), String> + Sync);

pub struct Endpoint {
    backend: Box<dyn ChatBackend>,
    limiter: Limiter,
    max_attempts: u32,
    calls: AtomicUsize,
}

impl Endpoint {
    /// `max_attempts` bounds the tries of a structured call; zero is
    /// treated as one.
    pub fn new(backend: impl ChatBackend + 'static, in_flight_limit: usize, max_attempts: u32) -> Self {
        Self {
            backend: Box::new(backend),
            limiter: Limiter::new(in_flight_limit),
            max_attempts: max_attempts.max(1),
            calls: AtomicUsize::new(0),
        }
    }

    /// Backend round trips made so far.
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    fn send(&self, wire: &WireRequest) -> Result<(WireReply, f64), LlmError> {
        let _permit = self.limiter.acquire();
        self.calls.fetch_add(1, Ordering::SeqCst);
        let started = Instant::now();
        let reply = self.backend.send(wire)?;
        Ok((reply, started.elapsed().as_secs_f64()))
    }

    /// Plain completion with reasoning split off.
    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        let wire = WireRequest {
            model: request.model.clone(),
            messages: vec![
                ChatMessage::new(Role::System, request.system_text.clone()),
                ChatMessage::new(Role::User, request.user_text.clone()),
            ],
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let (reply, latency) = self.send(&wire)?;
        Ok(to_response(reply, latency))
    }

    pub fn complete_structured(&self, request: &ChatRequest) -> Result<Structured, LlmError> {
        self.complete_structured_with(request, &|_| Ok(()))
    }

    /// Structured completion: the schema is appended to the system text,
    /// the first JSON object of the reply is validated, and failures are fed
    /// back to the model until it conforms or attempts run out.
    pub fn complete_structured_with(
        &self,
        request: &ChatRequest,
        post_check: PostCheck<'_>,
    ) -> Result<Structured, LlmError> {
        let schema = request.response_schema.as_ref().ok_or(LlmError::MissingSchema)?;
        let system = format!(
            "{}\n\nRespond with exactly one JSON object conforming to this JSON Schema, and nothing else:\n{}",
            request.system_text,
            serde_json::to_string_pretty(&schema.to_json_schema()).expect("schema serializes"),
        );
        let mut wire = WireRequest {
            model: request.model.clone(),
            messages: vec![
                ChatMessage::new(Role::System, system),
                ChatMessage::new(Role::User, request.user_text.clone()),
            ],
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };
        let mut attempts = Vec::new();
        for _ in 0..self.max_attempts {
            let digest = wire.digest();
            let (reply, latency) = self.send(&wire)?;
            let response = to_response(reply, latency);
            match coerce(&response.clean_text, schema, post_check) {
                Ok(value) => {
                    attempts.push(Attempt {
                        digest,
                        raw_text: response.raw_text.clone(),
                        error: None,
                    });
                    return Ok(Structured {
                        value,
                        response,
                        attempts,
                    });
                }
                Err(error) => {
                    wire.messages
                        .push(ChatMessage::new(Role::Assistant, response.clean_text.clone()));
                    wire.messages.push(ChatMessage::new(
                        Role::User,
                        format!(
                            "Your previous reply was rejected: {error}. Reply again with only a JSON object that satisfies the schema."
                        ),
                    ));
                    attempts.push(Attempt {
                        digest,
                        raw_text: response.raw_text,
                        error: Some(error),
                    });
                }
            }
        }
        Err(LlmError::SchemaCoercion { attempts })
    }
}

fn to_response(reply: WireReply, latency_secs: f64) -> ChatResponse {
    let split = strip_think(&reply.content);
    ChatResponse {
        raw_text: reply.content,
        think_text: split.think,
        clean_text: split.clean,
        think_unterminated: split.unterminated,
        latency_secs,
        tokens: reply.tokens,
    }
}

fn coerce(clean: &str, schema: &SchemaSpec, post_check: PostCheck<'_>) -> Result<Value, String> {
    let value = extract_json_object(clean).ok_or_else(|| "no JSON object found in the reply".to_string())?;
    schema.validate(&value).map_err(|e| e.to_string())?;
    post_check(&value)?;
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::ScriptedBackend;
    use serde_json::json;

    fn pass_request() -> ChatRequest {
        ChatRequest {
            model: "m".into(),
            system_text: "grade".into(),
            user_text: "work".into(),
            temperature: 0.0,
            max_output_tokens: 64,
            response_schema: Some(SchemaSpec::new(
                "verdict",
                vec![Field::required("pass", SchemaKind::Boolean)],
            )),
        }
    }

    #[test]
    fn direct_validation() {
        let backend = ScriptedBackend::new(["{\"pass\": true}"]);
        let ep = Endpoint::new(backend, 1, 3);
        let out = ep.complete_structured(&pass_request()).unwrap();
        assert_eq!(out.value, json!({"pass": true}));
        assert_eq!(out.attempts.len(), 1);
    }

    #[test]
    fn repairs_on_third_attempt() {
        let backend = Arc::new(ScriptedBackend::new(["not json", "{\"pass\": 1}", "{\"pass\": false}"]));
        let ep = Endpoint::new(backend.clone(), 1, 3);
        let out = ep.complete_structured(&pass_request()).unwrap();
        assert_eq!(out.value, json!({"pass": false}));
        assert_eq!(out.attempts.len(), 3);
        let seen = backend.requests();
        // second try carries the first reply and the validator's complaint
        assert_eq!(seen[1].messages.len(), 4);
        assert!(seen[1].messages[3].content.contains("no JSON object"));
        assert!(seen[2].messages[5].content.contains("expected boolean"));
    }

    #[test]
    fn exhausts_retries() {
        let backend = ScriptedBackend::new(["nope", "still no", "{\"pass\": \"yes\"}", "{\"pass\": true}"]);
        let ep = Endpoint::new(backend, 1, 3);
        match ep.complete_structured(&pass_request()) {
            Err(LlmError::SchemaCoercion { attempts }) => {
                assert_eq!(attempts.len(), 3);
                assert_eq!(attempts[0].raw_text, "nope");
                assert!(attempts.iter().all(|a| a.error.is_some()));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn fenced_reply_with_reasoning() {
        let backend = ScriptedBackend::new(["<think>hmm</think>```json\n{\"pass\": true}\n```"]);
        let ep = Endpoint::new(backend, 1, 3);
        let out = ep.complete_structured(&pass_request()).unwrap();
        assert_eq!(out.value, json!({"pass": true}));
        assert_eq!(out.response.think_text, "hmm");
    }

    #[test]
    fn post_check_feeds_back() {
        let backend = ScriptedBackend::new(["{\"pass\": false}", "{\"pass\": true}"]);
        let ep = Endpoint::new(backend, 1, 3);
        let check = |v: &Value| {
            if v["pass"] == json!(true) {
                Ok(())
            } else {
                Err("must pass".to_string())
            }
        };
        let out = ep.complete_structured_with(&pass_request(), &check).unwrap();
        assert_eq!(out.attempts[0].error.as_deref(), Some("must pass"));
    }

    #[test]
    fn limiter_bounds_concurrency() {
        use std::sync::atomic::AtomicUsize;
        struct Slow {
            now: AtomicUsize,
            peak: AtomicUsize,
        }
        impl ChatBackend for Slow {
            fn send(&self, _: &WireRequest) -> Result<WireReply, LlmError> {
                let n = self.now.fetch_add(1, Ordering::SeqCst) + 1;
                self.peak.fetch_max(n, Ordering::SeqCst);
                std::thread::sleep(std::time::Duration::from_millis(5));
                self.now.fetch_sub(1, Ordering::SeqCst);
                Ok(WireReply {
                    content: "x".into(),
                    tokens: TokenCounts::default(),
                })
            }
        }
        let slow = Arc::new(Slow {
            now: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        });
        let ep = Endpoint::new(slow.clone(), 2, 1);
        std::thread::scope(|s| {
            for _ in 0..8 {
                s.spawn(|| ep.complete(&pass_request()).unwrap());
            }
        });
        assert_eq!(ep.calls(), 8);
        assert!(slow.peak.load(Ordering::SeqCst) <= 2);
    }

    #[test]
    fn digest_depends_on_conversation() {
        let a = WireRequest {
            model: "m".into(),
            messages: vec![ChatMessage::new(Role::User, "x")],
            temperature: 0.0,
            max_tokens: 1,
        };
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.max_tokens = 99;
        assert_eq!(a.digest(), b.digest());
        b.messages[0].content.push('!');
        assert_ne!(a.digest(), b.digest());
    }
}
