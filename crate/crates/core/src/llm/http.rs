//! Chat-completion client for local model servers.
//!
//! Speaks the common `POST /v1/chat/completions` dialect (messages array,
//! model field, non-streaming). Servers that return reasoning in a separate
//! `reasoning_content` or `reasoning` field get it folded back into the reply
//! inside think tags, so downstream handling is uniform.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;
use url::Url;

use super::{ChatBackend, LlmError, TokenCounts, WireReply, WireRequest};

pub struct HttpBackend {
    client: reqwest::blocking::Client,
    url: Url,
}

#[derive(Deserialize)]
struct Completion {
    choices: Vec<Choice>,
    #[serde(default)]
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
    #[serde(default, alias = "reasoning")]
    reasoning_content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: Option<u64>,
    completion_tokens: Option<u64>,
}

/// Resolves the completions URL from a server base URL, with or without a
/// trailing `/v1`.
pub fn completions_url(base: &Url) -> Result<Url, LlmError> {
    let mut base = base.clone();
    let path = base.path().trim_end_matches('/').to_string();
    let suffix = if path.ends_with("/v1") {
        "chat/completions"
    } else {
        "v1/chat/completions"
    };
    base.set_path(&format!("{path}/"));
    base.join(suffix)
        .map_err(|e| LlmError::Protocol(format!("bad endpoint URL: {e}")))
}

impl HttpBackend {
    pub fn new(base_url: &Url, timeout: Duration) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            client,
            url: completions_url(base_url)?,
        })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &WireRequest) -> Result<WireReply, LlmError> {
        let body = json!({
            "model": request.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
            "stream": false,
        });
        let resp = self
            .client
            .post(self.url.clone())
            .json(&body)
            .send()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| LlmError::Transport(e.to_string()))?;
        if !status.is_success() {
            let excerpt: String = text.chars().take(200).collect();
            return Err(LlmError::Transport(format!("HTTP {status}: {excerpt}")));
        }
        let parsed: Completion =
            serde_json::from_str(&text).map_err(|e| LlmError::Protocol(e.to_string()))?;
        let choice = parsed
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| LlmError::Protocol("no choices returned".into()))?;
        let mut content = String::new();
        if let Some(r) = choice.message.reasoning_content.filter(|r| !r.is_empty()) {
            content.push_str("<think>");
            content.push_str(&r);
            content.push_str("</think>");
        }
        content.push_str(choice.message.content.as_deref().unwrap_or_default());
        let tokens = parsed
            .usage
            .map(|u| TokenCounts {
                prompt: u.prompt_tokens,
                completion: u.completion_tokens,
            })
            .unwrap_or_default();
        Ok(WireReply { content, tokens })
    }
}
