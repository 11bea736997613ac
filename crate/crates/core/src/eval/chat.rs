//! The chat-adapter contract: role-tagged messages in, text out.
//!
//! Three implementations ship with the crate: a scripted replay adapter for
//! deterministic tests, a local adapter over [`TinyLm`], and an HTTP adapter
//! for remote endpoints speaking the common chat-completions JSON shape.

use serde::{Deserialize, Serialize};

use crate::model::TinyLm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::System,
            content: content.into(),
        }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ChatError {
    #[error("chat endpoint error: {0}")]
    Endpoint(String),
    #[error("scripted adapter has no reply for this prompt")]
    NoScriptedReply,
}

pub trait ChatModel: Send + Sync {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError>;
}

/// One rule of a scripted adapter: reply with `response` when the last user
/// message contains `contains` (or unconditionally when `contains` is None).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    pub response: String,
}

/// Deterministic replay adapter. Rules are checked in order; the first match
/// wins. Loadable from a JSONL file of [`ScriptRule`] records.
pub struct ScriptedChat {
    rules: Vec<ScriptRule>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self { rules }
    }

    /// An adapter that answers everything with one fixed string.
    pub fn constant(response: impl Into<String>) -> Self {
        Self::new(vec![ScriptRule {
            contains: None,
            response: response.into(),
        }])
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, crate::jsonl::JsonlError> {
        Ok(Self::new(crate::jsonl::read(path)?))
    }
}

impl ChatModel for ScriptedChat {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let prompt = messages
            .iter()
            .rev()
            .find(|m| m.role == ChatRole::User)
            .map(|m| m.content.as_str())
            .unwrap_or("");
        for rule in &self.rules {
            let hit = match &rule.contains {
                Some(needle) => prompt.contains(needle),
                None => true,
            };
            if hit {
                return Ok(rule.response.clone());
            }
        }
        Err(ChatError::NoScriptedReply)
    }
}

/// Greedy decoding over a local [`TinyLm`].
pub struct TinyChat {
    model: TinyLm,
    max_new_tokens: usize,
}

impl TinyChat {
    pub fn new(model: TinyLm) -> Self {
        Self {
            model,
            max_new_tokens: 48,
        }
    }
}

impl ChatModel for TinyChat {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let turns: Vec<(ChatRole, String)> = messages
            .iter()
            .map(|m| (m.role, m.content.clone()))
            .collect();
        Ok(self.model.generate(&turns, self.max_new_tokens))
    }
}

/// Remote chat-completions endpoint. The URL and optional bearer key come
/// from configuration (typically the STATEGUARD_CHAT_URL and
/// STATEGUARD_CHAT_KEY environment variables).
pub struct HttpChat {
    url: String,
    api_key: Option<String>,
    model: Option<String>,
    client: reqwest::blocking::Client,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    messages: &'a [ChatMessage],
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

impl HttpChat {
    pub fn new(url: impl Into<String>, api_key: Option<String>, model: Option<String>) -> Self {
        Self {
            url: url.into(),
            api_key,
            model,
            client: reqwest::blocking::Client::new(),
        }
    }

    /// Build from `STATEGUARD_CHAT_URL`, `STATEGUARD_CHAT_KEY` and
    /// `STATEGUARD_CHAT_MODEL`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("STATEGUARD_CHAT_URL").ok()?;
        Some(Self::new(
            url,
            std::env::var("STATEGUARD_CHAT_KEY").ok(),
            std::env::var("STATEGUARD_CHAT_MODEL").ok(),
        ))
    }
}

impl ChatModel for HttpChat {
    fn chat(&self, messages: &[ChatMessage]) -> Result<String, ChatError> {
        let body = ChatRequest {
            model: self.model.as_deref(),
            messages,
        };
        let mut request = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request
            .send()
            .map_err(|e| ChatError::Endpoint(e.to_string()))?;
        if !response.status().is_success() {
            return Err(ChatError::Endpoint(format!(
                "status {} from {}",
                response.status(),
                self.url
            )));
        }
        let parsed: ChatResponse = response
            .json()
            .map_err(|e| ChatError::Endpoint(format!("bad response body: {e}")))?;
        parsed
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| ChatError::Endpoint("response had no choices".into()))
    }
}
