//! Language-model and embedding backends behind strict schemas, with token
//! accounting and a deterministic scripted backend for offline runs.

mod embed;
mod gateway;
mod http;
mod ledger;
mod scripted;
mod tokens;
mod tools;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embed::{
    cosine, normalize, EmbedError, EmbeddingBackend, Embeddings, HashingEmbedder, TableEmbedder,
};
pub use gateway::{extract_json, ChatOutcome, Gateway, GatewayError, RetryPolicy};
pub use http::{HttpEmbedder, OpenAiCompatBackend};
pub use ledger::{Exchange, LedgerSnapshot, Stage, TokenLedger, Usage};
pub use scripted::{
    script_key, Matcher, RecordedRequest, Script, ScriptRule, ScriptedBackend, ScriptedReply,
    ScriptedToolCall, SCRIPT_SCHEMA_VERSION,
};
pub use tokens::estimate_tokens;
pub use tools::{ParamKind, ParamSpec, ToolCallEnvelope, ToolRegistry, ToolSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub temperature: f64,
    pub top_p: f64,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_p: 0.9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolCallEnvelope>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>, tool_calls: Vec<ToolCallEnvelope>) -> Self {
        Self {
            role: Role::Assistant,
            content: content.into(),
            tool_calls,
            tool_call_id: None,
        }
    }

    pub fn tool(call_id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            role: Role::Tool,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: Some(call_id.into()),
        }
    }

    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    /// Token estimate for this message including serialized tool calls.
    pub fn estimated_tokens(&self) -> usize {
        let calls: usize = self
            .tool_calls
            .iter()
            .map(|c| estimate_tokens(&c.name) + estimate_tokens(&c.arguments.to_string()))
            .sum();
        // per-message framing overhead
        4 + estimate_tokens(&self.content) + calls
    }
}

pub fn estimate_messages(messages: &[Message]) -> usize {
    messages.iter().map(Message::estimated_tokens).sum()
}

#[derive(Debug, Clone)]
pub struct ChatRequest {
    /// Stable identifier of the prompt template (scripted-backend key).
    pub prompt_id: String,
    pub messages: Vec<Message>,
    pub tools: Vec<ToolSpec>,
    pub decoding: DecodingConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub content: String,
    pub tool_calls: Vec<ToolCallEnvelope>,
    pub usage: Usage,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    /// Connection-level or server-side failure; worth retrying.
    #[error("transport failure: {0}")]
    Transport(String),
    /// The backend understood the request and refused or could not answer.
    #[error("backend rejected request: {0}")]
    Rejected(String),
}

pub trait LanguageBackend: Send + Sync {
    fn name(&self) -> &str;
    fn context_window(&self) -> usize;
    fn decoding(&self) -> DecodingConfig {
        DecodingConfig::default()
    }
    fn complete(&self, request: &ChatRequest) -> Result<BackendReply, BackendError>;
}
