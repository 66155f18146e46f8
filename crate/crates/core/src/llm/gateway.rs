use std::sync::Arc;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;
use tracing::warn;

use super::{
    estimate_messages, estimate_tokens, BackendError, BackendReply, ChatRequest, LanguageBackend,
    Message, Stage, TokenLedger, ToolCallEnvelope, ToolRegistry, Usage,
};

#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 2,
            backoff: Duration::from_millis(250),
        }
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("request of ~{predicted} tokens exceeds the {window}-token context window")]
    Oversized { predicted: usize, window: usize },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("reply to `{prompt_id}` violated its schema twice ({reason})")]
    Schema {
        prompt_id: String,
        reason: String,
        raw: String,
    },
}

#[derive(Debug, Clone, Default)]
pub struct ChatOutcome {
    pub content: String,
    /// Schema-valid tool calls, ready for dispatch.
    pub tool_calls: Vec<ToolCallEnvelope>,
    pub usage: Usage,
    pub diagnostics: Vec<String>,
}

/// Front door to the language backend: enforces the context window, retries
/// transport failures, honours a fallback endpoint, validates tool calls and
/// records every exchange in the ledger.
pub struct Gateway {
    primary: Arc<dyn LanguageBackend>,
    fallback: Option<Arc<dyn LanguageBackend>>,
    ledger: Arc<TokenLedger>,
    retry: RetryPolicy,
}

impl Gateway {
    pub fn new(primary: Arc<dyn LanguageBackend>, ledger: Arc<TokenLedger>) -> Self {
        Self {
            primary,
            fallback: None,
            ledger,
            retry: RetryPolicy::default(),
        }
    }

    pub fn with_fallback(mut self, fallback: Arc<dyn LanguageBackend>) -> Self {
        self.fallback = Some(fallback);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn ledger(&self) -> &Arc<TokenLedger> {
        &self.ledger
    }

    pub fn context_window(&self) -> usize {
        self.primary.context_window()
    }

    pub fn predicted_tokens(messages: &[Message], tools: &ToolRegistry) -> usize {
        let tool_tokens: usize = tools
            .specs()
            .map(|t| estimate_tokens(&t.name) + estimate_tokens(&t.description) + estimate_tokens(&t.json_schema().to_string()))
            .sum();
        estimate_messages(messages) + tool_tokens
    }

    fn call_with_retries(
        &self,
        backend: &dyn LanguageBackend,
        request: &ChatRequest,
    ) -> Result<BackendReply, BackendError> {
        let mut attempt = 0;
        loop {
            match backend.complete(request) {
                Ok(reply) => return Ok(reply),
                Err(BackendError::Transport(msg)) if attempt < self.retry.retries => {
                    warn!(backend = backend.name(), attempt, "transport failure: {msg}");
                    std::thread::sleep(self.retry.backoff * 2u32.pow(attempt));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn exchange(
        &self,
        stage: Stage,
        prompt_id: &str,
        messages: &[Message],
        tools: &ToolRegistry,
    ) -> Result<BackendReply, GatewayError> {
        let predicted = Self::predicted_tokens(messages, tools);
        let window = self.context_window();
        if predicted > window {
            return Err(GatewayError::Oversized { predicted, window });
        }
        let request = ChatRequest {
            prompt_id: prompt_id.to_string(),
            messages: messages.to_vec(),
            tools: tools.specs().cloned().collect(),
            decoding: self.primary.decoding(),
        };
        let reply = match self.call_with_retries(self.primary.as_ref(), &request) {
            Ok(r) => r,
            Err(primary_err) => match &self.fallback {
                Some(fb) => {
                    warn!("primary backend failed ({primary_err}); using fallback {}", fb.name());
                    let request = ChatRequest {
                        decoding: fb.decoding(),
                        ..request
                    };
                    self.call_with_retries(fb.as_ref(), &request)?
                }
                None => return Err(primary_err.into()),
            },
        };
        self.ledger.record(stage, prompt_id, reply.usage);
        Ok(reply)
    }

    /// One model turn. Malformed tool calls are returned to the model once
    /// for self-correction; whatever is still malformed afterwards is dropped
    /// with a diagnostic. Unregistered tools are never passed through.
    pub fn chat(
        &self,
        stage: Stage,
        prompt_id: &str,
        messages: &[Message],
        tools: &ToolRegistry,
    ) -> Result<ChatOutcome, GatewayError> {
        let first = self.exchange(stage, prompt_id, messages, tools)?;
        let mut usage = first.usage;
        let errors: Vec<(usize, String)> = first
            .tool_calls
            .iter()
            .enumerate()
            .filter_map(|(i, c)| tools.validate(c).err().map(|e| (i, e)))
            .collect();
        if errors.is_empty() {
            return Ok(ChatOutcome {
                content: first.content,
                tool_calls: first.tool_calls,
                usage,
                diagnostics: Vec::new(),
            });
        }

        let mut retry_messages = messages.to_vec();
        retry_messages.push(Message::assistant(first.content.clone(), first.tool_calls.clone()));
        for (i, call) in first.tool_calls.iter().enumerate() {
            let note = match errors.iter().find(|(j, _)| *j == i) {
                Some((_, e)) => format!("error: invalid tool call ({e}); re-issue it with valid arguments"),
                None => "not executed: re-issue together with the corrected calls".to_string(),
            };
            retry_messages.push(Message::tool(call.id.clone(), note));
        }
        let second = self.exchange(stage, prompt_id, &retry_messages, tools)?;
        usage.add(second.usage);
        let mut diagnostics = Vec::new();
        let mut valid = Vec::new();
        for call in second.tool_calls {
            match tools.validate(&call) {
                Ok(()) => valid.push(call),
                Err(e) => diagnostics.push(format!("dropped tool call {}: {e}", call.id)),
            }
        }
        Ok(ChatOutcome {
            content: second.content,
            tool_calls: valid,
            usage,
            diagnostics,
        })
    }

    /// Requests a JSON object and validates it; one corrective retry, then
    /// [`GatewayError::Schema`] carrying the raw reply.
    pub fn complete_structured<T>(
        &self,
        stage: Stage,
        prompt_id: &str,
        messages: &[Message],
        validate: impl Fn(&Value) -> Result<T, String>,
    ) -> Result<(T, Usage), GatewayError> {
        let tools = ToolRegistry::empty();
        let mut convo = messages.to_vec();
        let mut usage = Usage::default();
        let mut last_reason = String::new();
        for attempt in 0..2 {
            let reply = self.exchange(stage, prompt_id, &convo, &tools)?;
            usage.add(reply.usage);
            let parsed = extract_json(&reply.content)
                .ok_or_else(|| "reply is not a JSON object".to_string())
                .and_then(|v| validate(&v));
            match parsed {
                Ok(v) => return Ok((v, usage)),
                Err(reason) if attempt == 0 => {
                    convo.push(Message::assistant(reply.content, Vec::new()));
                    convo.push(Message::user(format!(
                        "Your reply did not match the required JSON schema: {reason}. Reply again with only the corrected JSON object."
                    )));
                    last_reason = reason;
                }
                Err(reason) => {
                    return Err(GatewayError::Schema {
                        prompt_id: prompt_id.to_string(),
                        reason,
                        raw: reply.content,
                    })
                }
            }
        }
        unreachable!("loop returns on second attempt: {last_reason}")
    }
}

/// Pulls the outermost JSON object out of a model reply, tolerating code
/// fences and surrounding prose.
pub fn extract_json(content: &str) -> Option<Value> {
    let trimmed = content.trim();
    if let Ok(v @ Value::Object(_)) = serde_json::from_str::<Value>(trimmed) {
        return Some(v);
    }
    let start = trimmed.find('{')?;
    let end = trimmed.rfind('}')?;
    if end <= start {
        return None;
    }
    match serde_json::from_str::<Value>(&trimmed[start..=end]) {
        Ok(v @ Value::Object(_)) => Some(v),
        _ => None,
    }
}
