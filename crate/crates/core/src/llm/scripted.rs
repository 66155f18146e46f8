use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use super::{
    BackendError, BackendReply, ChatRequest, LanguageBackend, Message, Role, ToolCallEnvelope,
    Usage,
};

pub const SCRIPT_SCHEMA_VERSION: u32 = 1;

/// Digest keying a scripted reply: sha256 of the prompt id and the last
/// user-side message (user text or tool result).
pub fn script_key(prompt_id: &str, messages: &[Message]) -> String {
    let last = messages
        .iter()
        .rev()
        .find(|m| matches!(m.role, Role::User | Role::Tool))
        .map(|m| m.content.as_str())
        .unwrap_or("");
    let mut h = Sha256::new();
    h.update(prompt_id.as_bytes());
    h.update(b"\n");
    h.update(last.as_bytes());
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matcher {
    #[default]
    Any,
    /// Exact [`script_key`] digest.
    Digest(String),
    /// Substring of the last user-side message.
    Contains(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptedToolCall {
    pub name: String,
    #[serde(default = "empty_object")]
    pub arguments: Value,
}

fn empty_object() -> Value {
    Value::Object(Default::default())
}

impl ScriptedToolCall {
    pub fn new(name: &str, arguments: Value) -> Self {
        Self {
            name: name.to_string(),
            arguments,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptedReply {
    #[serde(default)]
    pub content: String,
    #[serde(default)]
    pub tool_calls: Vec<ScriptedToolCall>,
    /// Reported usage; defaults to a four-characters-per-token count.
    #[serde(default)]
    pub usage: Option<Usage>,
    /// Simulates a transport failure instead of replying.
    #[serde(default)]
    pub error: Option<String>,
}

impl ScriptedReply {
    pub fn text(content: impl Into<String>) -> Self {
        Self {
            content: content.into(),
            ..Default::default()
        }
    }

    pub fn json(value: Value) -> Self {
        Self::text(value.to_string())
    }

    pub fn calls(calls: Vec<ScriptedToolCall>) -> Self {
        Self {
            tool_calls: calls,
            ..Default::default()
        }
    }

    pub fn failure(msg: &str) -> Self {
        Self {
            error: Some(msg.to_string()),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptRule {
    pub prompt_id: String,
    #[serde(default)]
    pub when: Matcher,
    pub replies: Vec<ScriptedReply>,
    /// Keep serving the final reply once the sequence is exhausted.
    #[serde(default)]
    pub repeat_last: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Script {
    pub schema_version: u32,
    #[serde(default)]
    pub context_window: Option<usize>,
    pub rules: Vec<ScriptRule>,
}

impl Script {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self {
            schema_version: SCRIPT_SCHEMA_VERSION,
            context_window: None,
            rules,
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let script: Script = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        if script.schema_version != SCRIPT_SCHEMA_VERSION {
            return Err(format!(
                "{}: script schema version {} (expected {SCRIPT_SCHEMA_VERSION})",
                path.display(),
                script.schema_version
            ));
        }
        Ok(script)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedRequest {
    pub prompt_id: String,
    pub key: String,
    pub messages: Vec<Message>,
    pub tool_names: Vec<String>,
}

/// Deterministic backend replaying canned replies.
///
/// Rules are matched by prompt id, preferring digest matchers over substring
/// matchers over catch-alls, in declaration order within each class. Each
/// rule serves its replies in sequence.
pub struct ScriptedBackend {
    script: Script,
    cursors: Mutex<Vec<usize>>,
    log: Mutex<Vec<RecordedRequest>>,
    call_counter: AtomicUsize,
    window: usize,
}

pub const DEFAULT_SCRIPTED_WINDOW: usize = 32_768;

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        let n = script.rules.len();
        let window = script.context_window.unwrap_or(DEFAULT_SCRIPTED_WINDOW);
        Self {
            script,
            cursors: Mutex::new(vec![0; n]),
            log: Mutex::new(Vec::new()),
            call_counter: AtomicUsize::new(0),
            window,
        }
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        Ok(Self::new(Script::load(path)?))
    }

    pub fn requests(&self) -> Vec<RecordedRequest> {
        self.log.lock().expect("log poisoned").clone()
    }

    fn pick(&self, request: &ChatRequest, key: &str) -> Option<ScriptedReply> {
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| matches!(m.role, Role::User | Role::Tool))
            .map(|m| m.content.as_str())
            .unwrap_or("");
        let mut cursors = self.cursors.lock().expect("cursor poisoned");
        let rank = |m: &Matcher| match m {
            Matcher::Digest(_) => 0,
            Matcher::Contains(_) => 1,
            Matcher::Any => 2,
        };
        let mut order: Vec<usize> = (0..self.script.rules.len()).collect();
        order.sort_by_key(|&i| (rank(&self.script.rules[i].when), i));
        for i in order {
            let rule = &self.script.rules[i];
            if rule.prompt_id != request.prompt_id {
                continue;
            }
            let matched = match &rule.when {
                Matcher::Any => true,
                Matcher::Digest(d) => d == key,
                Matcher::Contains(s) => last.contains(s.as_str()),
            };
            if !matched || rule.replies.is_empty() {
                continue;
            }
            let cursor = cursors[i];
            if cursor < rule.replies.len() {
                cursors[i] += 1;
                return Some(rule.replies[cursor].clone());
            }
            if rule.repeat_last {
                return rule.replies.last().cloned();
            }
        }
        None
    }
}

fn chars_to_tokens(chars: usize) -> u64 {
    chars.div_ceil(4) as u64
}

impl LanguageBackend for ScriptedBackend {
    fn name(&self) -> &str {
        "scripted"
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn complete(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let key = script_key(&request.prompt_id, &request.messages);
        self.log.lock().expect("log poisoned").push(RecordedRequest {
            prompt_id: request.prompt_id.clone(),
            key: key.clone(),
            messages: request.messages.clone(),
            tool_names: request.tools.iter().map(|t| t.name.clone()).collect(),
        });
        let reply = self.pick(request, &key).ok_or_else(|| {
            BackendError::Rejected(format!(
                "script has no reply for prompt `{}` (key {key})",
                request.prompt_id
            ))
        })?;
        if let Some(err) = reply.error {
            return Err(BackendError::Transport(err));
        }
        let tool_calls: Vec<ToolCallEnvelope> = reply
            .tool_calls
            .into_iter()
            .map(|c| ToolCallEnvelope {
                id: format!("call_{}", self.call_counter.fetch_add(1, Ordering::SeqCst)),
                name: c.name,
                arguments: c.arguments,
            })
            .collect();
        let usage = reply.usage.unwrap_or_else(|| {
            let input_chars: usize = request
                .messages
                .iter()
                .map(|m| {
                    m.content.chars().count()
                        + m.tool_calls
                            .iter()
                            .map(|c| c.name.len() + c.arguments.to_string().chars().count())
                            .sum::<usize>()
                })
                .sum();
            let output_chars = reply.content.chars().count()
                + tool_calls
                    .iter()
                    .map(|c| c.name.len() + c.arguments.to_string().chars().count())
                    .sum::<usize>();
            Usage::new(chars_to_tokens(input_chars), chars_to_tokens(output_chars))
        });
        Ok(BackendReply {
            content: reply.content,
            tool_calls,
            usage,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::DecodingConfig;

    fn req(prompt_id: &str, last: &str) -> ChatRequest {
        ChatRequest {
            prompt_id: prompt_id.into(),
            messages: vec![Message::system("sys"), Message::user(last)],
            tools: Vec::new(),
            decoding: DecodingConfig::default(),
        }
    }

    #[test]
    fn digest_beats_catch_all_and_sequences_advance() {
        let target = req("p", "special");
        let key = script_key("p", &target.messages);
        let backend = ScriptedBackend::new(Script::new(vec![
            ScriptRule {
                prompt_id: "p".into(),
                when: Matcher::Any,
                replies: vec![ScriptedReply::text("a1"), ScriptedReply::text("a2")],
                repeat_last: false,
            },
            ScriptRule {
                prompt_id: "p".into(),
                when: Matcher::Digest(key),
                replies: vec![ScriptedReply::text("digest")],
                repeat_last: false,
            },
        ]));
        assert_eq!(backend.complete(&target).unwrap().content, "digest");
        assert_eq!(backend.complete(&target).unwrap().content, "a1");
        assert_eq!(backend.complete(&req("p", "x")).unwrap().content, "a2");
        assert!(backend.complete(&req("p", "x")).is_err());
    }

    #[test]
    fn identical_scripts_replay_identically() {
        let script = Script::new(vec![ScriptRule {
            prompt_id: "p".into(),
            when: Matcher::Contains("adapter".into()),
            replies: vec![ScriptedReply::text("hit")],
            repeat_last: true,
        }]);
        let a = ScriptedBackend::new(script.clone());
        let b = ScriptedBackend::new(script);
        for _ in 0..3 {
            let r = req("p", "load adapter");
            assert_eq!(a.complete(&r).unwrap(), b.complete(&r).unwrap());
        }
    }

    #[test]
    fn key_ignores_earlier_turns() {
        let a = vec![Message::system("one"), Message::user("q")];
        let b = vec![Message::system("two"), Message::user("zzz"), Message::user("q")];
        assert_eq!(script_key("p", &a), script_key("p", &b));
        assert_ne!(script_key("p", &a), script_key("other", &a));
    }
}
