use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{
    BackendError, BackendReply, ChatRequest, DecodingConfig, EmbeddingBackend, LanguageBackend,
    Role, ToolCallEnvelope, Usage,
};

fn client(timeout: Duration) -> Result<Client, BackendError> {
    Client::builder()
        .timeout(timeout)
        .build()
        .map_err(|e| BackendError::Rejected(format!("http client: {e}")))
}

fn classify_status(status: StatusCode, body: String) -> BackendError {
    if status.is_server_error() || status == StatusCode::TOO_MANY_REQUESTS {
        BackendError::Transport(format!("{status}: {body}"))
    } else {
        BackendError::Rejected(format!("{status}: {body}"))
    }
}

fn post(
    client: &Client,
    url: &str,
    api_key: Option<&str>,
    body: &Value,
) -> Result<Value, BackendError> {
    let mut req = client.post(url).json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req
        .send()
        .map_err(|e| BackendError::Transport(e.to_string()))?;
    let status = resp.status();
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(classify_status(status, text));
    }
    resp.json::<Value>()
        .map_err(|e| BackendError::Rejected(format!("undecodable response: {e}")))
}

/// Chat-completions client for OpenAI-compatible servers (vLLM, hosted APIs).
pub struct OpenAiCompatBackend {
    name: String,
    base_url: String,
    model: String,
    api_key: Option<String>,
    window: usize,
    decoding: DecodingConfig,
    client: Client,
}

impl OpenAiCompatBackend {
    pub fn new(
        name: &str,
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        window: usize,
        decoding: DecodingConfig,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            name: name.to_string(),
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            window,
            decoding,
            client: client(timeout)?,
        })
    }

    fn body(&self, request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                    Role::Tool => "tool",
                };
                let mut v = json!({"role": role, "content": m.content});
                if !m.tool_calls.is_empty() {
                    v["tool_calls"] = m
                        .tool_calls
                        .iter()
                        .map(|c| {
                            json!({
                                "id": c.id,
                                "type": "function",
                                "function": {"name": c.name, "arguments": c.arguments.to_string()}
                            })
                        })
                        .collect();
                }
                if let Some(id) = &m.tool_call_id {
                    v["tool_call_id"] = json!(id);
                }
                v
            })
            .collect();
        let mut body = json!({
            "model": self.model,
            "messages": messages,
            "temperature": request.decoding.temperature,
            "top_p": request.decoding.top_p,
        });
        if !request.tools.is_empty() {
            body["tools"] = request
                .tools
                .iter()
                .map(|t| {
                    json!({
                        "type": "function",
                        "function": {"name": t.name, "description": t.description, "parameters": t.json_schema()}
                    })
                })
                .collect();
        }
        body
    }
}

fn parse_chat(resp: &Value) -> Result<BackendReply, BackendError> {
    let message = resp
        .pointer("/choices/0/message")
        .ok_or_else(|| BackendError::Rejected("response has no choices[0].message".into()))?;
    let content = message
        .get("content")
        .and_then(Value::as_str)
        .unwrap_or_default()
        .to_string();
    let mut tool_calls = Vec::new();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        for (i, c) in calls.iter().enumerate() {
            let name = c
                .pointer("/function/name")
                .and_then(Value::as_str)
                .unwrap_or_default()
                .to_string();
            let raw_args = c
                .pointer("/function/arguments")
                .and_then(Value::as_str)
                .unwrap_or("{}");
            // Unparseable arguments are passed through as a string so schema
            // validation rejects them and the model gets a correction round.
            let arguments = serde_json::from_str(raw_args).unwrap_or(Value::String(raw_args.into()));
            let id = c
                .get("id")
                .and_then(Value::as_str)
                .map(str::to_string)
                .unwrap_or_else(|| format!("call_{i}"));
            tool_calls.push(ToolCallEnvelope { id, name, arguments });
        }
    }
    let usage = Usage::new(
        resp.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
        resp.pointer("/usage/completion_tokens").and_then(Value::as_u64).unwrap_or(0),
    );
    Ok(BackendReply {
        content,
        tool_calls,
        usage,
    })
}

impl LanguageBackend for OpenAiCompatBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn context_window(&self) -> usize {
        self.window
    }

    fn decoding(&self) -> DecodingConfig {
        self.decoding
    }

    fn complete(&self, request: &ChatRequest) -> Result<BackendReply, BackendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let resp = post(&self.client, &url, self.api_key.as_deref(), &self.body(request))?;
        parse_chat(&resp)
    }
}

/// `/embeddings` client for OpenAI-compatible servers.
pub struct HttpEmbedder {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: Client,
}

impl HttpEmbedder {
    pub fn new(
        base_url: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
    ) -> Result<Self, BackendError> {
        Ok(Self {
            base_url: base_url.trim_end_matches('/').to_string(),
            model: model.to_string(),
            api_key,
            client: client(timeout)?,
        })
    }
}

impl EmbeddingBackend for HttpEmbedder {
    fn name(&self) -> &str {
        "http-embedding"
    }

    fn embed_raw(&self, texts: &[String]) -> Result<(Vec<Vec<f64>>, Usage), BackendError> {
        let url = format!("{}/embeddings", self.base_url);
        let resp = post(
            &self.client,
            &url,
            self.api_key.as_deref(),
            &json!({"model": self.model, "input": texts}),
        )?;
        let data = resp
            .get("data")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Rejected("embedding response has no data".into()))?;
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::with_capacity(data.len());
        for (i, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(Value::as_u64).map(|x| x as usize).unwrap_or(i);
            let vector = item
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| BackendError::Rejected(format!("data[{i}] has no embedding")))?
                .iter()
                .map(|x| x.as_f64().unwrap_or(0.0))
                .collect();
            rows.push((index, vector));
        }
        rows.sort_by_key(|(i, _)| *i);
        let usage = Usage::new(
            resp.pointer("/usage/prompt_tokens").and_then(Value::as_u64).unwrap_or(0),
            0,
        );
        Ok((rows.into_iter().map(|(_, v)| v).collect(), usage))
    }
}
