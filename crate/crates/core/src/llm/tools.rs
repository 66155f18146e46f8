use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    String,
    Integer,
    Boolean,
    Array,
    Object,
}

impl ParamKind {
    fn matches(self, v: &Value) -> bool {
        match self {
            ParamKind::String => v.is_string(),
            ParamKind::Integer => v.is_u64() || v.is_i64(),
            ParamKind::Boolean => v.is_boolean(),
            ParamKind::Array => v.is_array(),
            ParamKind::Object => v.is_object(),
        }
    }

    fn json_type(self) -> &'static str {
        match self {
            ParamKind::String => "string",
            ParamKind::Integer => "integer",
            ParamKind::Boolean => "boolean",
            ParamKind::Array => "array",
            ParamKind::Object => "object",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub kind: ParamKind,
    pub required: bool,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub params: Vec<ParamSpec>,
}

impl ToolSpec {
    pub fn new(name: &str, description: &str) -> Self {
        Self {
            name: name.to_string(),
            description: description.to_string(),
            params: Vec::new(),
        }
    }

    pub fn required(mut self, name: &str, kind: ParamKind, description: &str) -> Self {
        self.params.push(ParamSpec {
            name: name.to_string(),
            kind,
            required: true,
            description: description.to_string(),
        });
        self
    }

    pub fn optional(mut self, name: &str, kind: ParamKind, description: &str) -> Self {
        self.params.push(ParamSpec {
            name: name.to_string(),
            kind,
            required: false,
            description: description.to_string(),
        });
        self
    }

    /// JSON Schema rendering for function-calling endpoints.
    pub fn json_schema(&self) -> Value {
        let mut props = Map::new();
        for p in &self.params {
            props.insert(
                p.name.clone(),
                json!({"type": p.kind.json_type(), "description": p.description}),
            );
        }
        let required: Vec<&str> = self
            .params
            .iter()
            .filter(|p| p.required)
            .map(|p| p.name.as_str())
            .collect();
        json!({"type": "object", "properties": props, "required": required, "additionalProperties": false})
    }

    pub fn validate(&self, arguments: &Value) -> Result<(), String> {
        let obj = arguments
            .as_object()
            .ok_or_else(|| format!("{}: arguments must be an object", self.name))?;
        for p in &self.params {
            match obj.get(&p.name) {
                None | Some(Value::Null) if p.required => {
                    return Err(format!("{}: missing required argument `{}`", self.name, p.name))
                }
                None | Some(Value::Null) => {}
                Some(v) if !p.kind.matches(v) => {
                    return Err(format!(
                        "{}: argument `{}` must be {}",
                        self.name,
                        p.name,
                        p.kind.json_type()
                    ))
                }
                Some(_) => {}
            }
        }
        if let Some(unknown) = obj.keys().find(|k| !self.params.iter().any(|p| &p.name == *k)) {
            return Err(format!("{}: unknown argument `{unknown}`", self.name));
        }
        Ok(())
    }
}

/// A tool invocation requested by the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCallEnvelope {
    pub id: String,
    pub name: String,
    pub arguments: Value,
}

/// The closed set of tools a conversation may invoke.
#[derive(Debug, Clone, Default)]
pub struct ToolRegistry {
    tools: BTreeMap<String, ToolSpec>,
}

impl ToolRegistry {
    pub fn new(tools: impl IntoIterator<Item = ToolSpec>) -> Self {
        Self {
            tools: tools.into_iter().map(|t| (t.name.clone(), t)).collect(),
        }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&ToolSpec> {
        self.tools.get(name)
    }

    pub fn specs(&self) -> impl Iterator<Item = &ToolSpec> {
        self.tools.values()
    }

    pub fn is_empty(&self) -> bool {
        self.tools.is_empty()
    }

    pub fn validate(&self, call: &ToolCallEnvelope) -> Result<(), String> {
        match self.tools.get(&call.name) {
            None => Err(format!("unknown tool `{}`", call.name)),
            Some(spec) => spec.validate(&call.arguments),
        }
    }
}
