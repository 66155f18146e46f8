//! Versioned JSON documents on disk.
//!
//! Every persisted artifact is wrapped in an envelope carrying a mandatory
//! `schema_version` and a `kind` tag. Writes go through a temporary file and
//! a rename so a killed process never leaves a half-written document.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{0} not found")]
    NotFound(String),
    #[error("{path}: schema version {found} cannot be read by this build (expected {expected}); migrate or re-run the stage with --fresh")]
    Migration {
        path: String,
        found: u64,
        expected: u32,
    },
    #[error("{path}: schema error at `{field}`: {message}")]
    Schema {
        path: String,
        field: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    schema_version: u32,
    kind: String,
    body: T,
}

/// Filesystem-safe rendering of a key component.
pub fn sanitize_key(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// `project@commit` file stem.
pub fn revision_key(project: &str, commit: &str) -> String {
    format!("{}@{}", sanitize_key(project), sanitize_key(commit))
}

fn io_err(path: &Path, source: std::io::Error) -> StoreError {
    StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_document<T: Serialize>(path: &Path, kind: &str, body: &T) -> Result<(), StoreError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        kind: kind.to_string(),
        body,
    };
    let text = serde_json::to_string_pretty(&envelope).map_err(|e| StoreError::Schema {
        path: path.display().to_string(),
        field: "body".into(),
        message: e.to_string(),
    })?;
    let tmp = tmp_path(path);
    std::fs::write(&tmp, text + "\n").map_err(|e| io_err(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

pub fn read_document<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T, StoreError> {
    let shown = path.display().to_string();
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(StoreError::NotFound(shown)),
        Err(e) => return Err(io_err(path, e)),
    };
    let schema = |field: &str, message: String| StoreError::Schema {
        path: shown.clone(),
        field: field.to_string(),
        message,
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| schema("$", e.to_string()))?;
    let version = value
        .get("schema_version")
        .ok_or_else(|| schema("schema_version", "missing".into()))?
        .as_u64()
        .ok_or_else(|| schema("schema_version", "expected an integer".into()))?;
    if version != u64::from(SCHEMA_VERSION) {
        return Err(StoreError::Migration {
            path: shown,
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    match value.get("kind").and_then(Value::as_str) {
        Some(k) if k == kind => {}
        Some(k) => return Err(schema("kind", format!("expected {kind}, found {k}"))),
        None => return Err(schema("kind", "missing".into())),
    }
    let body = value.get("body").ok_or_else(|| schema("body", "missing".into()))?;
    serde_path_to_error::deserialize(body).map_err(|e| {
        let field = e.path().to_string();
        schema(&format!("body.{field}"), e.into_inner().to_string())
    })
}
