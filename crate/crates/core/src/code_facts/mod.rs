//! Read-only, syntax-aware access to a repository checkout.
//!
//! Python sources get full treatment (functions, imports, call relations,
//! intraprocedural data flow) through a tree-sitter grammar. Every other file
//! is reachable through enumeration and regex search only.

mod calls;
mod checkout;
mod dataflow;
mod files;
mod python;
mod sarif;
mod search;

use std::path::Path;

use thiserror::Error;

pub use calls::{extract_call_relations, CallExtraction, CallRelation, CodeIndex};
pub use checkout::RepoCheckout;
pub use dataflow::{analyze_data_flow, DataFlowSummary, FlowEdge, FlowVia, RETURN_SYMBOL};
pub use files::{is_python_file, is_source_file, list_files};
pub use python::{
    get_function_code, get_imports, module_name_for_path, parse_python, FunctionCode,
    FunctionFact, FunctionKind, FunctionRef, FunctionSelector, ImportList, ParsedFile,
};
pub use sarif::{ingest_sarif, ingest_sarif_str, SarifResult};
pub use search::{search, SearchHit, SearchOptions, DEFAULT_LINE_WIDTH};

#[derive(Debug, Error)]
pub enum CodeFactsError {
    #[error("invalid checkout: {0}")]
    InvalidCheckout(String),
    #[error("path outside checkout: {0}")]
    PathOutsideCheckout(String),
    #[error("empty scope: {0} does not exist in the checkout")]
    EmptyScope(String),
    #[error("invalid pattern {pattern:?}{}: {message}", position.map(|p| format!(" at offset {p}")).unwrap_or_default())]
    Pattern {
        pattern: String,
        position: Option<usize>,
        message: String,
    },
    #[error("{name} not found in {file}")]
    NotFound { file: String, name: String },
    #[error("malformed SARIF at {member}: {message}")]
    Sarif { member: String, message: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CodeFactsError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
