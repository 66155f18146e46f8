use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{list_files, CodeFactsError, RepoCheckout};

pub const DEFAULT_LINE_WIDTH: usize = 400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchHit {
    pub file: String,
    pub line: usize,
    pub text: String,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub max_line_width: usize,
    /// `None` means unlimited.
    pub max_hits: Option<usize>,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            max_line_width: DEFAULT_LINE_WIDTH,
            max_hits: None,
        }
    }
}

pub(crate) fn compile_pattern(pattern: &str) -> Result<Regex, CodeFactsError> {
    Regex::new(pattern).map_err(|err| {
        // The ast parser reports a span; `regex::Error` only carries text.
        let position = regex_syntax::ast::parse::Parser::new()
            .parse(pattern)
            .err()
            .map(|e| e.span().start.offset);
        CodeFactsError::Pattern {
            pattern: pattern.to_string(),
            position,
            message: err.to_string().lines().last().unwrap_or("").trim().to_string(),
        }
    })
}

/// Regex search over a file or directory. Hits are ordered by (file, line).
pub fn search(
    checkout: &RepoCheckout,
    pattern: &str,
    scope: Option<&str>,
    opts: SearchOptions,
) -> Result<Vec<SearchHit>, CodeFactsError> {
    let re = compile_pattern(pattern)?;
    let files = list_files(checkout, scope)?;
    let mut hits = Vec::new();
    for file in files {
        let path = checkout.root_path.join(&file);
        let bytes = std::fs::read(&path).map_err(|e| CodeFactsError::io(&path, e))?;
        if bytes.contains(&0) {
            continue;
        }
        let text = String::from_utf8_lossy(&bytes);
        for (idx, line) in text.lines().enumerate() {
            if re.is_match(line) {
                hits.push(SearchHit {
                    file: file.clone(),
                    line: idx + 1,
                    text: truncate_chars(line.trim(), opts.max_line_width),
                });
                if opts.max_hits.is_some_and(|m| hits.len() >= m) {
                    return Ok(hits);
                }
            }
        }
    }
    Ok(hits)
}

pub(crate) fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => s[..idx].to_string(),
        None => s.to_string(),
    }
}
