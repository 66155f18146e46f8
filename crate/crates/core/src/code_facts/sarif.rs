use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::CodeFactsError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SarifResult {
    pub rule_id: String,
    pub file: String,
    pub line: usize,
    pub message: String,
}

fn malformed(member: impl Into<String>, message: impl Into<String>) -> CodeFactsError {
    CodeFactsError::Sarif {
        member: member.into(),
        message: message.into(),
    }
}

fn normalize_uri(uri: &str, root: Option<&Path>) -> String {
    let mut s = uri.strip_prefix("file://").unwrap_or(uri).replace("%20", " ");
    if let Some(root) = root {
        let root = root.to_string_lossy();
        let root = root.trim_end_matches('/');
        if let Some(rest) = s.strip_prefix(root) {
            s = rest.to_string();
        }
    }
    let trimmed = s.trim_start_matches("./").trim_start_matches('/');
    trimmed.to_string()
}

/// Parses a SARIF 2.1.0 document into flat (rule, file, line, message) rows.
/// `root`, when given, is stripped from absolute artifact URIs.
pub fn ingest_sarif_str(text: &str, root: Option<&Path>) -> Result<Vec<SarifResult>, CodeFactsError> {
    let doc: Value =
        serde_json::from_str(text).map_err(|e| malformed("$", e.to_string()))?;
    let obj = doc.as_object().ok_or_else(|| malformed("$", "expected an object"))?;
    if let Some(v) = obj.get("version") {
        if v.as_str() != Some("2.1.0") {
            return Err(malformed("version", format!("unsupported version {v}")));
        }
    }
    let runs = obj
        .get("runs")
        .ok_or_else(|| malformed("runs", "missing"))?
        .as_array()
        .ok_or_else(|| malformed("runs", "expected an array"))?;
    let mut out = Vec::new();
    for (ri, run) in runs.iter().enumerate() {
        let Some(results) = run.get("results") else { continue };
        let results = results
            .as_array()
            .ok_or_else(|| malformed(format!("runs[{ri}].results"), "expected an array"))?;
        for (i, result) in results.iter().enumerate() {
            let at = format!("runs[{ri}].results[{i}]");
            let rule_id = result
                .get("ruleId")
                .and_then(Value::as_str)
                .or_else(|| result.pointer("/rule/id").and_then(Value::as_str))
                .ok_or_else(|| malformed(format!("{at}.ruleId"), "missing rule id"))?;
            let message = result
                .pointer("/message/text")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed(format!("{at}.message.text"), "missing message text"))?;
            let physical = result
                .pointer("/locations/0/physicalLocation")
                .ok_or_else(|| malformed(format!("{at}.locations"), "missing physical location"))?;
            let uri = physical
                .pointer("/artifactLocation/uri")
                .and_then(Value::as_str)
                .ok_or_else(|| {
                    malformed(
                        format!("{at}.locations[0].physicalLocation.artifactLocation.uri"),
                        "missing uri",
                    )
                })?;
            let line = match physical.pointer("/region/startLine") {
                None => 1,
                Some(v) => v.as_u64().filter(|l| *l >= 1).ok_or_else(|| {
                    malformed(
                        format!("{at}.locations[0].physicalLocation.region.startLine"),
                        "expected a positive integer",
                    )
                })? as usize,
            };
            out.push(SarifResult {
                rule_id: rule_id.to_string(),
                file: normalize_uri(uri, root),
                line,
                message: message.to_string(),
            });
        }
    }
    Ok(out)
}

pub fn ingest_sarif(path: &Path, root: Option<&Path>) -> Result<Vec<SarifResult>, CodeFactsError> {
    let text = std::fs::read_to_string(path).map_err(|e| CodeFactsError::io(path, e))?;
    ingest_sarif_str(&text, root)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ONE: &str = r#"{
      "version": "2.1.0",
      "runs": [{
        "tool": {"driver": {"name": "x"}},
        "results": [{
          "ruleId": "py/unsafe-deserialization",
          "message": {"text": "torch.load on user path"},
          "locations": [{"physicalLocation": {
            "artifactLocation": {"uri": "file:///repo/a.py"},
            "region": {"startLine": 10}
          }}]
        }]
      }]
    }"#;

    #[test]
    fn single_result() {
        let rows = ingest_sarif_str(ONE, Some(Path::new("/repo"))).unwrap();
        assert_eq!(
            rows,
            vec![SarifResult {
                rule_id: "py/unsafe-deserialization".into(),
                file: "a.py".into(),
                line: 10,
                message: "torch.load on user path".into()
            }]
        );
    }

    #[test]
    fn empty_runs() {
        assert!(ingest_sarif_str(r#"{"version":"2.1.0","runs":[]}"#, None)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn truncated_document() {
        let err = ingest_sarif_str(&ONE[..ONE.len() / 2], None).unwrap_err();
        assert!(matches!(err, CodeFactsError::Sarif { .. }));
    }

    #[test]
    fn names_offending_member() {
        let doc = r#"{"version":"2.1.0","runs":[{"results":[{"ruleId":"r","message":{"text":"m"}}]}]}"#;
        match ingest_sarif_str(doc, None).unwrap_err() {
            CodeFactsError::Sarif { member, .. } => assert_eq!(member, "runs[0].results[0].locations"),
            other => panic!("{other:?}"),
        }
    }
}
