use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::VulnError;
use crate::code_facts::RepoCheckout;

/// Version of the operator-authored reference document format.
pub const REFERENCE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainRole {
    Source,
    Propagation,
    Sink,
}

impl fmt::Display for ChainRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ChainRole::Source => "source",
            ChainRole::Propagation => "propagation",
            ChainRole::Sink => "sink",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainEntry {
    pub file: String,
    pub function: String,
    pub role: ChainRole,
    #[serde(default)]
    pub note: String,
    /// Set by [`check_chain`] when the file is absent from the reference checkout.
    #[serde(default)]
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessChain {
    pub advisory_id: String,
    pub project: String,
    pub affected_commit: String,
    pub entries: Vec<ChainEntry>,
    pub payload_note: Option<String>,
}

impl WitnessChain {
    pub fn files(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.file.as_str()) {
                out.push(&e.file);
            }
        }
        out
    }

    pub fn source(&self) -> &ChainEntry {
        &self.entries[0]
    }

    pub fn sink(&self) -> &ChainEntry {
        self.entries.last().expect("validated chain has ≥ 2 entries")
    }

    /// One line per entry in chain order.
    pub fn render(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| {
                let note = if e.note.is_empty() { String::new() } else { format!(" ({})", e.note) };
                format!("{}. [{}] {}::{}{}", i + 1, e.role, e.file, e.function, note)
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceDocument {
    format_version: u32,
    advisory_id: String,
    project: String,
    affected_commit: String,
    #[serde(default)]
    payload: Option<String>,
    chain: Vec<RawEntry>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEntry {
    file: String,
    function: String,
    role: ChainRole,
    #[serde(default)]
    note: String,
}

fn invalid(msg: impl Into<String>) -> VulnError {
    VulnError::InvalidReference(msg.into())
}

/// Parses and validates a reference document (TOML).
pub fn parse_reference_str(text: &str) -> Result<WitnessChain, VulnError> {
    let doc: ReferenceDocument = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
    if doc.format_version != REFERENCE_FORMAT_VERSION {
        return Err(invalid(format!(
            "format_version {} is not supported (expected {REFERENCE_FORMAT_VERSION})",
            doc.format_version
        )));
    }
    for (name, v) in [
        ("advisory_id", &doc.advisory_id),
        ("project", &doc.project),
        ("affected_commit", &doc.affected_commit),
    ] {
        if v.trim().is_empty() {
            return Err(invalid(format!("{name} is empty")));
        }
    }
    let n = doc.chain.len();
    if n < 2 {
        return Err(invalid(format!("chain has {n} entries; at least a source and a sink are required")));
    }
    for (i, e) in doc.chain.iter().enumerate() {
        let expected = match i {
            0 => ChainRole::Source,
            i if i == n - 1 => ChainRole::Sink,
            _ => ChainRole::Propagation,
        };
        if e.role != expected {
            return Err(invalid(format!("chain[{i}] has role {}, expected {expected}", e.role)));
        }
        if e.file.trim().is_empty() || e.function.trim().is_empty() {
            return Err(invalid(format!("chain[{i}] needs a file and a function")));
        }
    }
    Ok(WitnessChain {
        advisory_id: doc.advisory_id,
        project: doc.project,
        affected_commit: doc.affected_commit,
        entries: doc
            .chain
            .into_iter()
            .map(|e| ChainEntry {
                file: e.file,
                function: e.function,
                role: e.role,
                note: e.note,
                missing: false,
            })
            .collect(),
        payload_note: doc.payload.filter(|p| !p.trim().is_empty()),
    })
}

pub fn parse_reference(path: &Path) -> Result<WitnessChain, VulnError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    parse_reference_str(&text).map_err(|e| match e {
        VulnError::InvalidReference(m) => invalid(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Flags entries whose file is absent from the reference checkout.
pub fn check_chain(chain: &mut WitnessChain, checkout: &RepoCheckout) -> Vec<String> {
    let mut diagnostics = Vec::new();
    for e in &mut chain.entries {
        e.missing = !checkout.file_exists(&e.file);
        if e.missing {
            diagnostics.push(format!("chain file {} not found in reference checkout", e.file));
        }
    }
    diagnostics
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(roles: &[&str]) -> String {
        let mut s = String::from(
            "format_version = 1\nadvisory_id = \"GHSA-test\"\nproject = \"demo\"\naffected_commit = \"c1\"\npayload = \"pickle with __reduce__\"\n",
        );
        for (i, r) in roles.iter().enumerate() {
            s.push_str(&format!("[[chain]]\nfile = \"f{i}.py\"\nfunction = \"fn{i}\"\nrole = \"{r}\"\n"));
        }
        s
    }

    #[test]
    fn seven_entry_chain() {
        let mut roles = vec!["source"];
        roles.extend(["propagation"; 5]);
        roles.push("sink");
        let c = parse_reference_str(&doc(&roles)).unwrap();
        assert_eq!(c.entries.len(), 7);
        assert_eq!(c.sink().function, "fn6");
        assert_eq!(c.payload_note.as_deref(), Some("pickle with __reduce__"));
    }

    #[test]
    fn two_entry_chain() {
        let c = parse_reference_str(&doc(&["source", "sink"])).unwrap();
        assert_eq!(c.entries.len(), 2);
    }

    #[test]
    fn ordering_guards() {
        assert!(parse_reference_str(&doc(&["sink", "source"])).is_err());
        assert!(parse_reference_str(&doc(&["source"])).is_err());
        assert!(parse_reference_str(&doc(&["source", "propagation"])).is_err());
        assert!(parse_reference_str(&doc(&["source", "sink", "sink"])).is_err());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = doc(&["source", "sink"]).replace("payload", "paylod");
        assert!(parse_reference_str(&text).is_err());
    }

    #[test]
    fn missing_files_flagged() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f0.py"), "def fn0(): pass\n").unwrap();
        let co = RepoCheckout::new(dir.path(), "demo", "c1").unwrap();
        let mut c = parse_reference_str(&doc(&["source", "sink"])).unwrap();
        let diags = check_chain(&mut c, &co);
        assert!(!c.entries[0].missing);
        assert!(c.entries[1].missing);
        assert_eq!(diags.len(), 1);
    }
}
