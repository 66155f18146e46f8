use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{ConclusionKind, Finding, Unverifiable, Verified};
use crate::inspection::InspectionMemory;
use crate::llm::{LedgerSnapshot, Stage, Usage};
use crate::store::{self, StoreError};

pub const REPORT_KIND: &str = "verification-report";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub files_total: usize,
    pub files_completed: usize,
    pub critical_remaining: usize,
    pub iterations: u32,
    pub max_iterations: u32,
}

impl Coverage {
    pub fn from_memory(m: &InspectionMemory) -> Self {
        Self {
            files_total: m.file_status.len(),
            files_completed: m.completed_files().len(),
            critical_remaining: m.remaining_critical().len(),
            iterations: m.iteration_count,
            max_iterations: m.max_iterations,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetReport {
    pub advisory_id: String,
    pub project: String,
    pub commit: String,
    pub findings: Vec<Finding>,
    pub unverifiable: Vec<Unverifiable>,
    pub counts: BTreeMap<ConclusionKind, usize>,
    pub coverage: Option<Coverage>,
    /// Some exploitable-looking finding could not be run in a sandbox.
    pub static_only: bool,
    pub token_usage: BTreeMap<Stage, Usage>,
    pub total_tokens: Usage,
}

pub fn assemble_report(
    advisory_id: &str,
    project: &str,
    commit: &str,
    findings: Vec<Finding>,
    unverifiable: Vec<Unverifiable>,
    memory: Option<&InspectionMemory>,
    ledger: &LedgerSnapshot,
) -> TargetReport {
    let mut counts = BTreeMap::new();
    for f in &findings {
        *counts.entry(f.conclusion.kind).or_insert(0) += 1;
    }
    TargetReport {
        advisory_id: advisory_id.to_string(),
        project: project.to_string(),
        commit: commit.to_string(),
        static_only: findings.iter().any(|f| f.static_only),
        findings,
        unverifiable,
        counts,
        coverage: memory.map(Coverage::from_memory),
        token_usage: Stage::ALL.iter().map(|s| (*s, ledger.stage(*s))).collect(),
        total_tokens: ledger.total(),
    }
}

fn md_cell(s: &str) -> String {
    s.replace('|', "\\|").replace('\n', " ")
}

pub fn render_markdown(r: &TargetReport) -> String {
    let mut s = format!("# {} in {}@{}\n\n", r.advisory_id, r.project, r.commit);
    if r.static_only {
        s.push_str("**STATIC-ONLY**: no sandbox was available; exploitability was not confirmed dynamically.\n\n");
    }
    if r.findings.is_empty() && r.unverifiable.is_empty() {
        s.push_str("Clean scan: no candidates were reported.\n\n");
    } else {
        let counts: Vec<String> = r.counts.iter().map(|(k, n)| format!("{k}: {n}")).collect();
        s.push_str(&format!("{} findings ({})\n\n", r.findings.len(), counts.join(", ")));
    }
    if let Some(c) = &r.coverage {
        s.push_str(&format!(
            "Coverage: {}/{} files completed, {} critical-scope files remaining, {}/{} iterations.\n\n",
            c.files_completed, c.files_total, c.critical_remaining, c.iterations, c.max_iterations
        ));
    }
    for f in &r.findings {
        let loc = &f.candidate.location;
        s.push_str(&format!(
            "## {} {}:{}-{} `{}`\n\nConclusion: **{}**{}\n\n{}\n\n",
            f.candidate.id,
            loc.file,
            loc.start_line,
            loc.end_line,
            f.candidate.sink,
            f.conclusion.kind,
            if f.static_only { " (static-only)" } else { "" },
            f.conclusion.rationale
        ));
        if !f.conclusion.preconditions.is_empty() {
            s.push_str("Preconditions:\n");
            for p in &f.conclusion.preconditions {
                s.push_str(&format!("- {p}\n"));
            }
            s.push('\n');
        }
        s.push_str("| claim | subject | verified | evidence |\n|---|---|---|---|\n");
        for c in &f.static_checks {
            let v = match c.verified {
                Verified::Yes => "yes",
                Verified::No => "no",
                Verified::Unresolved => "unresolved",
            };
            s.push_str(&format!("| {} | {} | {v} | {} |\n", c.claim, md_cell(&c.subject), md_cell(&c.evidence)));
        }
        if let Some(poc) = &f.poc {
            s.push_str(&format!("\nPoC attempts ({} max):\n", poc.max_attempts));
            for (i, a) in poc.attempts.iter().enumerate() {
                s.push_str(&format!("{}. {:?}: {} (log sha256 {})\n", i + 1, a.outcome, a.description, a.log_digest));
            }
        }
        s.push('\n');
    }
    for u in &r.unverifiable {
        s.push_str(&format!("## {} unverifiable\n\n{}\n\n", u.candidate.id, u.reason));
    }
    s.push_str("## Token usage\n\n| stage | input | output |\n|---|---|---|\n");
    for (stage, u) in &r.token_usage {
        s.push_str(&format!("| {stage} | {} | {} |\n", u.input_tokens, u.output_tokens));
    }
    s.push_str(&format!("| total | {} | {} |\n", r.total_tokens.input_tokens, r.total_tokens.output_tokens));
    s
}

fn sarif_level(kind: ConclusionKind) -> &'static str {
    match kind {
        ConclusionKind::Exploitable => "error",
        ConclusionKind::ConditionallyExploitable => "warning",
        ConclusionKind::LibraryRisk => "note",
        ConclusionKind::NonExploitable => "none",
    }
}

/// SARIF 2.1.0 log with one result per finding; the rule id is the
/// reference advisory.
pub fn to_sarif(reports: &[TargetReport]) -> Value {
    let mut rules: BTreeMap<&str, Value> = BTreeMap::new();
    let mut results = Vec::new();
    for r in reports {
        rules.entry(&r.advisory_id).or_insert_with(|| {
            json!({"id": r.advisory_id, "shortDescription": {"text": format!("Variant of {}", r.advisory_id)}})
        });
        for f in &r.findings {
            let loc = &f.candidate.location;
            results.push(json!({
                "ruleId": r.advisory_id,
                "level": sarif_level(f.conclusion.kind),
                "message": {"text": format!("{} reaches {}: {}", f.conclusion.kind, f.candidate.sink, f.conclusion.rationale)},
                "locations": [{
                    "physicalLocation": {
                        "artifactLocation": {"uri": loc.file},
                        "region": {"startLine": loc.start_line, "endLine": loc.end_line}
                    }
                }],
                "properties": {
                    "project": r.project,
                    "commit": r.commit,
                    "candidate": f.candidate.id,
                    "conclusion": f.conclusion.kind,
                    "staticOnly": f.static_only
                }
            }));
        }
    }
    json!({
        "version": "2.1.0",
        "$schema": "https://json.schemastore.org/sarif-2.1.0.json",
        "runs": [{
            "tool": {"driver": {"name": "refscan", "version": env!("CARGO_PKG_VERSION"), "rules": rules.into_values().collect::<Vec<_>>()}},
            "results": results
        }]
    })
}

pub fn report_path(dir: &Path, advisory_id: &str, project: &str, commit: &str) -> PathBuf {
    dir.join(store::sanitize_key(advisory_id))
        .join(format!("{}.json", store::revision_key(project, commit)))
}

/// Writes the JSON document and its rendered markdown next to it.
pub fn save_report(dir: &Path, report: &TargetReport) -> Result<PathBuf, StoreError> {
    let path = report_path(dir, &report.advisory_id, &report.project, &report.commit);
    store::write_document(&path, REPORT_KIND, report)?;
    let md = path.with_extension("md");
    std::fs::write(&md, render_markdown(report)).map_err(|e| StoreError::Io {
        path: md.display().to_string(),
        source: e,
    })?;
    Ok(path)
}

pub fn load_report(path: &Path) -> Result<TargetReport, StoreError> {
    store::read_document(path, REPORT_KIND)
}
