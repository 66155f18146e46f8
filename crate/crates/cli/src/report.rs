//! Cross-target report for one advisory.

use std::collections::BTreeMap;

use refscan_core::llm::{LedgerSnapshot, Stage, Usage};
use refscan_core::verification::{render_markdown, ConclusionKind, TargetReport};
use serde::{Deserialize, Serialize};

pub const CONSOLIDATED_KIND: &str = "consolidated-report";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TargetSection {
    pub project: String,
    pub commit: String,
    /// Pipeline stages not yet run for this target, in pipeline order.
    pub missing_stages: Vec<String>,
    pub report: Option<TargetReport>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsolidatedReport {
    pub advisory_id: String,
    pub targets: Vec<TargetSection>,
    pub counts: BTreeMap<ConclusionKind, usize>,
    pub total_findings: usize,
    pub unverifiable: usize,
    pub token_usage: BTreeMap<Stage, Usage>,
    pub total_tokens: Usage,
    pub ledger_conserved: bool,
}

pub fn consolidate(advisory_id: &str, targets: Vec<TargetSection>, ledger: &LedgerSnapshot) -> ConsolidatedReport {
    let mut counts = BTreeMap::new();
    let mut total_findings = 0;
    let mut unverifiable = 0;
    for r in targets.iter().filter_map(|t| t.report.as_ref()) {
        for (k, n) in &r.counts {
            *counts.entry(*k).or_insert(0) += n;
        }
        total_findings += r.findings.len();
        unverifiable += r.unverifiable.len();
    }
    ConsolidatedReport {
        advisory_id: advisory_id.to_string(),
        targets,
        counts,
        total_findings,
        unverifiable,
        token_usage: Stage::ALL.iter().map(|s| (*s, ledger.stage(*s))).collect(),
        total_tokens: ledger.total(),
        ledger_conserved: ledger.is_conserved(),
    }
}

/// The totals line shared by the markdown summary and its parsers.
pub fn totals_line(r: &ConsolidatedReport) -> String {
    let mut parts = vec![format!("findings={}", r.total_findings)];
    parts.extend(r.counts.iter().map(|(k, n)| format!("{k}={n}")));
    parts.push(format!("unverifiable={}", r.unverifiable));
    format!("Totals: {}", parts.join(" "))
}

fn demote(md: &str) -> String {
    md.lines()
        .map(|l| if l.starts_with('#') { format!("#{l}") } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn render(r: &ConsolidatedReport) -> String {
    let mut s = format!("# Variant audit for {}\n\n{}\n\n", r.advisory_id, totals_line(r));
    s.push_str("| target | status |\n|---|---|\n");
    for t in &r.targets {
        let status = if t.missing_stages.is_empty() {
            "complete".to_string()
        } else {
            format!("missing: {}", t.missing_stages.join(", "))
        };
        s.push_str(&format!("| {}@{} | {status} |\n", t.project, t.commit));
    }
    s.push('\n');
    for t in &r.targets {
        match &t.report {
            Some(rep) => {
                s.push_str(&demote(&render_markdown(rep)));
                s.push_str("\n\n");
            }
            None => s.push_str(&format!(
                "## {}@{}\n\nNot verified yet; missing stages: {}.\n\n",
                t.project,
                t.commit,
                t.missing_stages.join(", ")
            )),
        }
    }
    s.push_str("## Token usage, all stages\n\n| stage | input | output |\n|---|---|---|\n");
    for (stage, u) in &r.token_usage {
        s.push_str(&format!("| {stage} | {} | {} |\n", u.input_tokens, u.output_tokens));
    }
    s.push_str(&format!(
        "| total | {} | {} |\n",
        r.total_tokens.input_tokens, r.total_tokens.output_tokens
    ));
    if !r.ledger_conserved {
        s.push_str("\nWarning: stage totals do not match the exchange log.\n");
    }
    s
}
