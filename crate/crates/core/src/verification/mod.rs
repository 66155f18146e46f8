//! Static claim checking, conclusion gating and sandboxed PoC attempts.

mod catalog;
mod claims;
mod classify;
mod report;
mod sandbox;

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::code_facts::{CallRelation, RepoCheckout};
use crate::inspection::Candidate;
use crate::llm::{Gateway, GatewayError, Usage};
use crate::store::{self, StoreError};
use crate::vuln_semantics::VulnerabilitySemantics;

pub use catalog::{guard_patterns, lookup_sink, sink_token, RiskySink, SinkCategory, INPUT_INDICATORS, RISKY_SINKS};
pub use claims::static_check;
pub use classify::{cap, classify, decide, gate, parse_conclusion, risky_dependency, CLASSIFY_PROMPT_ID};
pub use report::{
    assemble_report, load_report, render_markdown, report_path, save_report, to_sarif, Coverage, TargetReport,
    REPORT_KIND,
};
pub use sandbox::{
    apply_poc, attempt_poc, outcome_of, ContainerSandbox, FakeSandbox, PocJob, PocSettings, SandboxError,
    SandboxExecutor, SandboxRun, BLOCKED_MARKER, DEFAULT_MAX_ATTEMPTS, POC_PROMPT_ID, SINK_INSTRUMENTATION,
    SINK_MARKER,
};

#[derive(Debug, Error)]
pub enum VerificationError {
    #[error("candidate cannot be verified: {0}")]
    Unverifiable(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verified {
    Yes,
    No,
    Unresolved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClaimKind {
    SourceExists,
    PropagationExists,
    SinkExists,
    GuardMissing,
    TrustBoundaryCrossed,
}

impl fmt::Display for ClaimKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClaimKind::SourceExists => "source exists",
            ClaimKind::PropagationExists => "propagation exists",
            ClaimKind::SinkExists => "sink exists",
            ClaimKind::GuardMissing => "guard missing",
            ClaimKind::TrustBoundaryCrossed => "trust boundary crossed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StaticCheck {
    pub claim: ClaimKind,
    pub subject: String,
    pub verified: Verified,
    pub evidence: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConclusionKind {
    Exploitable,
    ConditionallyExploitable,
    LibraryRisk,
    NonExploitable,
}

impl fmt::Display for ConclusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ConclusionKind::Exploitable => "exploitable",
            ConclusionKind::ConditionallyExploitable => "conditionally_exploitable",
            ConclusionKind::LibraryRisk => "library_risk",
            ConclusionKind::NonExploitable => "non_exploitable",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conclusion {
    pub kind: ConclusionKind,
    pub rationale: String,
    /// Non-empty exactly for conditionally exploitable.
    pub preconditions: Vec<String>,
}

impl Conclusion {
    pub fn new(kind: ConclusionKind, rationale: String, preconditions: Vec<String>) -> Result<Self, String> {
        let conditional = kind == ConclusionKind::ConditionallyExploitable;
        if conditional && preconditions.is_empty() {
            return Err("conditionally_exploitable needs at least one precondition".into());
        }
        if !conditional && !preconditions.is_empty() {
            return Err(format!("{kind} takes no preconditions"));
        }
        Ok(Self {
            kind,
            rationale,
            preconditions,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PocOutcome {
    ReachedSink,
    Error,
    Blocked,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PocAttempt {
    pub description: String,
    pub log_digest: String,
    pub outcome: PocOutcome,
    pub log_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PocRecord {
    pub attempts: Vec<PocAttempt>,
    pub max_attempts: u32,
}

impl PocRecord {
    pub fn reached_sink(&self) -> bool {
        self.attempts.iter().any(|a| a.outcome == PocOutcome::ReachedSink)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub candidate: Candidate,
    pub conclusion: Conclusion,
    /// Conclusion before the PoC stage.
    pub static_conclusion: ConclusionKind,
    pub static_checks: Vec<StaticCheck>,
    pub poc: Option<PocRecord>,
    pub reference_advisory: String,
    /// Exploitability was concluded without a sandbox run.
    pub static_only: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Unverifiable {
    pub candidate: Candidate,
    pub reason: String,
}

pub struct VerifyOptions<'a> {
    pub sandbox: Option<&'a dyn SandboxExecutor>,
    pub max_attempts: u32,
    pub timeout: Duration,
    pub log_dir: Option<&'a Path>,
}

impl Default for VerifyOptions<'_> {
    fn default() -> Self {
        Self {
            sandbox: None,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            timeout: Duration::from_secs(120),
            log_dir: None,
        }
    }
}

pub fn verify_candidate(
    candidate: &Candidate,
    vuln: &VulnerabilitySemantics,
    checkout: &RepoCheckout,
    relations: &[CallRelation],
    gateway: &Gateway,
    opts: &VerifyOptions<'_>,
) -> Result<(Finding, Usage), VerificationError> {
    let checks = static_check(candidate, vuln, checkout, relations)?;
    let (conclusion, mut usage) = classify(candidate, &checks, vuln, checkout, gateway)?;
    let static_conclusion = conclusion.kind;
    let wants_poc = matches!(
        conclusion.kind,
        ConclusionKind::Exploitable | ConclusionKind::ConditionallyExploitable
    );
    let (poc, u) = match opts.sandbox {
        Some(sandbox) if wants_poc => attempt_poc(
            candidate,
            &conclusion,
            sandbox,
            gateway,
            &PocSettings {
                max_attempts: opts.max_attempts,
                workspace: &checkout.root_path,
                timeout: opts.timeout,
                log_dir: opts.log_dir,
            },
        )?,
        _ => (None, Usage::default()),
    };
    usage.add(u);
    let conclusion = match &poc {
        Some(p) => apply_poc(conclusion, p),
        None => conclusion,
    };
    Ok((
        Finding {
            static_only: wants_poc && poc.is_none(),
            candidate: candidate.clone(),
            conclusion,
            static_conclusion,
            static_checks: checks,
            poc,
            reference_advisory: vuln.advisory_id.clone(),
        },
        usage,
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationRun {
    pub findings: Vec<Finding>,
    pub unverifiable: Vec<Unverifiable>,
    pub usage: Usage,
}

/// Verifies candidates one by one. Backend failures abort the run; a
/// candidate that cannot be checked is set aside as unverifiable.
pub fn verify_all(
    candidates: &[Candidate],
    vuln: &VulnerabilitySemantics,
    checkout: &RepoCheckout,
    relations: &[CallRelation],
    gateway: &Gateway,
    opts: &VerifyOptions<'_>,
) -> Result<VerificationRun, VerificationError> {
    let mut run = VerificationRun::default();
    for c in candidates {
        match verify_candidate(c, vuln, checkout, relations, gateway, opts) {
            Ok((f, u)) => {
                run.usage.add(u);
                run.findings.push(f);
            }
            Err(VerificationError::Unverifiable(reason)) => run.unverifiable.push(Unverifiable {
                candidate: c.clone(),
                reason,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(run)
}

const FINDINGS_KIND: &str = "findings";

pub fn findings_path(dir: &Path, advisory_id: &str, project: &str, commit: &str) -> PathBuf {
    dir.join(store::sanitize_key(advisory_id))
        .join(format!("{}.json", store::revision_key(project, commit)))
}

pub fn save_findings(path: &Path, run: &VerificationRun) -> Result<(), StoreError> {
    store::write_document(path, FINDINGS_KIND, run)
}

pub fn load_findings(path: &Path) -> Result<VerificationRun, StoreError> {
    store::read_document(path, FINDINGS_KIND)
}

#[cfg(test)]
mod tests;
