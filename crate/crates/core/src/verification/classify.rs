use serde_json::Value;

use super::catalog::lookup_sink;
use super::{ClaimKind, Conclusion, ConclusionKind, StaticCheck, VerificationError, Verified};
use crate::code_facts::{get_imports, RepoCheckout};
use crate::inspection::Candidate;
use crate::llm::{Gateway, Message, Stage, Usage};
use crate::vuln_semantics::VulnerabilitySemantics;

pub const CLASSIFY_PROMPT_ID: &str = "verification-classify";

fn first_no<'a>(checks: &'a [StaticCheck], kinds: &[ClaimKind]) -> Option<&'a StaticCheck> {
    checks
        .iter()
        .find(|c| c.verified == Verified::No && kinds.contains(&c.claim))
}

fn forced(kind: ConclusionKind, why: &str, c: &StaticCheck) -> Conclusion {
    Conclusion {
        kind,
        rationale: format!("{why}: {} ({}): {}", c.claim, c.subject, c.evidence),
        preconditions: Vec::new(),
    }
}

/// Deterministic part of the decision. Returns a conclusion whenever some
/// claim is refuted; `None` leaves the choice to the backend.
pub fn gate(checks: &[StaticCheck], risky_dependency: bool) -> Option<Conclusion> {
    use ClaimKind::*;
    if let Some(c) = first_no(checks, &[SinkExists]) {
        return Some(forced(ConclusionKind::NonExploitable, "sink does not resolve in the target", c));
    }
    if let Some(c) = first_no(checks, &[SourceExists, TrustBoundaryCrossed]) {
        return Some(forced(ConclusionKind::NonExploitable, "no attacker-controlled source", c));
    }
    if let Some(c) = first_no(checks, &[GuardMissing]) {
        return Some(forced(ConclusionKind::NonExploitable, "blocked by an effective protection", c));
    }
    if let Some(c) = first_no(checks, &[PropagationExists]) {
        return Some(if risky_dependency {
            forced(ConclusionKind::LibraryRisk, "risky dependency present but no exposed path", c)
        } else {
            forced(ConclusionKind::NonExploitable, "sink not reachable", c)
        });
    }
    None
}

/// Unresolved claims become explicit preconditions and keep the conclusion
/// at or below conditionally exploitable.
pub fn cap(mut conclusion: Conclusion, checks: &[StaticCheck]) -> Conclusion {
    let unresolved: Vec<String> = checks
        .iter()
        .filter(|c| c.verified == Verified::Unresolved)
        .map(|c| format!("unresolved {} ({}): {}", c.claim, c.subject, c.evidence))
        .collect();
    if unresolved.is_empty() {
        return conclusion;
    }
    match conclusion.kind {
        ConclusionKind::Exploitable => {
            conclusion.kind = ConclusionKind::ConditionallyExploitable;
            conclusion.rationale = format!("{} (capped: unresolved claims remain)", conclusion.rationale);
            conclusion.preconditions = unresolved;
        }
        ConclusionKind::ConditionallyExploitable => {
            for u in unresolved {
                if !conclusion.preconditions.contains(&u) {
                    conclusion.preconditions.push(u);
                }
            }
        }
        _ => {}
    }
    conclusion
}

/// Gate, then backend choice, then cap.
pub fn decide<E>(
    checks: &[StaticCheck],
    risky_dependency: bool,
    backend: impl FnOnce() -> Result<Conclusion, E>,
) -> Result<Conclusion, E> {
    match gate(checks, risky_dependency) {
        Some(c) => Ok(c),
        None => Ok(cap(backend()?, checks)),
    }
}

/// The sink is cataloged and its package is imported where it is called.
pub fn risky_dependency(candidate: &Candidate, checkout: &RepoCheckout) -> bool {
    let Some(entry) = lookup_sink(&candidate.sink) else { return false };
    if entry.package == "builtins" {
        return true;
    }
    get_imports(checkout, &candidate.location.file)
        .map(|list| list.modules.iter().any(|m| m.split('.').next() == Some(entry.package)))
        .unwrap_or(false)
}

pub fn parse_conclusion(v: &Value) -> Result<Conclusion, String> {
    let kind = match v.get("kind").and_then(Value::as_str) {
        Some("exploitable") => ConclusionKind::Exploitable,
        Some("conditionally_exploitable") => ConclusionKind::ConditionallyExploitable,
        Some("non_exploitable") => ConclusionKind::NonExploitable,
        Some(other) => return Err(format!("`kind` must be exploitable, conditionally_exploitable or non_exploitable, got `{other}`")),
        None => return Err("missing `kind`".into()),
    };
    let rationale = v
        .get("rationale")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing `rationale`")?
        .to_string();
    let preconditions: Vec<String> = match v.get("preconditions") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string).ok_or("preconditions must be strings"))
            .collect::<Result<_, _>>()?,
        Some(_) => return Err("`preconditions` must be an array".into()),
    };
    Conclusion::new(kind, rationale, preconditions)
}

fn prompt(candidate: &Candidate, checks: &[StaticCheck], vuln: &VulnerabilitySemantics) -> String {
    let mut s = format!(
        "Reference vulnerability {}:\n{}\n\nCandidate {} at {}:{}-{} reaching `{}`.\nPath:\n",
        vuln.advisory_id,
        vuln.features.render(),
        candidate.id,
        candidate.location.file,
        candidate.location.start_line,
        candidate.location.end_line,
        candidate.sink
    );
    for st in &candidate.path_narrative {
        s.push_str(&format!("- [{}] {}::{} {}\n", st.role, st.file, st.function, st.description));
    }
    s.push_str("\nStatic claims checked against the target:\n");
    for c in checks {
        s.push_str(&format!("- {} | {} | {:?} | {}\n", c.claim, c.subject, c.verified, c.evidence));
    }
    s.push_str(
        "\nDecide whether the candidate is exploitable as in the reference, exploitable only under explicit input \
preconditions, or not exploitable. Reply with JSON {\"kind\": \"exploitable\" | \"conditionally_exploitable\" | \
\"non_exploitable\", \"rationale\": <text>, \"preconditions\": [<text>]}. List preconditions only for \
conditionally_exploitable.",
    );
    s
}

pub fn classify(
    candidate: &Candidate,
    checks: &[StaticCheck],
    vuln: &VulnerabilitySemantics,
    checkout: &RepoCheckout,
    gateway: &Gateway,
) -> Result<(Conclusion, Usage), VerificationError> {
    let mut usage = Usage::default();
    let conclusion = decide(checks, risky_dependency(candidate, checkout), || {
        let (c, u) = gateway.complete_structured(
            Stage::Verification,
            CLASSIFY_PROMPT_ID,
            &[Message::user(prompt(candidate, checks, vuln))],
            parse_conclusion,
        )?;
        usage = u;
        Ok::<_, VerificationError>(c)
    })?;
    Ok((conclusion, usage))
}
