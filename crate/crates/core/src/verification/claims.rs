use regex::Regex;

use super::catalog::{guard_patterns, lookup_sink, sink_token, INPUT_INDICATORS};
use super::{ClaimKind, StaticCheck, VerificationError, Verified};
use crate::code_facts::{get_function_code, CallRelation, FunctionCode, FunctionSelector, RepoCheckout};
use crate::inspection::Candidate;
use crate::vuln_semantics::{ChainRole, VulnerabilitySemantics};

const EVIDENCE_CHARS: usize = 240;

fn excerpt(s: &str) -> String {
    let mut out: String = s.chars().take(EVIDENCE_CHARS).collect();
    if s.chars().count() > EVIDENCE_CHARS {
        out.push_str(" ...");
    }
    out
}

fn check(claim: ClaimKind, subject: impl Into<String>, verified: Verified, evidence: impl AsRef<str>) -> StaticCheck {
    StaticCheck {
        claim,
        subject: subject.into(),
        verified,
        evidence: excerpt(evidence.as_ref()),
    }
}

fn first_match<'t>(patterns: &[Regex], text: &'t str) -> Option<&'t str> {
    text.lines().find(|l| patterns.iter().any(|p| p.is_match(l)))
}

fn compile(patterns: &[&str]) -> Vec<Regex> {
    patterns.iter().map(|p| Regex::new(p).expect("catalog regex")).collect()
}

fn link(a: &FunctionCode, b: &FunctionCode, relations: &[CallRelation]) -> (Verified, String) {
    if a.fact == b.fact {
        return (Verified::Yes, "same function".into());
    }
    let b_name = b.fact.simple_name();
    let hit = relations.iter().find(|r| {
        r.caller.file == a.fact.file
            && r.caller.qualified_name == a.fact.qualified_name
            && (r.callee_resolved.as_ref() == Some(&b.fact.to_ref())
                || r.callee_name.rsplit('.').next() == Some(b_name))
    });
    if let Some(r) = hit {
        return (
            Verified::Yes,
            format!("{}:{} calls {}", r.caller.file, r.call_site_line, r.callee_name),
        );
    }
    let call = Regex::new(&format!(r"\b{}\s*\(", regex::escape(b_name))).expect("escaped");
    if let Some(line) = a.text.lines().find(|l| call.is_match(l)) {
        return (Verified::Yes, format!("{}: {}", a.fact.file, line.trim()));
    }
    (
        Verified::Unresolved,
        format!("no call from {} to {} found statically", a.fact.qualified_name, b.fact.qualified_name),
    )
}

/// Lines `start..=end` of a file, numbered, or the failed lookup.
fn span_text(checkout: &RepoCheckout, file: &str, start: usize, end: usize) -> Result<String, String> {
    if !checkout.file_exists(file) {
        return Err(format!("lookup failed: file {file} does not exist in the target checkout"));
    }
    let text = checkout
        .read_to_string(file)
        .map_err(|e| format!("lookup failed: {e}"))?;
    let total = text.lines().count();
    if start == 0 || start > end || end > total {
        return Err(format!("lookup failed: lines {start}-{end} outside {file} ({total} lines)"));
    }
    Ok(text
        .lines()
        .enumerate()
        .skip(start - 1)
        .take(end + 1 - start)
        .map(|(i, l)| format!("{:>5} | {l}", i + 1))
        .collect::<Vec<_>>()
        .join("\n"))
}

/// Decomposes a candidate into claims and checks each against the target
/// checkout. Failed lookups become `no` with the lookup as evidence.
pub fn static_check(
    candidate: &Candidate,
    vuln: &VulnerabilitySemantics,
    checkout: &RepoCheckout,
    relations: &[CallRelation],
) -> Result<Vec<StaticCheck>, VerificationError> {
    if !checkout.root_path.is_dir() {
        return Err(VerificationError::Unverifiable(format!(
            "checkout {} is not readable",
            checkout.root_path.display()
        )));
    }
    let mut out = Vec::new();
    let steps = &candidate.path_narrative;
    let mut resolved: Vec<Option<FunctionCode>> = Vec::new();
    for step in steps {
        let claim = match step.role {
            ChainRole::Source => ClaimKind::SourceExists,
            ChainRole::Propagation => ClaimKind::PropagationExists,
            ChainRole::Sink => ClaimKind::SinkExists,
        };
        let subject = format!("{}::{}", step.file, step.function);
        match get_function_code(checkout, &step.file, &FunctionSelector::Name(step.function.clone())) {
            Ok(code) => {
                let header = code.text.lines().next().unwrap_or_default().to_string();
                out.push(check(claim, subject, Verified::Yes, format!("{}: {}", code.fact.file, header.trim())));
                resolved.push(Some(code));
            }
            Err(e) => {
                out.push(check(claim, subject, Verified::No, format!("lookup failed: {e}")));
                resolved.push(None);
            }
        }
    }
    if !steps.iter().any(|s| s.role == ChainRole::Source) {
        out.push(check(
            ClaimKind::SourceExists,
            "source",
            Verified::No,
            "the path narrative names no source",
        ));
    }
    for (i, pair) in resolved.windows(2).enumerate() {
        if let [Some(a), Some(b)] = pair {
            let (verified, evidence) = link(a, b, relations);
            let subject = format!("{} -> {}", steps[i].function, steps[i + 1].function);
            out.push(check(ClaimKind::PropagationExists, subject, verified, evidence));
        }
    }

    let loc = &candidate.location;
    let loc_subject = format!("{}:{}-{} reaches {}", loc.file, loc.start_line, loc.end_line, candidate.sink);
    let span = span_text(checkout, &loc.file, loc.start_line, loc.end_line);
    match &span {
        Err(e) => out.push(check(ClaimKind::SinkExists, loc_subject, Verified::No, e)),
        Ok(text) => {
            let token = sink_token(&candidate.sink);
            let pattern = Regex::new(&format!(r"\b{}\b", regex::escape(token))).expect("escaped");
            match text.lines().find(|l| !token.is_empty() && pattern.is_match(l)) {
                Some(line) => out.push(check(ClaimKind::SinkExists, loc_subject, Verified::Yes, line.trim())),
                None => out.push(check(
                    ClaimKind::SinkExists,
                    loc_subject,
                    Verified::No,
                    format!("`{}` does not occur in {}:{}-{}", token, loc.file, loc.start_line, loc.end_line),
                )),
            }
        }
    }

    // protections are looked for along the resolved path and at the sink
    let category = lookup_sink(&candidate.sink)
        .or_else(|| lookup_sink(&vuln.chain.sink().function))
        .map(|s| s.category);
    let guards = compile(&guard_patterns(category));
    let mut scanned = 0;
    let mut guard_hit = None;
    for code in resolved.iter().flatten() {
        scanned += 1;
        if let Some(line) = first_match(&guards, &code.text) {
            guard_hit = Some(format!("{}: {}", code.fact.file, line.trim()));
            break;
        }
    }
    if guard_hit.is_none() {
        if let Ok(text) = &span {
            scanned += 1;
            guard_hit = first_match(&guards, text).map(|l| format!("{}: {}", loc.file, l.trim()));
        }
    }
    let guard = match (guard_hit, category, scanned) {
        (Some(hit), _, _) => check(ClaimKind::GuardMissing, "protection on the path", Verified::No, format!("guard found: {hit}")),
        (None, _, 0) => check(ClaimKind::GuardMissing, "protection on the path", Verified::Unresolved, "no path code could be resolved"),
        (None, Some(c), _) => check(
            ClaimKind::GuardMissing,
            "protection on the path",
            Verified::Yes,
            format!("no {c:?} guard pattern in {scanned} resolved path locations"),
        ),
        (None, None, _) => check(
            ClaimKind::GuardMissing,
            "protection on the path",
            Verified::Unresolved,
            format!("sink `{}` is not in the risky-sink catalog; guards unknown", candidate.sink),
        ),
    };
    out.push(guard);

    let source = steps.iter().zip(&resolved).find(|(s, _)| s.role == ChainRole::Source);
    let boundary = match source {
        Some((step, Some(code))) => {
            let indicators = compile(INPUT_INDICATORS);
            match first_match(&indicators, &code.text) {
                Some(line) => check(
                    ClaimKind::TrustBoundaryCrossed,
                    format!("{} takes external input", step.function),
                    Verified::Yes,
                    format!("{}: {}", code.fact.file, line.trim()),
                ),
                None => check(
                    ClaimKind::TrustBoundaryCrossed,
                    format!("{} takes external input", step.function),
                    Verified::Unresolved,
                    "no input-handling construct found in the source function",
                ),
            }
        }
        _ => check(
            ClaimKind::TrustBoundaryCrossed,
            "source takes external input",
            Verified::Unresolved,
            "source could not be resolved",
        ),
    };
    out.push(boundary);
    Ok(out)
}
