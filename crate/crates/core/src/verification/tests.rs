use std::collections::BTreeSet;
use std::sync::Arc;

use serde_json::json;

use super::*;
use crate::code_facts::{ingest_sarif_str, CodeIndex};
use crate::inspection::{CandidateLocation, Confidence, NarrativeStep};
use crate::llm::{Script, ScriptRule, ScriptedBackend, ScriptedReply, TokenLedger, Usage};
use crate::vuln_semantics::{parse_reference_str, ChainRole, VulnFeatureSet};

const APP: &str = r#"import os
from flask import request


def handle():
    name = request.args["name"]
    return convert(name)


def convert(name):
    return run_tool(name)


def run_tool(name):
    os.system("tool " + name)
"#;

const GUARDED: &str = r#"import os
import shlex
from flask import request


def handle():
    name = request.args["name"]
    return convert(name)


def convert(name):
    return run_tool(name)


def run_tool(name):
    os.system("tool " + shlex.quote(name))
"#;

fn repo(app: &str) -> (tempfile::TempDir, RepoCheckout, Vec<CallRelation>) {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("app.py"), app).unwrap();
    let co = RepoCheckout::new(dir.path(), "target", "c1").unwrap();
    let (index, _) = CodeIndex::build(&co).unwrap();
    let rel = index.call_relations();
    (dir, co, rel)
}

fn vuln() -> VulnerabilitySemantics {
    let chain = parse_reference_str(
        "format_version = 1\nadvisory_id = \"ADV-1\"\nproject = \"ref\"\naffected_commit = \"r1\"\n\
[[chain]]\nfile = \"ui.py\"\nfunction = \"on_load\"\nrole = \"source\"\n\
[[chain]]\nfile = \"loader.py\"\nfunction = \"torch.load\"\nrole = \"sink\"\n",
    )
    .unwrap();
    let features = VulnFeatureSet::from_json(&json!({
        "vuln_family": "unsafe deserialization",
        "trigger_condition": "user path reaches loader",
        "propagation_constraints": "unchanged",
        "exploitable_scenario": "crafted file",
        "missing_guard": "no weights_only",
        "trust_boundary": "web UI input",
    }))
    .unwrap();
    VulnerabilitySemantics {
        advisory_id: "ADV-1".into(),
        chain,
        features,
        affected_modules: BTreeSet::new(),
        reference_checkout: RepoCheckout::new(&std::env::temp_dir(), "ref", "r1").unwrap(),
        token_usage: Usage::default(),
        diagnostics: vec![],
    }
}

fn step(role: ChainRole, function: &str) -> NarrativeStep {
    NarrativeStep {
        role,
        file: "app.py".into(),
        function: function.into(),
        line: None,
        description: String::new(),
    }
}

fn candidate() -> Candidate {
    Candidate {
        id: "C1".into(),
        location: CandidateLocation {
            file: "app.py".into(),
            start_line: 15,
            end_line: 15,
            function: Some("run_tool".into()),
        },
        path_narrative: vec![
            step(ChainRole::Source, "handle"),
            step(ChainRole::Propagation, "convert"),
            step(ChainRole::Sink, "run_tool"),
        ],
        sink: "os.system".into(),
        static_evidence: vec![],
        confidence: Confidence::High,
        reference_advisory: "ADV-1".into(),
        reported_iteration: 1,
    }
}

fn gateway(rules: Vec<(&str, Vec<ScriptedReply>)>) -> (Gateway, Arc<ScriptedBackend>) {
    let backend = Arc::new(ScriptedBackend::new(Script::new(
        rules
            .into_iter()
            .map(|(id, replies)| ScriptRule {
                prompt_id: id.into(),
                when: Default::default(),
                replies,
                repeat_last: false,
            })
            .collect(),
    )));
    (Gateway::new(backend.clone(), Arc::new(TokenLedger::new())), backend)
}

fn exploitable() -> ScriptedReply {
    ScriptedReply::json(json!({"kind": "exploitable", "rationale": "input reaches os.system", "preconditions": []}))
}

fn poc() -> ScriptedReply {
    ScriptedReply::json(json!({"description": "call handle", "script": "import app"}))
}

fn by_claim(checks: &[StaticCheck], claim: ClaimKind) -> Vec<Verified> {
    checks.iter().filter(|c| c.claim == claim).map(|c| c.verified).collect()
}

#[test]
fn planted_variant_all_claims_hold() {
    let (_d, co, rel) = repo(APP);
    let checks = static_check(&candidate(), &vuln(), &co, &rel).unwrap();
    assert!(checks.iter().all(|c| c.verified == Verified::Yes), "{checks:#?}");
    for kind in [
        ClaimKind::SourceExists,
        ClaimKind::PropagationExists,
        ClaimKind::SinkExists,
        ClaimKind::GuardMissing,
        ClaimKind::TrustBoundaryCrossed,
    ] {
        assert!(!by_claim(&checks, kind).is_empty(), "{kind} missing");
    }
}

#[test]
fn exploitable_with_reached_sink() {
    let (_d, co, rel) = repo(APP);
    let (gw, _) = gateway(vec![(CLASSIFY_PROMPT_ID, vec![exploitable()]), (POC_PROMPT_ID, vec![poc()])]);
    let fake = FakeSandbox::new(vec![FakeSandbox::reached()]);
    let opts = VerifyOptions {
        sandbox: Some(&fake),
        ..Default::default()
    };
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &opts).unwrap();
    assert_eq!(f.conclusion.kind, ConclusionKind::Exploitable);
    assert_eq!(f.poc.as_ref().unwrap().attempts.len(), 1);
    assert!(!f.static_only);
    assert_eq!(fake.scripts(), vec!["import app".to_string()]);
}

#[test]
fn missing_dependency_then_fix() {
    let (_d, co, rel) = repo(APP);
    let (gw, backend) = gateway(vec![
        (CLASSIFY_PROMPT_ID, vec![exploitable()]),
        (POC_PROMPT_ID, vec![poc(), poc(), poc()]),
    ]);
    let fake = FakeSandbox::new(vec![
        SandboxRun {
            exit_code: Some(1),
            log: "ModuleNotFoundError: No module named 'flask'".into(),
        },
        FakeSandbox::reached(),
    ]);
    let opts = VerifyOptions {
        sandbox: Some(&fake),
        ..Default::default()
    };
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &opts).unwrap();
    let outcomes: Vec<PocOutcome> = f.poc.unwrap().attempts.iter().map(|a| a.outcome).collect();
    assert_eq!(outcomes, vec![PocOutcome::Error, PocOutcome::ReachedSink]);
    let second = backend
        .requests()
        .into_iter()
        .filter(|r| r.prompt_id == POC_PROMPT_ID)
        .nth(1)
        .unwrap();
    assert!(second.messages[0].content.contains("No module named 'flask'"));
}

#[test]
fn blocked_everywhere_downgrades() {
    let (_d, co, rel) = repo(APP);
    let (gw, _) = gateway(vec![(CLASSIFY_PROMPT_ID, vec![exploitable()]), (POC_PROMPT_ID, vec![poc(), poc(), poc()])]);
    let blocked = SandboxRun {
        exit_code: Some(0),
        log: format!("{BLOCKED_MARKER} rejected"),
    };
    let fake = FakeSandbox::new(vec![blocked.clone(), blocked.clone(), blocked]);
    let opts = VerifyOptions {
        sandbox: Some(&fake),
        ..Default::default()
    };
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &opts).unwrap();
    assert_eq!(f.poc.as_ref().unwrap().attempts.len(), 3);
    assert_eq!(f.conclusion.kind, ConclusionKind::NonExploitable);
    assert_eq!(f.static_conclusion, ConclusionKind::Exploitable);
}

#[test]
fn guard_on_path_is_non_exploitable_without_backend() {
    let (_d, co, rel) = repo(GUARDED);
    let mut c = candidate();
    c.location.start_line = 16;
    c.location.end_line = 16;
    let (gw, backend) = gateway(vec![]);
    let (f, _) = verify_candidate(&c, &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    assert_eq!(by_claim(&f.static_checks, ClaimKind::GuardMissing), vec![Verified::No]);
    assert_eq!(f.conclusion.kind, ConclusionKind::NonExploitable);
    assert!(backend.requests().is_empty());
}

#[test]
fn hallucinated_file() {
    let (_d, co, rel) = repo(APP);
    let mut c = candidate();
    c.location.file = "ghost.py".into();
    c.path_narrative[0].file = "ghost.py".into();
    let (gw, _) = gateway(vec![]);
    let (f, _) = verify_candidate(&c, &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    assert_eq!(f.conclusion.kind, ConclusionKind::NonExploitable);
    assert_eq!(by_claim(&f.static_checks, ClaimKind::SourceExists), vec![Verified::No]);
    assert!(f
        .static_checks
        .iter()
        .any(|c| c.verified == Verified::No && c.evidence.starts_with("lookup failed")));
}

#[test]
fn unresolved_boundary_caps() {
    let app = APP.replace("request.args[\"name\"]", "compute()");
    let (_d, co, rel) = repo(&app);
    let (gw, _) = gateway(vec![(CLASSIFY_PROMPT_ID, vec![exploitable()])]);
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    assert_eq!(f.conclusion.kind, ConclusionKind::ConditionallyExploitable);
    assert!(!f.conclusion.preconditions.is_empty());
    assert!(f.static_only);
}

#[test]
fn missing_propagation_with_risky_sink_is_library_risk() {
    let (_d, co, rel) = repo(APP);
    let mut c = candidate();
    c.path_narrative[1].function = "nonexistent_helper".into();
    let (gw, _) = gateway(vec![]);
    let (f, _) = verify_candidate(&c, &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    assert_eq!(f.conclusion.kind, ConclusionKind::LibraryRisk);
}

#[test]
fn unreadable_checkout_is_unverifiable() {
    let (d, co, rel) = repo(APP);
    drop(d);
    let (gw, _) = gateway(vec![]);
    let run = verify_all(&[candidate()], &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    assert!(run.findings.is_empty());
    assert_eq!(run.unverifiable.len(), 1);
}

#[test]
fn sandbox_unavailable_is_static_only() {
    let (_d, co, rel) = repo(APP);
    let (gw, _) = gateway(vec![(CLASSIFY_PROMPT_ID, vec![exploitable()])]);
    let fake = FakeSandbox::unavailable();
    let opts = VerifyOptions {
        sandbox: Some(&fake),
        ..Default::default()
    };
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &opts).unwrap();
    assert!(f.poc.is_none() && f.static_only);
    assert_eq!(f.conclusion.kind, ConclusionKind::Exploitable);
    let r = assemble_report("ADV-1", "target", "c1", vec![f], vec![], None, &gw.ledger().snapshot());
    assert!(render_markdown(&r).contains("STATIC-ONLY"));
}

#[test]
fn conclusion_invariants() {
    assert!(Conclusion::new(ConclusionKind::ConditionallyExploitable, "r".into(), vec![]).is_err());
    assert!(Conclusion::new(ConclusionKind::Exploitable, "r".into(), vec!["p".into()]).is_err());
    assert!(parse_conclusion(&json!({"kind": "library_risk", "rationale": "x"})).is_err());
    let c = parse_conclusion(&json!({"kind": "conditionally_exploitable", "rationale": "x", "preconditions": ["debug mode"]}))
        .unwrap();
    assert_eq!(c.preconditions, vec!["debug mode".to_string()]);
}

#[test]
fn sarif_export_round_trips() {
    let (_d, co, rel) = repo(APP);
    let (gw, _) = gateway(vec![(CLASSIFY_PROMPT_ID, vec![exploitable()])]);
    let (f, _) = verify_candidate(&candidate(), &vuln(), &co, &rel, &gw, &VerifyOptions::default()).unwrap();
    let r = assemble_report("ADV-1", "target", "c1", vec![f], vec![], None, &gw.ledger().snapshot());
    let sarif = to_sarif(&[r.clone()]);
    let rows = ingest_sarif_str(&sarif.to_string(), None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!((rows[0].file.as_str(), rows[0].line, rows[0].rule_id.as_str()), ("app.py", 15, "ADV-1"));
    let dir = tempfile::tempdir().unwrap();
    let p = save_report(dir.path(), &r).unwrap();
    assert_eq!(load_report(&p).unwrap(), r);
    assert!(p.with_extension("md").exists());
}
