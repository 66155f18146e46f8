use std::path::PathBuf;
use std::sync::Arc;

use refscan_core::code_facts::{CodeIndex, RepoCheckout};
use refscan_core::inspection::{
    inspect_target, prioritize, ExistingMemory, InspectionConfig, Priority, SharedMemory, TurnEnd,
};
use refscan_core::llm::{Gateway, HashingEmbedder, ScriptedBackend, Stage, TokenLedger};
use refscan_core::repo_semantics::{profile_repository, RepositorySemantics};
use refscan_core::similarity::{select_targets, DEFAULT_TAU_M};
use refscan_core::taxonomy::RoleTaxonomy;
use refscan_core::verification::{verify_all, ConclusionKind, FakeSandbox, VerifyOptions};
use refscan_core::vuln_semantics::{build_vuln_semantics, parse_reference};

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn gateway(ledger: &Arc<TokenLedger>) -> Gateway {
    let backend = ScriptedBackend::load(&fixtures().join("scripts/pipeline.json")).unwrap();
    Gateway::new(Arc::new(backend), ledger.clone())
}

fn profile(rel: &str, project: &str, commit: &str, ledger: &Arc<TokenLedger>) -> RepositorySemantics {
    let co = RepoCheckout::new(&fixtures().join(rel), project, commit).unwrap();
    profile_repository(&co, &RoleTaxonomy::builtin(), &gateway(ledger)).unwrap()
}

#[test]
fn planted_variant_end_to_end() {
    let ledger = Arc::new(TokenLedger::new());
    let reference = profile("reference/imgstudio", "imgstudio", "v1", &ledger);
    assert!(reference.unassigned.is_empty(), "{:?}", reference.unassigned);
    let target = profile("targets/renderhub", "renderhub", "v2", &ledger);
    let twin = profile("targets/renderhub-patched", "renderhub", "v2-patched", &ledger);
    let taxonomy = RoleTaxonomy::builtin();
    for m in reference.modules.iter().chain(&target.modules) {
        assert!(taxonomy.contains(&m.role));
    }

    let chain = parse_reference(&fixtures().join("advisories/IMGSTUDIO-2024-001.toml")).unwrap();
    let vuln = build_vuln_semantics(chain, &reference, &gateway(&ledger)).unwrap();
    assert_eq!(vuln.affected_modules.len(), 3);

    let embedder = HashingEmbedder::default();
    let selection = select_targets(&reference, &[reference.clone(), target.clone(), twin.clone()], &embedder).unwrap();
    let scan: Vec<(&str, &str)> = selection
        .scan_set()
        .iter()
        .map(|t| (t.project.as_str(), t.commit.as_str()))
        .collect();
    assert!(scan.contains(&("renderhub", "v2")));

    let state = tempfile::tempdir().unwrap();
    let shared = SharedMemory::new(&state.path().join("shared"));
    let mut kinds = Vec::new();
    for t in [&target, &twin] {
        let priorities = prioritize(t, &vuln.affected_modules, &embedder, DEFAULT_TAU_M);
        assert!(priorities.p1.iter().any(|m| m.as_str() == "UI and Workflows :: Web UI"));
        let gw = gateway(&ledger);
        let config = InspectionConfig {
            existing: ExistingMemory::Fresh,
            ..Default::default()
        };
        let out = inspect_target(t, &vuln, priorities, &gw, &shared, &state.path().join("memory"), None, &config).unwrap();
        assert!(out.aborted.is_none());
        assert_eq!(out.memory.iteration_count, 1);
        assert_eq!(out.memory.iterations[0].ended_by, TurnEnd::Finished);
        assert!(out.memory.stop_policy_satisfied());
        assert_eq!(out.memory.priority_of_file("tools/runner.py"), Some(Priority::P2));
        assert_eq!(out.memory.candidates.len(), 1);
        let c = &out.memory.candidates[0];
        assert_eq!((c.location.file.as_str(), c.location.start_line), ("tools/runner.py", 9));

        let (index, _) = CodeIndex::build(&t.checkout).unwrap();
        let sandbox = FakeSandbox::load(&fixtures().join("sandbox/reached.json")).unwrap();
        let opts = VerifyOptions {
            sandbox: Some(&sandbox),
            ..Default::default()
        };
        let run = verify_all(&out.memory.candidates, &vuln, &t.checkout, &index.call_relations(), &gw, &opts).unwrap();
        kinds.push(run.findings[0].conclusion.kind);
    }
    assert_eq!(kinds, vec![ConclusionKind::Exploitable, ConclusionKind::NonExploitable]);
    assert_eq!(shared.read("renderhub", None).unwrap().len(), 2);

    let snap = ledger.snapshot();
    assert!(snap.is_conserved());
    for s in Stage::ALL {
        assert!(snap.stage(s).total() > 0, "{s} recorded nothing");
    }
}
