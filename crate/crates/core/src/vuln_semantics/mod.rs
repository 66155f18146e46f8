//! Reference vulnerability semantics: the witness chain, the six transferable
//! features and the affected module roles.

mod reference;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::code_facts::{get_function_code, FunctionSelector, RepoCheckout};
use crate::llm::{Gateway, GatewayError, Message, Stage, Usage};
use crate::repo_semantics::RepositorySemantics;
use crate::store::{self, StoreError};
use crate::taxonomy::Role;

pub use reference::{
    check_chain, parse_reference, parse_reference_str, ChainEntry, ChainRole, WitnessChain,
    REFERENCE_FORMAT_VERSION,
};

pub const FEATURES_PROMPT_ID: &str = "vuln-features";

const SNIPPET_LINES: usize = 60;

#[derive(Debug, Error)]
pub enum VulnError {
    #[error("invalid reference document: {0}")]
    InvalidReference(String),
    #[error("feature extraction failed: {reason}; raw backend output follows:\n{raw}")]
    Features { reason: String, raw: String },
    #[error("no affected modules recovered: {0}")]
    NoAffectedModules(String),
    #[error(transparent)]
    Backend(GatewayError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnFeatureSet {
    pub vuln_family: String,
    pub trigger_condition: String,
    pub propagation_constraints: String,
    pub exploitable_scenario: String,
    pub missing_guard: String,
    pub trust_boundary: String,
}

pub const FEATURE_FIELDS: [&str; 6] = [
    "vuln_family",
    "trigger_condition",
    "propagation_constraints",
    "exploitable_scenario",
    "missing_guard",
    "trust_boundary",
];

impl VulnFeatureSet {
    /// Exactly the six fields, each a non-empty string.
    pub fn from_json(v: &Value) -> Result<Self, String> {
        let obj = v.as_object().ok_or("expected a JSON object")?;
        let extra: Vec<&String> = obj.keys().filter(|k| !FEATURE_FIELDS.contains(&k.as_str())).collect();
        if !extra.is_empty() {
            return Err(format!("unexpected fields {extra:?}"));
        }
        let get = |name: &str| -> Result<String, String> {
            match obj.get(name).and_then(Value::as_str) {
                Some(s) if !s.trim().is_empty() => Ok(s.trim().to_string()),
                Some(_) => Err(format!("`{name}` is empty")),
                None => Err(format!("`{name}` is missing or not a string")),
            }
        };
        Ok(Self {
            vuln_family: get("vuln_family")?,
            trigger_condition: get("trigger_condition")?,
            propagation_constraints: get("propagation_constraints")?,
            exploitable_scenario: get("exploitable_scenario")?,
            missing_guard: get("missing_guard")?,
            trust_boundary: get("trust_boundary")?,
        })
    }

    pub fn render(&self) -> String {
        format!(
            "vuln_family: {}\ntrigger_condition: {}\npropagation_constraints: {}\nexploitable_scenario: {}\nmissing_guard: {}\ntrust_boundary: {}",
            self.vuln_family,
            self.trigger_condition,
            self.propagation_constraints,
            self.exploitable_scenario,
            self.missing_guard,
            self.trust_boundary
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VulnerabilitySemantics {
    pub advisory_id: String,
    pub chain: WitnessChain,
    pub features: VulnFeatureSet,
    pub affected_modules: BTreeSet<Role>,
    pub reference_checkout: RepoCheckout,
    pub token_usage: Usage,
    pub diagnostics: Vec<String>,
}

fn chain_snippets(chain: &WitnessChain, checkout: &RepoCheckout) -> String {
    let mut out = String::new();
    for (i, e) in chain.entries.iter().enumerate() {
        let body = match get_function_code(checkout, &e.file, &FunctionSelector::Name(e.function.clone())) {
            Ok(code) => code.text.lines().take(SNIPPET_LINES).collect::<Vec<_>>().join("\n"),
            Err(err) => format!("(unavailable: {err})"),
        };
        out.push_str(&format!("\n### {}. {} {}::{}\n```\n{}\n```\n", i + 1, e.role, e.file, e.function, body));
    }
    out
}

/// One backend call producing the six-field feature set; one corrective retry.
pub fn extract_features(
    chain: &WitnessChain,
    reference: &RepositorySemantics,
    gateway: &Gateway,
) -> Result<(VulnFeatureSet, Usage), VulnError> {
    let payload = chain.payload_note.as_deref().unwrap_or("(none disclosed)");
    let prompt = format!(
        "Reference vulnerability {} in {}@{}.\n\nWitness chain, source to sink:\n{}\n\nPayload: {}\n\n\
         Code along the chain:{}\n\n\
         Describe the transferable semantics of this vulnerability. Reply with exactly one JSON object \
         with the string fields {}. Walk the chain from source to sink.",
        chain.advisory_id,
        chain.project,
        chain.affected_commit,
        chain.render(),
        payload,
        chain_snippets(chain, &reference.checkout),
        FEATURE_FIELDS.join(", ")
    );
    let messages = vec![
        Message::system("You are a security analyst abstracting a known vulnerability into reusable features."),
        Message::user(prompt),
    ];
    gateway
        .complete_structured(Stage::VulnExtraction, FEATURES_PROMPT_ID, &messages, VulnFeatureSet::from_json)
        .map_err(|e| match e {
            GatewayError::Schema { reason, raw, .. } => VulnError::Features { reason, raw },
            other => VulnError::Backend(other),
        })
}

/// Roles of every reference module containing a chain file.
pub fn recover_affected_modules(
    chain: &WitnessChain,
    reference: &RepositorySemantics,
) -> Result<(BTreeSet<Role>, Vec<String>), VulnError> {
    let mut roles = BTreeSet::new();
    let mut diagnostics = Vec::new();
    for file in chain.files() {
        let owners: Vec<&Role> = reference
            .modules
            .iter()
            .filter(|m| m.files.contains(file))
            .map(|m| &m.role)
            .collect();
        if owners.is_empty() {
            diagnostics.push(format!("chain file {file} is not assigned to any reference module"));
        }
        roles.extend(owners.into_iter().cloned());
    }
    if roles.is_empty() {
        return Err(VulnError::NoAffectedModules(diagnostics.join("; ")));
    }
    Ok((roles, diagnostics))
}

/// Full Σ_V construction for one reference.
pub fn build_vuln_semantics(
    mut chain: WitnessChain,
    reference: &RepositorySemantics,
    gateway: &Gateway,
) -> Result<VulnerabilitySemantics, VulnError> {
    let mut diagnostics = check_chain(&mut chain, &reference.checkout);
    let (affected_modules, recovery) = recover_affected_modules(&chain, reference)?;
    diagnostics.extend(recovery);
    let (features, token_usage) = extract_features(&chain, reference, gateway)?;
    Ok(VulnerabilitySemantics {
        advisory_id: chain.advisory_id.clone(),
        chain,
        features,
        affected_modules,
        reference_checkout: reference.checkout.clone(),
        token_usage,
        diagnostics,
    })
}

const VULN_KIND: &str = "vulnerability-semantics";

pub fn vuln_path(store_dir: &Path, advisory_id: &str) -> PathBuf {
    store_dir.join(format!("{}.json", store::sanitize_key(advisory_id)))
}

pub fn persist_vuln(sem: &VulnerabilitySemantics, store_dir: &Path) -> Result<PathBuf, StoreError> {
    let path = vuln_path(store_dir, &sem.advisory_id);
    store::write_document(&path, VULN_KIND, sem)?;
    Ok(path)
}

pub fn load_vuln(store_dir: &Path, advisory_id: &str) -> Result<VulnerabilitySemantics, StoreError> {
    store::read_document(&vuln_path(store_dir, advisory_id), VULN_KIND)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Script, ScriptRule, ScriptedBackend, ScriptedReply, TokenLedger};
    use crate::repo_semantics::{ModuleCallGraph, ModuleDescriptor, ModuleId, RepositorySummary};
    use serde_json::json;
    use std::sync::Arc;

    fn module(role: Role, files: &[&str]) -> ModuleDescriptor {
        ModuleDescriptor {
            id: ModuleId::for_role(&role),
            label: role.second.clone(),
            role,
            files: files.iter().map(|s| s.to_string()).collect(),
            funcs: vec![],
            deps: Default::default(),
            feature_notes: String::new(),
        }
    }

    fn reference(dir: &Path, modules: Vec<ModuleDescriptor>) -> RepositorySemantics {
        RepositorySemantics {
            checkout: RepoCheckout::new(dir, "ref", "c1").unwrap(),
            summary: RepositorySummary {
                description: "d".into(),
                application_scenario: "a".into(),
                target_user: "u".into(),
                key_dependencies: Default::default(),
                degraded: false,
            },
            modules,
            unassigned: vec![],
            assignments: vec![],
            graph: ModuleCallGraph::default(),
            token_usage: Usage::default(),
            diagnostics: vec![],
        }
    }

    fn chain(files: &[&str]) -> WitnessChain {
        let n = files.len();
        WitnessChain {
            advisory_id: "ADV-1".into(),
            project: "ref".into(),
            affected_commit: "c1".into(),
            entries: files
                .iter()
                .enumerate()
                .map(|(i, f)| ChainEntry {
                    file: f.to_string(),
                    function: format!("fn{i}"),
                    role: match i {
                        0 => ChainRole::Source,
                        i if i == n - 1 => ChainRole::Sink,
                        _ => ChainRole::Propagation,
                    },
                    note: String::new(),
                    missing: false,
                })
                .collect(),
            payload_note: None,
        }
    }

    fn web_ui() -> Role {
        Role::new("UI and Workflows", "Web UI")
    }

    fn loading() -> Role {
        Role::new("Model Assets and Loading", "Loading Configuration")
    }

    // Brute-force {role(m) : files(m) ∩ chain_files ≠ ∅}.
    fn oracle(c: &WitnessChain, r: &RepositorySemantics) -> BTreeSet<Role> {
        r.modules
            .iter()
            .filter(|m| c.entries.iter().any(|e| m.files.contains(&e.file)))
            .map(|m| m.role.clone())
            .collect()
    }

    #[test]
    fn recovers_ui_and_loading() {
        let dir = tempfile::tempdir().unwrap();
        let r = reference(
            dir.path(),
            vec![
                module(web_ui(), &["webui/page.py"]),
                module(loading(), &["model/loader.py"]),
                module(Role::new("Platform Systems", "Build Packaging"), &["setup.py"]),
            ],
        );
        let c = chain(&["webui/page.py", "model/loader.py", "model/loader.py"]);
        let (roles, diags) = recover_affected_modules(&c, &r).unwrap();
        assert_eq!(roles, BTreeSet::from([web_ui(), loading()]));
        assert_eq!(roles, oracle(&c, &r));
        assert!(diags.is_empty());
    }

    #[test]
    fn single_module_and_unassigned() {
        let dir = tempfile::tempdir().unwrap();
        let r = reference(dir.path(), vec![module(web_ui(), &["a.py", "b.py"])]);
        let (roles, _) = recover_affected_modules(&chain(&["a.py", "b.py"]), &r).unwrap();
        assert_eq!(roles, BTreeSet::from([web_ui()]));
        let (roles, diags) = recover_affected_modules(&chain(&["a.py", "zzz.py"]), &r).unwrap();
        assert_eq!(roles.len(), 1);
        assert_eq!(diags.len(), 1);
        assert!(matches!(
            recover_affected_modules(&chain(&["x.py", "y.py"]), &r),
            Err(VulnError::NoAffectedModules(_))
        ));
    }

    fn gateway(replies: Vec<ScriptedReply>) -> Gateway {
        let backend = ScriptedBackend::new(Script::new(vec![ScriptRule {
            prompt_id: FEATURES_PROMPT_ID.into(),
            when: Default::default(),
            replies,
            repeat_last: false,
        }]));
        Gateway::new(Arc::new(backend), Arc::new(TokenLedger::new()))
    }

    fn features_json() -> Value {
        json!({
            "vuln_family": "deserialization",
            "trigger_condition": "user-selected adapter path reaches torch.load",
            "propagation_constraints": "path passes through the UI handler unchanged",
            "exploitable_scenario": "attacker supplies a crafted checkpoint",
            "missing_guard": "no safe-load check (weights_only=True) before torch.load",
            "trust_boundary": "web UI form input"
        })
    }

    #[test]
    fn extraction_and_schema_guard() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.py"), "def fn0(p):\n    return fn1(p)\n").unwrap();
        let r = reference(dir.path(), vec![module(web_ui(), &["a.py"])]);
        let c = chain(&["a.py", "a.py"]);
        let (f, usage) = extract_features(&c, &r, &gateway(vec![ScriptedReply::json(features_json())])).unwrap();
        assert_eq!(f.vuln_family, "deserialization");
        assert!(f.missing_guard.contains("safe-load"));
        assert!(usage.total() > 0);

        let mut five = features_json();
        five.as_object_mut().unwrap().remove("trust_boundary");
        let err = extract_features(
            &c,
            &r,
            &gateway(vec![ScriptedReply::json(five.clone()), ScriptedReply::json(five)]),
        )
        .unwrap_err();
        match err {
            VulnError::Features { raw, .. } => assert!(raw.contains("missing_guard")),
            other => panic!("{other:?}"),
        }

        let mut five = features_json();
        five.as_object_mut().unwrap().remove("trust_boundary");
        let (f, _) = extract_features(
            &c,
            &r,
            &gateway(vec![ScriptedReply::json(five), ScriptedReply::json(features_json())]),
        )
        .unwrap();
        assert_eq!(f.trust_boundary, "web UI form input");
    }

    #[test]
    fn prompt_keeps_chain_order() {
        let dir = tempfile::tempdir().unwrap();
        let r = reference(dir.path(), vec![module(web_ui(), &["a.py", "b.py", "c.py"])]);
        let c = chain(&["a.py", "b.py", "c.py"]);
        let backend = Arc::new(ScriptedBackend::new(Script::new(vec![ScriptRule {
            prompt_id: FEATURES_PROMPT_ID.into(),
            when: Default::default(),
            replies: vec![ScriptedReply::json(features_json())],
            repeat_last: false,
        }])));
        let gw = Gateway::new(backend.clone(), Arc::new(TokenLedger::new()));
        extract_features(&c, &r, &gw).unwrap();
        let prompt = &backend.requests()[0].messages[1].content;
        let pos: Vec<usize> = ["a.py::fn0", "b.py::fn1", "c.py::fn2"]
            .iter()
            .map(|s| prompt.find(s).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn persistence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let r = reference(dir.path(), vec![module(web_ui(), &["a.py"])]);
        let sem = build_vuln_semantics(chain(&["a.py", "a.py"]), &r, &gateway(vec![ScriptedReply::json(features_json())]))
            .unwrap();
        let store_dir = dir.path().join("vulns");
        persist_vuln(&sem, &store_dir).unwrap();
        assert_eq!(load_vuln(&store_dir, "ADV-1").unwrap(), sem);
        assert!(matches!(load_vuln(&store_dir, "nope"), Err(StoreError::NotFound(_))));
    }
}
