use std::collections::BTreeSet;

use serde_json::Value;

use super::stdlib::is_stdlib;
use super::{ModuleDescriptor, RepositorySummary};
use crate::code_facts::{list_files, module_name_for_path, CodeFactsError, CodeIndex, RepoCheckout};
use crate::llm::{Gateway, Message, Stage, Usage};

pub const SUMMARY_PROMPT_ID: &str = "repository-summary";

const README_CHARS: usize = 6000;

fn local_roots(index: &CodeIndex) -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for f in &index.files {
        let module = module_name_for_path(&f.file);
        let mut parts = module.split('.');
        if let Some(first) = parts.next() {
            out.insert(first.to_string());
            if first == "src" {
                if let Some(second) = parts.next() {
                    out.insert(second.to_string());
                }
            }
        }
    }
    out
}

/// Third-party import roots: everything imported that is neither in the
/// Python standard library nor a package of the checkout itself.
pub fn key_dependencies(index: &CodeIndex) -> BTreeSet<String> {
    let local = local_roots(index);
    index
        .files
        .iter()
        .flat_map(|f| f.imports.iter())
        .filter_map(|m| m.split('.').next())
        .filter(|r| !r.is_empty() && !is_stdlib(r) && !local.contains(*r))
        .map(str::to_string)
        .collect()
}

fn readme_text(checkout: &RepoCheckout) -> Result<Option<String>, CodeFactsError> {
    let mut candidates: Vec<String> = list_files(checkout, None)?
        .into_iter()
        .filter(|f| !f.contains('/'))
        .filter(|f| {
            let lower = f.to_ascii_lowercase();
            lower.starts_with("readme") || lower == "pyproject.toml" || lower == "setup.py"
        })
        .collect();
    // README first, packaging metadata after
    candidates.sort_by_key(|f| (!f.to_ascii_lowercase().starts_with("readme"), f.clone()));
    let mut text = String::new();
    for f in candidates {
        if let Ok(body) = checkout.read_to_string(&f) {
            text.push_str(&format!("### {f}\n{body}\n"));
        }
    }
    if text.trim().is_empty() {
        return Ok(None);
    }
    Ok(Some(text.chars().take(README_CHARS).collect()))
}

fn fallback(checkout: &RepoCheckout, modules: &[ModuleDescriptor], deps: BTreeSet<String>) -> RepositorySummary {
    let labels: Vec<&str> = modules.iter().map(|m| m.label.as_str()).collect();
    let mut categories: Vec<&str> = modules.iter().map(|m| m.role.coarse.as_str()).collect();
    categories.dedup();
    let description = if labels.is_empty() {
        format!("{} (no modules identified)", checkout.project_name)
    } else {
        format!("{} with modules: {}", checkout.project_name, labels.join(", "))
    };
    let application_scenario = if categories.is_empty() {
        "unknown".to_string()
    } else {
        categories.join(", ")
    };
    RepositorySummary {
        description,
        application_scenario,
        target_user: format!("users of {}", checkout.project_name),
        key_dependencies: deps,
        degraded: true,
    }
}

fn field(v: &Value, name: &str) -> Result<String, String> {
    v.get(name)
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .map(str::to_string)
        .ok_or(format!("`{name}` must be a non-empty string"))
}

/// Compact repository description. Falls back to a summary built from module
/// labels when there is no README or the backend fails.
pub fn summarize_repository(
    checkout: &RepoCheckout,
    modules: &[ModuleDescriptor],
    index: &CodeIndex,
    gateway: &Gateway,
) -> Result<(RepositorySummary, Usage), CodeFactsError> {
    let deps = key_dependencies(index);
    let Some(readme) = readme_text(checkout)? else {
        return Ok((fallback(checkout, modules, deps), Usage::default()));
    };
    let module_list: Vec<String> = modules.iter().map(|m| format!("- {}", m.id)).collect();
    let prompt = format!(
        "Summarize the repository {} for a security auditor. Reply with JSON: \
         {{\"description\": \"...\", \"application_scenario\": \"...\", \"target_user\": \"...\"}}\n\n\
         Modules:\n{}\n\nKey dependencies: {}\n\n{}",
        checkout.project_name,
        module_list.join("\n"),
        deps.iter().cloned().collect::<Vec<_>>().join(", "),
        readme
    );
    let messages = vec![
        Message::system("You describe software repositories concisely."),
        Message::user(prompt),
    ];
    let parsed = gateway.complete_structured(Stage::Profiling, SUMMARY_PROMPT_ID, &messages, |v| {
        Ok((field(v, "description")?, field(v, "application_scenario")?, field(v, "target_user")?))
    });
    match parsed {
        Ok(((description, application_scenario, target_user), usage)) => Ok((
            RepositorySummary {
                description,
                application_scenario,
                target_user,
                key_dependencies: deps,
                degraded: false,
            },
            usage,
        )),
        Err(e) => {
            tracing::warn!("repository summary failed: {e}");
            Ok((fallback(checkout, modules, deps), Usage::default()))
        }
    }
}
