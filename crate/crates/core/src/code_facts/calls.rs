use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::files::is_python_file;
use super::python::{module_name_for_path, parse_python, ParsedFile};
use super::{list_files, CodeFactsError, FunctionFact, FunctionKind, FunctionRef, RepoCheckout};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CallRelation {
    pub caller: FunctionRef,
    pub callee_name: String,
    pub callee_resolved: Option<FunctionRef>,
    pub call_site_line: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CallExtraction {
    pub relations: Vec<CallRelation>,
    pub diagnostics: Vec<String>,
}

/// Parsed view of every Python file in a checkout.
#[derive(Debug, Default)]
pub struct CodeIndex {
    pub files: Vec<ParsedFile>,
    modules: HashMap<String, usize>,
}

impl CodeIndex {
    pub fn build(checkout: &RepoCheckout) -> Result<(Self, Vec<String>), CodeFactsError> {
        let mut index = CodeIndex::default();
        let mut diagnostics = Vec::new();
        for rel in list_files(checkout, None)?.into_iter().filter(|f| is_python_file(f)) {
            let source = checkout.read_to_string(&rel)?;
            let parsed = parse_python(&rel, &source);
            if parsed.has_errors {
                diagnostics.push(format!("{rel}: syntax errors, call sites skipped"));
            }
            let module = module_name_for_path(&rel);
            let idx = index.files.len();
            if let Some(stripped) = module.strip_prefix("src.") {
                index.modules.entry(stripped.to_string()).or_insert(idx);
            }
            index.modules.insert(module, idx);
            index.files.push(parsed);
        }
        Ok((index, diagnostics))
    }

    pub fn file(&self, rel: &str) -> Option<&ParsedFile> {
        self.files.iter().find(|f| f.file == rel)
    }

    pub fn all_functions(&self) -> impl Iterator<Item = &FunctionFact> {
        self.files.iter().flat_map(|f| f.functions.iter())
    }

    fn lookup_qualified(&self, file_idx: usize, qualified: &str) -> Option<&FunctionFact> {
        self.files[file_idx]
            .functions
            .iter()
            .find(|f| f.qualified_name == qualified)
    }

    /// `pkg.mod.Class.method` → fact, splitting at the longest module prefix.
    fn resolve_dotted(&self, dotted: &str) -> Option<&FunctionFact> {
        let parts: Vec<&str> = dotted.split('.').collect();
        for split in (1..parts.len()).rev() {
            let module = parts[..split].join(".");
            if let Some(&idx) = self.modules.get(&module) {
                let rest = parts[split..].join(".");
                if let Some(f) = self.lookup_qualified(idx, &rest) {
                    return Some(f);
                }
            }
        }
        None
    }

    fn resolve(&self, file_idx: usize, enclosing: &FunctionFact, callee: &str) -> Option<FunctionRef> {
        let file = &self.files[file_idx];
        let parts: Vec<&str> = callee.split('.').collect();
        if parts.iter().any(|p| p.is_empty() || !is_identifier(p)) {
            return None;
        }

        if parts.len() == 2 && (parts[0] == "self" || parts[0] == "cls") {
            let mut prefix = enclosing.qualified_name.as_str();
            while let Some((head, _)) = prefix.rsplit_once('.') {
                if file
                    .functions
                    .iter()
                    .any(|f| f.qualified_name == head && f.kind == FunctionKind::Class)
                {
                    return self
                        .lookup_qualified(file_idx, &format!("{head}.{}", parts[1]))
                        .map(FunctionFact::to_ref);
                }
                prefix = head;
            }
            return None;
        }

        if let Some(f) = self.lookup_qualified(file_idx, callee) {
            return Some(f.to_ref());
        }

        for split in (1..=parts.len()).rev() {
            let local = parts[..split].join(".");
            if let Some(binding) = file.bindings.iter().rev().find(|b| b.local == local) {
                let mut target = binding.target.clone();
                if split < parts.len() {
                    target.push('.');
                    target.push_str(&parts[split..].join("."));
                }
                return self.resolve_dotted(&target).map(FunctionFact::to_ref);
            }
        }

        if parts.len() == 1 {
            let mut matches = self.files.iter().flat_map(|f| {
                f.functions
                    .iter()
                    .filter(|g| g.qualified_name == callee && g.kind != FunctionKind::Method)
            });
            if let (Some(only), None) = (matches.next(), matches.next()) {
                return Some(only.to_ref());
            }
        }
        None
    }

    pub fn call_relations(&self) -> Vec<CallRelation> {
        let mut out = Vec::new();
        for (idx, file) in self.files.iter().enumerate() {
            if file.has_errors {
                continue;
            }
            for call in &file.calls {
                let Some(enclosing) = call.enclosing.map(|i| &file.functions[i]) else {
                    continue;
                };
                out.push(CallRelation {
                    caller: enclosing.to_ref(),
                    callee_name: call.callee.clone(),
                    callee_resolved: self.resolve(idx, enclosing, &call.callee),
                    call_site_line: call.line,
                });
            }
        }
        out
    }

    /// Top-level functions and classes per file, in source order.
    pub fn top_level(&self) -> BTreeMap<&str, Vec<&FunctionFact>> {
        let mut out: BTreeMap<&str, Vec<&FunctionFact>> = BTreeMap::new();
        for file in &self.files {
            out.entry(file.file.as_str()).or_default().extend(
                file.functions
                    .iter()
                    .filter(|f| !f.qualified_name.contains('.')),
            );
        }
        out
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c == '_' || c.is_alphabetic())
        && chars.all(|c| c == '_' || c.is_alphanumeric())
}

/// Every syntactic call site inside an extracted function, method or class
/// body. Resolution is name-based and checkout-local.
pub fn extract_call_relations(checkout: &RepoCheckout) -> Result<CallExtraction, CodeFactsError> {
    let (index, diagnostics) = CodeIndex::build(checkout)?;
    Ok(CallExtraction {
        relations: index.call_relations(),
        diagnostics,
    })
}
