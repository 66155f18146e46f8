use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{ModuleDescriptor, ModuleId};
use crate::code_facts::CallRelation;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModuleEdge {
    pub from: ModuleId,
    pub to: ModuleId,
    /// Number of resolved call sites projected onto this edge.
    pub count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModuleCallGraph {
    pub nodes: BTreeSet<ModuleId>,
    pub edges: Vec<ModuleEdge>,
}

impl ModuleCallGraph {
    pub fn callees(&self, id: &ModuleId) -> BTreeSet<ModuleId> {
        self.edges.iter().filter(|e| &e.from == id).map(|e| e.to.clone()).collect()
    }

    pub fn callers(&self, id: &ModuleId) -> BTreeSet<ModuleId> {
        self.edges.iter().filter(|e| &e.to == id).map(|e| e.from.clone()).collect()
    }

    /// Direct callers and callees.
    pub fn neighbors(&self, id: &ModuleId) -> BTreeSet<ModuleId> {
        let mut out = self.callees(id);
        out.extend(self.callers(id));
        out
    }
}

/// Projects resolved function-level calls onto modules. A file in several
/// modules contributes to each; intra-module calls are dropped.
pub fn build_module_graph(modules: &[ModuleDescriptor], relations: &[CallRelation]) -> ModuleCallGraph {
    let mut by_file: BTreeMap<&str, Vec<&ModuleId>> = BTreeMap::new();
    for m in modules {
        for f in &m.files {
            by_file.entry(f.as_str()).or_default().push(&m.id);
        }
    }
    let mut counts: BTreeMap<(ModuleId, ModuleId), usize> = BTreeMap::new();
    for rel in relations {
        let Some(callee) = &rel.callee_resolved else { continue };
        let (Some(from), Some(to)) = (by_file.get(rel.caller.file.as_str()), by_file.get(callee.file.as_str())) else {
            continue;
        };
        for a in from {
            for b in to {
                if a != b {
                    *counts.entry(((*a).clone(), (*b).clone())).or_default() += 1;
                }
            }
        }
    }
    ModuleCallGraph {
        nodes: modules.iter().map(|m| m.id.clone()).collect(),
        edges: counts
            .into_iter()
            .map(|((from, to), count)| ModuleEdge { from, to, count })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_facts::FunctionRef;
    use crate::taxonomy::Role;
    use proptest::prelude::*;

    fn module(name: &str, files: &[&str]) -> ModuleDescriptor {
        ModuleDescriptor {
            id: ModuleId(name.into()),
            role: Role::new("X", name),
            label: name.into(),
            files: files.iter().map(|s| s.to_string()).collect(),
            funcs: vec![],
            deps: Default::default(),
            feature_notes: String::new(),
        }
    }

    fn call(from: &str, to: Option<&str>) -> CallRelation {
        let r = |f: &str| FunctionRef {
            file: f.into(),
            qualified_name: "f".into(),
            start_line: 1,
        };
        CallRelation {
            caller: r(from),
            callee_name: "f".into(),
            callee_resolved: to.map(r),
            call_site_line: 2,
        }
    }

    #[test]
    fn projection_drops_self_loops_and_unresolved() {
        let modules = vec![module("ui", &["a.py"]), module("loader", &["b.py", "c.py"])];
        let rels = vec![
            call("a.py", Some("b.py")),
            call("a.py", Some("c.py")),
            call("b.py", Some("c.py")),
            call("a.py", None),
            call("a.py", Some("zzz.py")),
        ];
        let g = build_module_graph(&modules, &rels);
        assert_eq!(
            g.edges,
            vec![ModuleEdge {
                from: ModuleId("ui".into()),
                to: ModuleId("loader".into()),
                count: 2
            }]
        );
        assert_eq!(g.callers(&ModuleId("loader".into())), BTreeSet::from([ModuleId("ui".into())]));
    }

    // Brute force: an edge (A, B) exists iff some resolved call goes from a
    // file of A to a file of B and A != B.
    fn oracle(modules: &[ModuleDescriptor], rels: &[CallRelation]) -> BTreeSet<(String, String)> {
        let mut out = BTreeSet::new();
        for a in modules {
            for b in modules {
                if a.id == b.id {
                    continue;
                }
                let hit = rels.iter().any(|r| {
                    r.callee_resolved.as_ref().is_some_and(|c| {
                        a.files.contains(&r.caller.file) && b.files.contains(&c.file)
                    })
                });
                if hit {
                    out.insert((a.id.0.clone(), b.id.0.clone()));
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            membership in prop::collection::vec(prop::collection::btree_set(0usize..4, 0..3), 6),
            calls in prop::collection::vec((0usize..6, prop::option::of(0usize..6)), 0..20),
        ) {
            let files: Vec<String> = (0..6).map(|i| format!("f{i}.py")).collect();
            let modules: Vec<ModuleDescriptor> = (0..4)
                .map(|m| {
                    let fs: Vec<&str> = files
                        .iter()
                        .enumerate()
                        .filter(|(i, _)| membership[*i].contains(&m))
                        .map(|(_, f)| f.as_str())
                        .collect();
                    module(&format!("m{m}"), &fs)
                })
                .collect();
            let rels: Vec<CallRelation> = calls
                .iter()
                .map(|(a, b)| call(&files[*a], b.map(|b| files[b].as_str())))
                .collect();
            let g = build_module_graph(&modules, &rels);
            let got: BTreeSet<(String, String)> =
                g.edges.iter().map(|e| (e.from.0.clone(), e.to.0.clone())).collect();
            prop_assert_eq!(got, oracle(&modules, &rels));
        }
    }
}
