use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::llm::EmbeddingBackend;
use crate::repo_semantics::{ModuleCallGraph, ModuleDescriptor, ModuleId, RepositorySemantics};
use crate::similarity::{promotion_matrix, SimilarityError};
use crate::taxonomy::Role;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum PromotionReason {
    NameMatch,
    Embedding { similarity: f64, role: Role },
    CallerOfP1,
    CalleeOfP1,
    Remainder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Priority {
    P1,
    P2,
    P3,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriorityPartition {
    pub p1: BTreeSet<ModuleId>,
    pub p2: BTreeSet<ModuleId>,
    pub p3: BTreeSet<ModuleId>,
    pub promotion_log: Vec<(ModuleId, PromotionReason)>,
    /// Embedding promotion was skipped; P1 holds name matches only.
    pub degraded: bool,
    pub diagnostics: Vec<String>,
}

impl PriorityPartition {
    pub fn priority_of(&self, id: &ModuleId) -> Option<Priority> {
        if self.p1.contains(id) {
            Some(Priority::P1)
        } else if self.p2.contains(id) {
            Some(Priority::P2)
        } else if self.p3.contains(id) {
            Some(Priority::P3)
        } else {
            None
        }
    }

    pub fn tiers(&self) -> [(Priority, &BTreeSet<ModuleId>); 3] {
        [(Priority::P1, &self.p1), (Priority::P2, &self.p2), (Priority::P3, &self.p3)]
    }
}

/// Set-level partition. `best_sim` holds, per module, the maximum promotion
/// similarity over affected roles and the role attaining it.
pub fn partition(
    universe: &BTreeSet<ModuleId>,
    name_matches: &BTreeSet<ModuleId>,
    best_sim: &BTreeMap<ModuleId, (f64, Role)>,
    graph: &ModuleCallGraph,
    tau_m: f64,
) -> PriorityPartition {
    let mut out = PriorityPartition::default();
    for m in universe {
        let mut hit = false;
        if name_matches.contains(m) {
            out.promotion_log.push((m.clone(), PromotionReason::NameMatch));
            hit = true;
        }
        if let Some((sim, role)) = best_sim.get(m) {
            if *sim >= tau_m {
                out.promotion_log.push((
                    m.clone(),
                    PromotionReason::Embedding {
                        similarity: *sim,
                        role: role.clone(),
                    },
                ));
                hit = true;
            }
        }
        if hit {
            out.p1.insert(m.clone());
        }
    }
    for m in universe {
        if out.p1.contains(m) {
            continue;
        }
        // m calls into P1 → m is a caller of P1
        let calls_p1 = graph.callees(m).iter().any(|x| out.p1.contains(x));
        let called_by_p1 = graph.callers(m).iter().any(|x| out.p1.contains(x));
        if calls_p1 {
            out.promotion_log.push((m.clone(), PromotionReason::CallerOfP1));
        }
        if called_by_p1 {
            out.promotion_log.push((m.clone(), PromotionReason::CalleeOfP1));
        }
        if calls_p1 || called_by_p1 {
            out.p2.insert(m.clone());
        } else {
            out.p3.insert(m.clone());
            out.promotion_log.push((m.clone(), PromotionReason::Remainder));
        }
    }
    out
}

/// Partition with an arbitrary promotion similarity; `sim` errors disable
/// embedding promotion for the whole run.
pub fn prioritize_with<E>(
    target: &RepositorySemantics,
    affected: &BTreeSet<Role>,
    sim: impl Fn(&[&ModuleDescriptor], &[Role]) -> Result<Vec<Vec<f64>>, E>,
    tau_m: f64,
) -> PriorityPartition
where
    E: std::fmt::Display,
{
    let universe = target.module_universe();
    let name_matches: BTreeSet<ModuleId> = target
        .modules
        .iter()
        .filter(|m| affected.contains(&m.role))
        .map(|m| m.id.clone())
        .collect();
    let roles: Vec<Role> = affected.iter().cloned().collect();
    let descriptors: Vec<&ModuleDescriptor> = target.modules.iter().collect();
    let mut best_sim = BTreeMap::new();
    let mut degraded = false;
    let mut diagnostics = Vec::new();
    match sim(&descriptors, &roles) {
        Ok(matrix) => {
            for (d, row) in descriptors.iter().zip(matrix) {
                let best = row
                    .iter()
                    .zip(&roles)
                    .fold(None::<(f64, &Role)>, |acc, (s, r)| match acc {
                        Some((b, _)) if b >= *s => acc,
                        _ => Some((*s, r)),
                    });
                if let Some((s, r)) = best {
                    best_sim.insert(d.id.clone(), (s, r.clone()));
                }
            }
        }
        Err(e) => {
            degraded = true;
            diagnostics.push(format!("embedding promotion skipped: {e}"));
        }
    }
    let mut out = partition(&universe, &name_matches, &best_sim, &target.graph, tau_m);
    out.degraded = degraded;
    out.diagnostics = diagnostics;
    out
}

pub fn prioritize(
    target: &RepositorySemantics,
    affected: &BTreeSet<Role>,
    embedder: &dyn EmbeddingBackend,
    tau_m: f64,
) -> PriorityPartition {
    prioritize_with(
        target,
        affected,
        |d, r| -> Result<Vec<Vec<f64>>, SimilarityError> { promotion_matrix(d, r, embedder) },
        tau_m,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_facts::RepoCheckout;
    use crate::llm::{EmbedError, TableEmbedder, Usage};
    use crate::repo_semantics::{ModuleEdge, RepositorySummary};

    fn module(role: Role, notes: &str) -> ModuleDescriptor {
        ModuleDescriptor {
            id: ModuleId::for_role(&role),
            label: role.second.clone(),
            role,
            files: BTreeSet::from(["x.py".to_string()]),
            funcs: vec![],
            deps: Default::default(),
            feature_notes: notes.into(),
        }
    }

    fn target(modules: Vec<ModuleDescriptor>, edges: &[(usize, usize)], unassigned: bool) -> RepositorySemantics {
        let ids: Vec<ModuleId> = modules.iter().map(|m| m.id.clone()).collect();
        RepositorySemantics {
            checkout: RepoCheckout::new(&std::env::temp_dir(), "t", "c").unwrap(),
            summary: RepositorySummary {
                description: "d".into(),
                application_scenario: "a".into(),
                target_user: "u".into(),
                key_dependencies: Default::default(),
                degraded: false,
            },
            graph: ModuleCallGraph {
                nodes: ids.iter().cloned().collect(),
                edges: edges
                    .iter()
                    .map(|(a, b)| ModuleEdge {
                        from: ids[*a].clone(),
                        to: ids[*b].clone(),
                        count: 1,
                    })
                    .collect(),
            },
            modules,
            unassigned: if unassigned { vec!["misc.py".into()] } else { vec![] },
            assignments: vec![],
            token_usage: Usage::default(),
            diagnostics: vec![],
        }
    }

    fn web_ui() -> Role {
        Role::new("UI and Workflows", "Web UI")
    }

    fn zero(d: &[&ModuleDescriptor], r: &[Role]) -> Result<Vec<Vec<f64>>, String> {
        Ok(vec![vec![0.0; r.len()]; d.len()])
    }

    #[test]
    fn hand_applied_example() {
        let m1 = module(web_ui(), "");
        let m2 = module(Role::new("Serving and Deployment", "Serving API"), "");
        let m3 = module(Role::new("Platform Systems", "Build Packaging"), "");
        let t = target(vec![m1.clone(), m2.clone(), m3.clone()], &[(1, 0)], true);
        let p = prioritize_with(&t, &BTreeSet::from([web_ui()]), zero, 0.8);
        assert_eq!(p.p1, BTreeSet::from([m1.id]));
        assert_eq!(p.p2, BTreeSet::from([m2.id.clone()]));
        assert_eq!(p.p3, BTreeSet::from([m3.id, ModuleId::unassigned()]));
        assert!(p.promotion_log.contains(&(m2.id, PromotionReason::CallerOfP1)));
    }

    #[test]
    fn vacuous_match() {
        let t = target(vec![module(web_ui(), "")], &[], false);
        let p = prioritize_with(&t, &BTreeSet::from([Role::new("RAG and Retrieval", "Hybrid Search")]), zero, 0.8);
        assert!(p.p1.is_empty() && p.p2.is_empty());
        assert_eq!(p.p3.len(), 1);
    }

    #[test]
    fn identity_promotion_via_embedding() {
        let affected = Role::new("Model Assets and Loading", "Checkpoint Formats");
        let other = module(web_ui(), "");
        let t = target(vec![other.clone()], &[], false);
        let e = TableEmbedder::new()
            .insert(affected.rendered(), vec![1.0, 0.0])
            .insert(other.descriptor_text(), vec![0.0, 1.0]);
        let p = prioritize(&t, &BTreeSet::from([affected.clone()]), &e, 0.8);
        assert!(p.p1.is_empty());
        // descriptor embeds exactly onto the affected role
        let e = e.insert(other.descriptor_text(), vec![1.0, 0.0]);
        let p = prioritize(&t, &BTreeSet::from([affected]), &e, 0.8);
        assert_eq!(p.p1, BTreeSet::from([other.id.clone()]));
        assert!(matches!(p.promotion_log[0].1, PromotionReason::Embedding { similarity, .. } if (similarity - 1.0).abs() < 1e-12));
    }

    #[test]
    fn embedder_failure_degrades_to_name_only() {
        let t = target(vec![module(web_ui(), "")], &[], false);
        let p = prioritize_with(
            &t,
            &BTreeSet::from([web_ui()]),
            |_, _| -> Result<Vec<Vec<f64>>, EmbedError> { Err(EmbedError::EmptyBatch) },
            0.8,
        );
        assert!(p.degraded);
        assert_eq!(p.p1.len(), 1);
    }
}
