//! Repository and module similarity: embedding cosine, Jaccard overlap, the
//! five-component repository score and target-revision selection.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{cosine, EmbedError, EmbeddingBackend};
use crate::repo_semantics::{ModuleDescriptor, RepositorySemantics};
use crate::taxonomy::Role;

/// Default module-promotion threshold τ_M.
pub const DEFAULT_TAU_M: f64 = 0.8;
pub const KEEP_THRESHOLD: f64 = 0.5;
pub const MIN_PASSING: usize = 3;
pub const SUPPLEMENT_TOP_K: usize = 5;

#[derive(Debug, Error, PartialEq)]
pub enum SimilarityError {
    #[error("embedding failed: {0}")]
    Embed(#[from] EmbedError),
}

/// Cosine of the unit-normalized embeddings, clamped to [0, 1].
pub fn text_similarity(a: &str, b: &str, embedder: &dyn EmbeddingBackend) -> Result<f64, SimilarityError> {
    let e = embedder.embed(&[a.to_string(), b.to_string()])?;
    Ok(clamp_unit(cosine(&e.vectors[0], &e.vectors[1])))
}

fn clamp_unit(x: f64) -> f64 {
    if x.is_nan() {
        0.0
    } else {
        x.clamp(0.0, 1.0)
    }
}

/// |a ∩ b| / |a ∪ b|, with two empty sets scoring 0.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 0.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBreakdown {
    pub description_sim: f64,
    pub application_sim: f64,
    pub user_sim: f64,
    pub module_jaccard: f64,
    pub dependency_jaccard: f64,
    pub overall: f64,
}

impl SimilarityBreakdown {
    pub fn from_components(c: [f64; 5]) -> Self {
        Self {
            description_sim: c[0],
            application_sim: c[1],
            user_sim: c[2],
            module_jaccard: c[3],
            dependency_jaccard: c[4],
            overall: c.iter().sum::<f64>() / 5.0,
        }
    }

    pub fn components(&self) -> [f64; 5] {
        [
            self.description_sim,
            self.application_sim,
            self.user_sim,
            self.module_jaccard,
            self.dependency_jaccard,
        ]
    }
}

pub fn score_pair(
    reference: &RepositorySemantics,
    target: &RepositorySemantics,
    embedder: &dyn EmbeddingBackend,
) -> Result<SimilarityBreakdown, SimilarityError> {
    let (r, t) = (&reference.summary, &target.summary);
    let texts = [
        &r.description,
        &r.application_scenario,
        &r.target_user,
        &t.description,
        &t.application_scenario,
        &t.target_user,
    ]
    .map(|s| s.to_string());
    let e = embedder.embed(&texts)?;
    let sim = |i: usize| clamp_unit(cosine(&e.vectors[i], &e.vectors[i + 3]));
    Ok(SimilarityBreakdown::from_components([
        sim(0),
        sim(1),
        sim(2),
        jaccard(&reference.roles(), &target.roles()),
        jaccard(&r.key_dependencies, &t.key_dependencies),
    ]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    Threshold,
    Top5Supplement,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTarget {
    pub project: String,
    pub commit: String,
    pub breakdown: SimilarityBreakdown,
}

impl RankedTarget {
    fn same_revision(&self, other: &RankedTarget) -> bool {
        self.project == other.project && self.commit == other.commit
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSelection {
    pub ranked: Vec<RankedTarget>,
    pub selected: Vec<RankedTarget>,
    pub rule_applied: SelectionRule,
    pub extra_same_project: Option<RankedTarget>,
}

impl TargetSelection {
    /// Revisions to inspect: the selection followed by the extra revision.
    pub fn scan_set(&self) -> Vec<&RankedTarget> {
        self.selected.iter().chain(self.extra_same_project.iter()).collect()
    }
}

fn rank_order(a: &RankedTarget, b: &RankedTarget) -> Ordering {
    b.breakdown
        .overall
        .partial_cmp(&a.breakdown.overall)
        .unwrap_or(Ordering::Equal)
        .then_with(|| (&a.project, &a.commit).cmp(&(&b.project, &b.commit)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionParams {
    pub keep_threshold: f64,
    pub min_passing: usize,
    pub supplement_top_k: usize,
}

impl Default for SelectionParams {
    fn default() -> Self {
        Self {
            keep_threshold: KEEP_THRESHOLD,
            min_passing: MIN_PASSING,
            supplement_top_k: SUPPLEMENT_TOP_K,
        }
    }
}

/// Applies the keep/supplement rules to already-scored candidates.
pub fn rank_and_select(reference_project: &str, reference_commit: &str, scored: Vec<RankedTarget>) -> TargetSelection {
    rank_and_select_with(reference_project, reference_commit, scored, &SelectionParams::default())
}

pub fn rank_and_select_with(
    reference_project: &str,
    reference_commit: &str,
    mut scored: Vec<RankedTarget>,
    params: &SelectionParams,
) -> TargetSelection {
    scored.retain(|c| !(c.project == reference_project && c.commit == reference_commit));
    scored.sort_by(rank_order);
    let keep = |c: &&RankedTarget| c.breakdown.overall >= params.keep_threshold;
    let (selected, rule_applied) = if scored.iter().filter(keep).count() >= params.min_passing {
        (scored.iter().filter(keep).cloned().collect(), SelectionRule::Threshold)
    } else {
        (
            scored.iter().take(params.supplement_top_k).cloned().collect::<Vec<_>>(),
            SelectionRule::Top5Supplement,
        )
    };
    let extra_same_project = scored
        .iter()
        .find(|c| c.project == reference_project && !selected.iter().any(|s: &RankedTarget| s.same_revision(c)))
        .cloned();
    TargetSelection {
        ranked: scored,
        selected,
        rule_applied,
        extra_same_project,
    }
}

pub fn select_targets(
    reference: &RepositorySemantics,
    candidates: &[RepositorySemantics],
    embedder: &dyn EmbeddingBackend,
) -> Result<TargetSelection, SimilarityError> {
    select_targets_with(reference, candidates, embedder, &SelectionParams::default())
}

pub fn select_targets_with(
    reference: &RepositorySemantics,
    candidates: &[RepositorySemantics],
    embedder: &dyn EmbeddingBackend,
    params: &SelectionParams,
) -> Result<TargetSelection, SimilarityError> {
    let scored = candidates
        .iter()
        .map(|c| {
            Ok(RankedTarget {
                project: c.checkout.project_name.clone(),
                commit: c.checkout.commit_id.clone(),
                breakdown: score_pair(reference, c, embedder)?,
            })
        })
        .collect::<Result<Vec<_>, SimilarityError>>()?;
    Ok(rank_and_select_with(
        &reference.checkout.project_name,
        &reference.checkout.commit_id,
        scored,
        params,
    ))
}

/// sim_M between a module descriptor and an affected role name.
pub fn module_promotion_sim(
    descriptor: &ModuleDescriptor,
    affected_role: &Role,
    embedder: &dyn EmbeddingBackend,
) -> Result<f64, SimilarityError> {
    text_similarity(&descriptor.descriptor_text(), &affected_role.rendered(), embedder)
}

/// sim_M for every (descriptor, role) pair in one embedding batch;
/// `out[i][j]` compares descriptor i with role j.
pub fn promotion_matrix(
    descriptors: &[&ModuleDescriptor],
    roles: &[Role],
    embedder: &dyn EmbeddingBackend,
) -> Result<Vec<Vec<f64>>, SimilarityError> {
    if descriptors.is_empty() || roles.is_empty() {
        return Ok(vec![Vec::new(); descriptors.len()]);
    }
    let mut texts: Vec<String> = descriptors.iter().map(|d| d.descriptor_text()).collect();
    texts.extend(roles.iter().map(Role::rendered));
    let e = embedder.embed(&texts)?;
    let n = descriptors.len();
    Ok((0..n)
        .map(|i| (0..roles.len()).map(|j| clamp_unit(cosine(&e.vectors[i], &e.vectors[n + j]))).collect())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_facts::RepoCheckout;
    use crate::llm::{HashingEmbedder, TableEmbedder, Usage};
    use crate::repo_semantics::{ModuleCallGraph, ModuleId, RepositorySummary};
    use proptest::prelude::*;

    #[test]
    fn text_similarity_cases() {
        let h = HashingEmbedder::default();
        assert!((text_similarity("load model weights", "load model weights", &h).unwrap() - 1.0).abs() < 1e-12);
        let t = TableEmbedder::new().insert("a", vec![1.0, 0.0]).insert("b", vec![-1.0, 0.0]).insert("c", vec![0.0, 2.0]);
        assert_eq!(text_similarity("a", "c", &t).unwrap(), 0.0);
        assert_eq!(text_similarity("a", "b", &t).unwrap(), 0.0);
        assert!(matches!(text_similarity("", "a", &t), Err(SimilarityError::Embed(EmbedError::EmptyText(0)))));
    }

    #[test]
    fn jaccard_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(jaccard(&s(&["a", "b", "c"]), &s(&["b", "c", "d"])), 0.5);
        assert_eq!(jaccard(&s(&["a", "b"]), &s(&["a", "b"])), 1.0);
        assert_eq!(jaccard(&s(&[]), &s(&[])), 0.0);
    }

    #[test]
    fn mean_of_components() {
        let b = SimilarityBreakdown::from_components([0.9, 0.8, 0.7, 0.6, 0.5]);
        assert!((b.overall - 0.70).abs() < 1e-9);
    }

    fn target(project: &str, commit: &str, overall: f64) -> RankedTarget {
        RankedTarget {
            project: project.into(),
            commit: commit.into(),
            breakdown: SimilarityBreakdown::from_components([overall; 5]),
        }
    }

    fn names(v: &[RankedTarget]) -> Vec<&str> {
        v.iter().map(|t| t.project.as_str()).collect()
    }

    #[test]
    fn threshold_rule() {
        let cands = vec![target("d", "1", 0.4), target("b", "1", 0.55), target("a", "1", 0.9), target("c", "1", 0.52)];
        let s = rank_and_select("ref", "0", cands);
        assert_eq!(s.rule_applied, SelectionRule::Threshold);
        assert_eq!(names(&s.selected), vec!["a", "b", "c"]);
        assert!(s.extra_same_project.is_none());
    }

    #[test]
    fn supplement_rule() {
        let cands = [0.9, 0.55, 0.45, 0.40, 0.30, 0.20]
            .iter()
            .enumerate()
            .map(|(i, o)| target(&format!("p{i}"), "1", *o))
            .collect();
        let s = rank_and_select("ref", "0", cands);
        assert_eq!(s.rule_applied, SelectionRule::Top5Supplement);
        assert_eq!(names(&s.selected), vec!["p0", "p1", "p2", "p3", "p4"]);
    }

    #[test]
    fn ties_break_by_project_then_commit() {
        let cands = vec![target("b", "1", 0.3), target("a", "2", 0.3), target("a", "1", 0.3)];
        let s = rank_and_select("ref", "0", cands);
        let got: Vec<(&str, &str)> = s.selected.iter().map(|t| (t.project.as_str(), t.commit.as_str())).collect();
        assert_eq!(got, vec![("a", "1"), ("a", "2"), ("b", "1")]);
    }

    #[test]
    fn same_project_extra_revision() {
        let mut cands: Vec<RankedTarget> = (0..5).map(|i| target(&format!("p{i}"), "1", 0.6 + i as f64 / 100.0)).collect();
        cands.push(target("ref", "old", 0.1));
        cands.push(target("ref", "0", 1.0));
        let s = rank_and_select("ref", "0", cands);
        assert_eq!(s.rule_applied, SelectionRule::Threshold);
        let extra = s.extra_same_project.as_ref().unwrap();
        assert_eq!((extra.project.as_str(), extra.commit.as_str()), ("ref", "old"));
        assert!(s.ranked.iter().all(|t| t.commit != "0"));
        assert_eq!(s.scan_set().len(), 6);
    }

    fn unit2(cos: f64) -> Vec<f64> {
        vec![cos, (1.0 - cos * cos).sqrt()]
    }

    fn descriptor(label: &str, role: Role, notes: &str) -> ModuleDescriptor {
        ModuleDescriptor {
            id: ModuleId::for_role(&role),
            role,
            label: label.into(),
            files: BTreeSet::from(["a.py".to_string()]),
            funcs: vec![],
            deps: Default::default(),
            feature_notes: notes.into(),
        }
    }

    #[test]
    fn promotion_threshold_boundary() {
        let role = Role::new("Model Assets and Loading", "Loading Configuration");
        let d = descriptor("loader", Role::new("UI and Workflows", "Web UI"), "");
        let text = d.descriptor_text();
        let at = |cos: f64| {
            let e = TableEmbedder::new().insert(text.clone(), vec![1.0, 0.0]).insert(role.rendered(), unit2(cos));
            module_promotion_sim(&d, &role, &e).unwrap()
        };
        assert!(at(0.79) < DEFAULT_TAU_M);
        let exact = TableEmbedder::new().insert(text.clone(), vec![1.0, 0.0]).insert(role.rendered(), vec![0.8, 0.6]);
        assert!(module_promotion_sim(&d, &role, &exact).unwrap() >= DEFAULT_TAU_M);
    }

    #[test]
    fn promotion_identity() {
        let role = Role::new("UI and Workflows", "Web UI");
        // label + role text + notes equal to the rendered role for an identity match
        let d = ModuleDescriptor {
            label: String::new(),
            ..descriptor("", role.clone(), "")
        };
        assert_eq!(d.descriptor_text(), role.rendered());
        let sim = module_promotion_sim(&d, &role, &HashingEmbedder::default()).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
        let m = promotion_matrix(&[&d], &[role], &HashingEmbedder::default()).unwrap();
        assert!((m[0][0] - 1.0).abs() < 1e-12);
    }

    fn profile(project: &str, texts: [&str; 3], roles: &[Role], deps: &[&str]) -> RepositorySemantics {
        let dir = std::env::temp_dir();
        RepositorySemantics {
            checkout: RepoCheckout::new(&dir, project, "c").unwrap(),
            summary: RepositorySummary {
                description: texts[0].into(),
                application_scenario: texts[1].into(),
                target_user: texts[2].into(),
                key_dependencies: deps.iter().map(|s| s.to_string()).collect(),
                degraded: false,
            },
            modules: roles.iter().map(|r| descriptor(&r.second, r.clone(), "")).collect(),
            unassigned: vec![],
            assignments: vec![],
            graph: ModuleCallGraph::default(),
            token_usage: Usage::default(),
            diagnostics: vec![],
        }
    }

    #[test]
    fn score_pair_reflexive_and_disjoint() {
        let h = HashingEmbedder::default();
        let a = profile(
            "a",
            ["finetuning toolkit", "LLM adaptation", "ML engineers"],
            &[Role::new("UI and Workflows", "Web UI")],
            &["torch"],
        );
        let s = score_pair(&a, &a, &h).unwrap();
        assert!(s.components().iter().all(|c| (c - 1.0).abs() < 1e-9));
        assert!((s.overall - 1.0).abs() < 1e-9);

        let t = TableEmbedder::new()
            .insert("x1", vec![1.0, 0.0])
            .insert("x2", vec![1.0, 0.0])
            .insert("x3", vec![1.0, 0.0])
            .insert("y1", vec![0.0, 1.0])
            .insert("y2", vec![0.0, 1.0])
            .insert("y3", vec![0.0, 1.0]);
        let x = profile("x", ["x1", "x2", "x3"], &[Role::new("UI and Workflows", "Web UI")], &["torch"]);
        let y = profile("y", ["y1", "y2", "y3"], &[Role::new("Platform Systems", "Build Packaging")], &["flask"]);
        assert_eq!(score_pair(&x, &y, &t).unwrap().overall, 0.0);
    }

    proptest! {
        #[test]
        fn overall_is_component_mean(c in prop::array::uniform5(0.0f64..=1.0)) {
            let b = SimilarityBreakdown::from_components(c);
            let mean = c.iter().sum::<f64>() / 5.0;
            prop_assert!((b.overall - mean).abs() < 1e-9);
            prop_assert!((0.0..=1.0).contains(&b.overall));
        }

        #[test]
        fn jaccard_matches_enumeration(a in prop::collection::btree_set(0u8..12, 0..8), b in prop::collection::btree_set(0u8..12, 0..8)) {
            let mut inter = 0;
            let mut union = 0;
            for x in 0u8..12 {
                let (ia, ib) = (a.contains(&x), b.contains(&x));
                if ia && ib { inter += 1; }
                if ia || ib { union += 1; }
            }
            let expected = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
            prop_assert_eq!(jaccard(&a, &b), expected);
        }

        #[test]
        fn raising_a_selected_candidate_keeps_it(
            overalls in prop::collection::vec(0.0f64..=1.0, 1..9),
            pick in 0usize..9,
            bump in 0.0f64..=1.0,
        ) {
            let pick = pick % overalls.len();
            let build = |o: &[f64]| -> Vec<RankedTarget> {
                o.iter().enumerate().map(|(i, x)| target(&format!("p{i}"), "1", *x)).collect()
            };
            let before = rank_and_select("ref", "0", build(&overalls));
            let name = format!("p{pick}");
            if before.selected.iter().any(|t| t.project == name) {
                let mut raised = overalls.clone();
                raised[pick] = (raised[pick] + bump).min(1.0);
                let after = rank_and_select("ref", "0", build(&raised));
                prop_assert!(after.selected.iter().any(|t| t.project == name));
            }
        }

        #[test]
        fn rule_is_threshold_iff_three_pass(overalls in prop::collection::vec(0.0f64..=1.0, 1..9)) {
            let cands = overalls.iter().enumerate().map(|(i, x)| target(&format!("p{i}"), "1", *x)).collect();
            let s = rank_and_select("ref", "0", cands);
            let passing = overalls.iter().filter(|x| **x >= KEEP_THRESHOLD).count();
            prop_assert_eq!(s.rule_applied == SelectionRule::Threshold, passing >= MIN_PASSING);
            if s.rule_applied == SelectionRule::Threshold {
                prop_assert!(s.selected.iter().all(|t| t.breakdown.overall >= KEEP_THRESHOLD));
                prop_assert_eq!(s.selected.len(), passing);
            } else {
                prop_assert_eq!(s.selected.len(), overalls.len().min(SUPPLEMENT_TOP_K));
            }
            prop_assert!(s.selected.iter().zip(&s.ranked).all(|(a, b)| a == b));
        }

        #[test]
        fn positive_scaling_is_invisible(
            a in prop::collection::vec(-1.0f64..1.0, 4),
            b in prop::collection::vec(-1.0f64..1.0, 4),
            k in 0.01f64..100.0,
        ) {
            prop_assume!(a.iter().any(|x| x.abs() > 1e-3) && b.iter().any(|x| x.abs() > 1e-3));
            let plain = TableEmbedder::new().insert("a", a.clone()).insert("b", b.clone());
            let scaled = TableEmbedder::new()
                .insert("a", a.iter().map(|x| x * k).collect())
                .insert("b", b.iter().map(|x| x * k).collect());
            let s1 = text_similarity("a", "b", &plain).unwrap();
            let s2 = text_similarity("a", "b", &scaled).unwrap();
            prop_assert!((s1 - s2).abs() < 1e-9);
        }
    }
}
