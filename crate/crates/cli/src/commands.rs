use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use refscan_core::code_facts::{CodeIndex, RepoCheckout};
use refscan_core::inspection::{
    inspect_target, load_memory, memory_path, prioritize, ExistingMemory, InspectionConfig, InspectionError,
    InspectionMemory, SharedMemory,
};
use refscan_core::llm::{
    DecodingConfig, EmbeddingBackend, Gateway, GatewayError, HashingEmbedder, HttpEmbedder, LanguageBackend,
    LedgerSnapshot, OpenAiCompatBackend, ScriptedBackend, TokenLedger,
};
use refscan_core::repo_semantics::{
    load_all_semantics, load_semantics, persist_semantics, profile_repository, semantics_path, RepositorySemantics,
};
use refscan_core::similarity::{select_targets_with, SelectionParams, TargetSelection};
use refscan_core::store::{self, StoreError};
use refscan_core::taxonomy::RoleTaxonomy;
use refscan_core::verification::{
    assemble_report, findings_path, load_findings, load_report, report_path, save_findings, save_report, to_sarif,
    ContainerSandbox, FakeSandbox, SandboxExecutor, TargetReport, VerificationError, VerificationRun, VerifyOptions,
};
use refscan_core::vuln_semantics::{
    build_vuln_semantics, load_vuln, parse_reference, persist_vuln, vuln_path, VulnError, VulnerabilitySemantics,
};

use crate::config::{RunConfig, SandboxMode};
use crate::error::CliError;
use crate::report::{consolidate, render, TargetSection, CONSOLIDATED_KIND};
use crate::state::State;

/// Everything a command needs: resolved configuration and the locked state
/// directory.
pub struct Context {
    pub cfg: RunConfig,
    pub state: State,
    backend: Option<(Arc<dyn LanguageBackend>, Option<Arc<dyn LanguageBackend>>)>,
}

/// `project@commit`.
pub fn parse_target(s: &str) -> Result<(String, String), CliError> {
    match s.rsplit_once('@') {
        Some((p, c)) if !p.is_empty() && !c.is_empty() => Ok((p.to_string(), c.to_string())),
        _ => Err(CliError::Config(format!("target `{s}` must be written project@commit"))),
    }
}

fn backend_err(e: GatewayError) -> CliError {
    CliError::Backend(e.to_string())
}

fn profile_hint(project: &str, commit: &str) -> String {
    format!("no profile for {project}@{commit}; run `refscan profile <checkout> --project {project} --commit {commit}` first")
}

impl Context {
    pub fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let state = State::open(&cfg.state_dir)?;
        Ok(Self {
            cfg,
            state,
            backend: None,
        })
    }

    fn say(&self, line: impl AsRef<str>) {
        println!("{}", line.as_ref());
    }

    /// Backends are built on first use so cached stages need no endpoint.
    fn gateway(&mut self, ledger: &Arc<TokenLedger>) -> Result<Gateway, CliError> {
        if self.backend.is_none() {
            self.backend = Some(self.build_backends()?);
        }
        let (primary, fallback) = self.backend.clone().expect("just built");
        let mut gw = Gateway::new(primary, ledger.clone());
        if let Some(f) = fallback {
            gw = gw.with_fallback(f);
        }
        Ok(gw)
    }

    fn build_backends(&self) -> Result<(Arc<dyn LanguageBackend>, Option<Arc<dyn LanguageBackend>>), CliError> {
        let b = &self.cfg.backend;
        if let Some(script) = &b.script {
            let backend = ScriptedBackend::load(script).map_err(CliError::Config)?;
            return Ok((Arc::new(backend), None));
        }
        let timeout = Duration::from_secs(b.timeout_secs);
        let http = |name: &str, url: &str, model: &Option<String>| -> Result<Arc<dyn LanguageBackend>, CliError> {
            let model = model
                .as_deref()
                .ok_or_else(|| CliError::Config(format!("{name} endpoint {url} needs a model name")))?;
            let backend = OpenAiCompatBackend::new(
                name,
                url,
                model,
                b.api_key.clone(),
                b.context_window,
                DecodingConfig::default(),
                timeout,
            )
            .map_err(|e| CliError::Config(e.to_string()))?;
            Ok(Arc::new(backend))
        };
        let Some(url) = &b.url else {
            return Err(CliError::Config(
                "no language backend configured; set backend.url and backend.model, or backend.script".into(),
            ));
        };
        let primary = http("primary", url, &b.model)?;
        let fallback = match &b.fallback_url {
            Some(u) => Some(http("fallback", u, &b.fallback_model.clone().or(b.model.clone()))?),
            None => None,
        };
        Ok((primary, fallback))
    }

    fn embedder(&self) -> Result<Box<dyn EmbeddingBackend>, CliError> {
        match (&self.cfg.embedding.url, &self.cfg.embedding.model) {
            (Some(url), Some(model)) => Ok(Box::new(
                HttpEmbedder::new(
                    url,
                    model,
                    self.cfg.backend.api_key.clone(),
                    Duration::from_secs(self.cfg.backend.timeout_secs),
                )
                .map_err(|e| CliError::Config(e.to_string()))?,
            )),
            (Some(_), None) => Err(CliError::Config("embedding.url needs embedding.model".into())),
            _ => Ok(Box::new(HashingEmbedder::default())),
        }
    }

    fn load_profile(&self, project: &str, commit: &str) -> Result<RepositorySemantics, CliError> {
        if !semantics_path(&self.state.profiles(), project, commit).exists() {
            return Err(CliError::missing("profile", profile_hint(project, commit)));
        }
        Ok(load_semantics(&self.state.profiles(), project, commit)?)
    }

    fn load_vuln(&self, advisory: &str) -> Result<VulnerabilitySemantics, CliError> {
        if !vuln_path(&self.state.vulns(), advisory).exists() {
            return Err(CliError::missing(
                "extract-vuln",
                format!("no vulnerability semantics for {advisory}; run `refscan extract-vuln <advisory.toml>` first"),
            ));
        }
        Ok(load_vuln(&self.state.vulns(), advisory)?)
    }

    fn load_selection(&self, advisory: &str) -> Result<TargetSelection, CliError> {
        self.state.load_selection(advisory)?.ok_or_else(|| {
            CliError::missing("select", format!("no target selection for {advisory}; run `refscan select {advisory}` first"))
        })
    }

    /// Explicit target, or the persisted scan set.
    fn targets(&self, advisory: &str, target: Option<&str>) -> Result<Vec<(String, String)>, CliError> {
        match target {
            Some(t) => Ok(vec![parse_target(t)?]),
            None => Ok(self
                .load_selection(advisory)?
                .scan_set()
                .into_iter()
                .map(|t| (t.project.clone(), t.commit.clone()))
                .collect()),
        }
    }

    fn memory_file(&self, advisory: &str, project: &str, commit: &str) -> PathBuf {
        memory_path(&self.state.memory(), advisory, project, commit)
    }

    pub fn profile(&mut self, path: &Path, project: &str, commit: &str, fresh: bool) -> Result<(), CliError> {
        let root = path
            .canonicalize()
            .map_err(|e| CliError::Config(format!("checkout {}: {e}", path.display())))?;
        let co = RepoCheckout::new(root, project, commit).map_err(|e| CliError::Config(e.to_string()))?;
        if !fresh && semantics_path(&self.state.profiles(), project, commit).exists() {
            let sem = load_semantics(&self.state.profiles(), project, commit)?;
            self.say(format!(
                "{project}@{commit}: cached profile with {} modules (use --fresh to re-profile)",
                sem.modules.len()
            ));
            return Ok(());
        }
        let ledger = Arc::new(TokenLedger::new());
        let gw = self.gateway(&ledger)?;
        let sem = profile_repository(&co, &RoleTaxonomy::builtin(), &gw).map_err(|e| CliError::Other(e.to_string()))?;
        let saved = persist_semantics(&sem, &self.state.profiles())?;
        self.state.add_ledger(&self.state.profile_ledger(project, commit), &ledger.snapshot())?;
        for d in &sem.diagnostics {
            self.say(format!("warning: {d}"));
        }
        self.say(format!(
            "{project}@{commit}: {} modules, {} unassigned files, {} tokens; saved {}",
            sem.modules.len(),
            sem.unassigned.len(),
            sem.token_usage.total(),
            saved.display()
        ));
        for m in &sem.modules {
            self.say(format!("  {} ({} files)", m.id, m.files.len()));
        }
        Ok(())
    }

    pub fn extract_vuln(&mut self, advisory: &Path, fresh: bool) -> Result<(), CliError> {
        let chain = parse_reference(advisory).map_err(|e| CliError::Config(e.to_string()))?;
        let id = chain.advisory_id.clone();
        if !fresh && vuln_path(&self.state.vulns(), &id).exists() {
            self.say(format!("{id}: cached vulnerability semantics (use --fresh to re-extract)"));
            return Ok(());
        }
        let reference = self.load_profile(&chain.project, &chain.affected_commit)?;
        let ledger = Arc::new(TokenLedger::new());
        let gw = self.gateway(&ledger)?;
        let sem = build_vuln_semantics(chain, &reference, &gw).map_err(|e| match e {
            VulnError::Backend(g) => backend_err(g),
            e @ VulnError::Features { .. } => CliError::Backend(e.to_string()),
            VulnError::Store(s) => s.into(),
            e => CliError::Config(e.to_string()),
        })?;
        persist_vuln(&sem, &self.state.vulns())?;
        self.state.add_ledger(&self.state.stage_ledger(&id, "vuln", None), &ledger.snapshot())?;
        for d in &sem.diagnostics {
            self.say(format!("warning: {d}"));
        }
        self.say(format!("{id}: vulnerability semantics extracted"));
        self.say(sem.features.render());
        let affected: Vec<String> = sem.affected_modules.iter().map(|r| r.rendered()).collect();
        self.say(format!("affected modules: {}", affected.join("; ")));
        Ok(())
    }

    pub fn select(&mut self, advisory: &str, fresh: bool) -> Result<(), CliError> {
        let vuln = self.load_vuln(advisory)?;
        if let (false, Some(sel)) = (fresh, self.state.load_selection(advisory)?) {
            self.say(format!("{advisory}: cached selection (use --fresh to recompute)"));
            self.print_selection(&sel);
            return Ok(());
        }
        let rc = &vuln.reference_checkout;
        let reference = self.load_profile(&rc.project_name, &rc.commit_id)?;
        let profiles = load_all_semantics(&self.state.profiles())?;
        let embedder = self.embedder()?;
        let params = SelectionParams {
            keep_threshold: self.cfg.keep_threshold,
            min_passing: self.cfg.min_passing,
            supplement_top_k: self.cfg.supplement_size,
        };
        let sel = select_targets_with(&reference, &profiles, embedder.as_ref(), &params)
            .map_err(|e| CliError::Backend(e.to_string()))?;
        self.state.save_selection(advisory, &sel)?;
        if sel.ranked.is_empty() {
            self.say(format!(
                "{advisory}: empty selection; no profiled target revisions besides the reference. Profile targets with `refscan profile` first."
            ));
            return Ok(());
        }
        self.print_selection(&sel);
        Ok(())
    }

    fn print_selection(&self, sel: &TargetSelection) {
        let mut s = format!("rule: {:?}\n", sel.rule_applied);
        for t in &sel.ranked {
            let mark = if sel.selected.iter().any(|x| x.project == t.project && x.commit == t.commit) {
                "selected"
            } else if sel
                .extra_same_project
                .as_ref()
                .is_some_and(|x| x.project == t.project && x.commit == t.commit)
            {
                "extra"
            } else {
                "-"
            };
            let b = &t.breakdown;
            let _ = writeln!(
                s,
                "  {:<8} {}@{} overall={:.3} (desc {:.3}, app {:.3}, users {:.3}, modules {:.3}, deps {:.3})",
                mark,
                t.project,
                t.commit,
                b.overall,
                b.description_sim,
                b.application_sim,
                b.user_sim,
                b.module_jaccard,
                b.dependency_jaccard
            );
        }
        if sel.selected.is_empty() {
            s.push_str("  (empty selection)\n");
        }
        print!("{s}");
    }

    fn inspection_done(&self, m: &InspectionMemory) -> bool {
        m.stop_policy_satisfied() || m.iteration_count >= m.max_iterations
    }

    fn coverage_line(m: &InspectionMemory) -> String {
        format!(
            "{}@{}: {} candidates; {}/{} files completed; {} critical-scope files remaining; {}/{} iterations",
            m.project,
            m.commit,
            m.candidates.len(),
            m.completed_files().len(),
            m.file_status.len(),
            m.remaining_critical().len(),
            m.iteration_count,
            m.max_iterations
        )
    }

    pub fn inspect(
        &mut self,
        advisory: &str,
        target: Option<&str>,
        fresh: bool,
        halt_after: Option<u32>,
        sarif: Option<&Path>,
    ) -> Result<(), CliError> {
        let explicit = target.map(parse_target).transpose()?;
        let vuln = self.load_vuln(advisory)?;
        let targets = match explicit {
            Some(t) => vec![t],
            None => self.targets(advisory, None)?,
        };
        if targets.is_empty() {
            self.say(format!("{advisory}: the selection is empty; nothing to inspect"));
            return Ok(());
        }
        let shared = SharedMemory::new(&self.state.shared());
        let embedder = self.embedder()?;
        for (project, commit) in targets {
            let sem = self.load_profile(&project, &commit)?;
            let path = self.memory_file(advisory, &project, &commit);
            if !fresh && path.exists() {
                let m = load_memory(&path)?;
                if self.inspection_done(&m) {
                    self.say(format!("{} (already inspected; use --fresh to restart)", Self::coverage_line(&m)));
                    continue;
                }
            }
            let priorities = prioritize(&sem, &vuln.affected_modules, embedder.as_ref(), self.cfg.tau_m);
            if priorities.degraded {
                self.say(format!("warning: {project}@{commit}: embedding promotion skipped"));
            }
            let config = InspectionConfig {
                max_iterations: self.cfg.max_iterations,
                turn_budget: self.cfg.turn_budget,
                halt_after,
                existing: if fresh { ExistingMemory::Fresh } else { ExistingMemory::Resume },
                run_id: format!("{advisory}/{project}@{commit}"),
                ..Default::default()
            };
            let ledger = Arc::new(TokenLedger::new());
            let gw = self.gateway(&ledger)?;
            let outcome = inspect_target(&sem, &vuln, priorities, &gw, &shared, &self.state.memory(), sarif, &config);
            self.state.add_ledger(
                &self.state.stage_ledger(advisory, "inspect", Some((&project, &commit))),
                &ledger.snapshot(),
            )?;
            let outcome = outcome.map_err(|e| match e {
                InspectionError::Store(s) => CliError::from(s),
                e => CliError::Other(e.to_string()),
            })?;
            let m = &outcome.memory;
            if outcome.resumed {
                self.say(format!("{project}@{commit}: resumed from {}", outcome.memory_path.display()));
            }
            self.say(Self::coverage_line(m));
            if m.candidates.is_empty() {
                self.say("  no candidates reported");
            }
            for c in &m.candidates {
                self.say(format!(
                    "  {} {}:{}-{} sink {} ({:?})",
                    c.id, c.location.file, c.location.start_line, c.location.end_line, c.sink, c.confidence
                ));
            }
            if outcome.halted {
                self.say("  halted at this run's iteration limit; rerun to resume");
            }
            if let Some(reason) = outcome.aborted {
                return Err(CliError::Backend(format!(
                    "{project}@{commit}: inspection stopped: {reason}; memory kept at {}",
                    outcome.memory_path.display()
                )));
            }
        }
        Ok(())
    }

    fn sandbox(&self) -> Result<Option<Box<dyn SandboxExecutor>>, CliError> {
        Ok(match self.cfg.sandbox {
            SandboxMode::Off => None,
            SandboxMode::Container => Some(Box::new(ContainerSandbox::default())),
            SandboxMode::Fake => {
                let p = self
                    .cfg
                    .fake_sandbox_script
                    .as_ref()
                    .ok_or_else(|| CliError::Config("--sandbox fake needs --fake-script".into()))?;
                Some(Box::new(FakeSandbox::load(p).map_err(CliError::Config)?))
            }
        })
    }

    fn target_ledger(&self, advisory: &str, project: &str, commit: &str) -> Result<LedgerSnapshot, CliError> {
        let mut snap = self
            .state
            .load_ledger(&self.state.stage_ledger(advisory, "inspect", Some((project, commit))))?;
        snap.merge(
            &self
                .state
                .load_ledger(&self.state.stage_ledger(advisory, "verify", Some((project, commit))))?,
        );
        Ok(snap)
    }

    pub fn verify(&mut self, advisory: &str, target: Option<&str>, fresh: bool) -> Result<(), CliError> {
        let explicit = target.map(parse_target).transpose()?;
        let vuln = self.load_vuln(advisory)?;
        let targets = match explicit {
            Some(t) => vec![t],
            None => self.targets(advisory, None)?,
        };
        let sandbox = self.sandbox()?;
        for (project, commit) in targets {
            let mpath = self.memory_file(advisory, &project, &commit);
            if !mpath.exists() {
                return Err(CliError::missing(
                    "inspect",
                    format!("{project}@{commit} has not been inspected for {advisory}; run `refscan inspect {advisory} --target {project}@{commit}` first"),
                ));
            }
            let memory = load_memory(&mpath)?;
            let fpath = findings_path(&self.state.findings(), advisory, &project, &commit);
            if !fresh && fpath.exists() {
                let run = load_findings(&fpath)?;
                self.say(format!("{project}@{commit}: cached findings (use --fresh to re-verify)"));
                self.print_run(&run);
                continue;
            }
            let sem = self.load_profile(&project, &commit)?;
            let (index, _) = CodeIndex::build(&sem.checkout).map_err(|e| CliError::Verification(e.to_string()))?;
            let log_dir = fpath.with_extension("logs");
            let opts = VerifyOptions {
                sandbox: sandbox.as_deref(),
                max_attempts: self.cfg.poc_max_attempts,
                timeout: Duration::from_secs(self.cfg.poc_timeout_secs),
                log_dir: Some(&log_dir),
            };
            let ledger = Arc::new(TokenLedger::new());
            let gw = self.gateway(&ledger)?;
            let run = refscan_core::verification::verify_all(
                &memory.candidates,
                &vuln,
                &sem.checkout,
                &index.call_relations(),
                &gw,
                &opts,
            );
            self.state.add_ledger(
                &self.state.stage_ledger(advisory, "verify", Some((&project, &commit))),
                &ledger.snapshot(),
            )?;
            let run = run.map_err(|e| match e {
                VerificationError::Backend(g) => backend_err(g),
                e => CliError::Verification(e.to_string()),
            })?;
            save_findings(&fpath, &run)?;
            let report = assemble_report(
                advisory,
                &project,
                &commit,
                run.findings.clone(),
                run.unverifiable.clone(),
                Some(&memory),
                &self.target_ledger(advisory, &project, &commit)?,
            );
            let rpath = save_report(&self.state.reports(), &report)?;
            self.say(format!("{project}@{commit}: {} findings; report {}", run.findings.len(), rpath.display()));
            self.print_run(&run);
        }
        Ok(())
    }

    fn print_run(&self, run: &VerificationRun) {
        for f in &run.findings {
            let loc = &f.candidate.location;
            self.say(format!(
                "  {} {}:{}-{} {} -> {}{}",
                f.candidate.id,
                loc.file,
                loc.start_line,
                loc.end_line,
                f.candidate.sink,
                f.conclusion.kind,
                if f.static_only { " (STATIC-ONLY)" } else { "" }
            ));
        }
        for u in &run.unverifiable {
            self.say(format!("  {} unverifiable: {}", u.candidate.id, u.reason));
        }
    }

    /// Targets named by the selection plus any with persisted memory.
    fn report_targets(&self, advisory: &str) -> Result<Vec<(String, String)>, CliError> {
        let mut out: Vec<(String, String)> = Vec::new();
        let selection = self.state.load_selection(advisory)?;
        if let Some(sel) = &selection {
            out.extend(sel.scan_set().into_iter().map(|t| (t.project.clone(), t.commit.clone())));
        }
        let dir = self.state.memory().join(store::sanitize_key(advisory));
        if let Ok(entries) = std::fs::read_dir(&dir) {
            let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
            paths.sort();
            for p in paths.into_iter().filter(|p| p.extension().is_some_and(|x| x == "json")) {
                let m = load_memory(&p)?;
                if !out.iter().any(|(pr, c)| *pr == m.project && *c == m.commit) {
                    out.push((m.project, m.commit));
                }
            }
        }
        if selection.is_none() && out.is_empty() {
            return Err(CliError::missing(
                "select",
                format!("no target selection for {advisory}; run `refscan select {advisory}` first"),
            ));
        }
        Ok(out)
    }

    pub fn report(&mut self, advisory: &str) -> Result<(), CliError> {
        let vuln = self.load_vuln(advisory)?;
        let targets = self.report_targets(advisory)?;
        let rc = &vuln.reference_checkout;
        let mut ledger = self.state.load_ledger(&self.state.profile_ledger(&rc.project_name, &rc.commit_id))?;
        ledger.merge(&self.state.load_ledger(&self.state.stage_ledger(advisory, "vuln", None))?);
        let mut sections = Vec::new();
        for (project, commit) in targets {
            ledger.merge(&self.state.load_ledger(&self.state.profile_ledger(&project, &commit))?);
            ledger.merge(&self.target_ledger(advisory, &project, &commit)?);
            let mut missing = Vec::new();
            if !semantics_path(&self.state.profiles(), &project, &commit).exists() {
                missing.push("profile".to_string());
            }
            let mpath = self.memory_file(advisory, &project, &commit);
            let memory = if mpath.exists() { Some(load_memory(&mpath)?) } else { None };
            match &memory {
                None => missing.push("inspect".into()),
                Some(m) if !self.inspection_done(m) => missing.push("inspect (incomplete)".into()),
                _ => {}
            }
            let fpath = findings_path(&self.state.findings(), advisory, &project, &commit);
            let report: Option<TargetReport> = if fpath.exists() {
                let rpath = report_path(&self.state.reports(), advisory, &project, &commit);
                Some(if rpath.exists() {
                    load_report(&rpath)?
                } else {
                    let run = load_findings(&fpath)?;
                    assemble_report(
                        advisory,
                        &project,
                        &commit,
                        run.findings,
                        run.unverifiable,
                        memory.as_ref(),
                        &self.target_ledger(advisory, &project, &commit)?,
                    )
                })
            } else {
                missing.push("verify".into());
                None
            };
            sections.push(TargetSection {
                project,
                commit,
                missing_stages: missing,
                report,
            });
        }
        let consolidated = consolidate(advisory, sections, &ledger);
        let dir = self.state.reports().join(store::sanitize_key(advisory));
        let json = dir.join("consolidated.json");
        store::write_document(&json, CONSOLIDATED_KIND, &consolidated)?;
        let write = |p: PathBuf, text: String| -> Result<PathBuf, CliError> {
            std::fs::write(&p, text).map_err(|e| {
                CliError::from(StoreError::Io {
                    path: p.display().to_string(),
                    source: e,
                })
            })?;
            Ok(p)
        };
        let md = write(dir.join("consolidated.md"), render(&consolidated))?;
        let reports: Vec<TargetReport> = consolidated.targets.iter().filter_map(|t| t.report.clone()).collect();
        let sarif = write(
            dir.join("consolidated.sarif"),
            serde_json::to_string_pretty(&to_sarif(&reports)).expect("sarif serializes"),
        )?;
        self.say(crate::report::totals_line(&consolidated));
        for t in &consolidated.targets {
            if !t.missing_stages.is_empty() {
                self.say(format!("  {}@{} missing: {}", t.project, t.commit, t.missing_stages.join(", ")));
            }
        }
        self.say(format!("wrote {}, {} and {}", json.display(), md.display(), sarif.display()));
        Ok(())
    }
}
