use std::collections::VecDeque;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::warn;

use super::{Conclusion, ConclusionKind, PocAttempt, PocOutcome, PocRecord, VerificationError};
use crate::inspection::Candidate;
use crate::llm::{Gateway, Message, Stage, Usage};

pub const POC_PROMPT_ID: &str = "poc-script";
/// Printed by the sink instrumentation when a sink is invoked.
pub const SINK_MARKER: &str = "REFSCAN_SINK_REACHED";
/// Printed by a PoC script when a protection rejected its input.
pub const BLOCKED_MARKER: &str = "REFSCAN_BLOCKED";
pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
const LOG_TAIL_CHARS: usize = 2000;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox unavailable: {0}")]
    Unavailable(String),
    #[error("sandbox run failed: {0}")]
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SandboxRun {
    pub exit_code: Option<i32>,
    pub log: String,
}

pub struct PocJob<'a> {
    /// Target checkout, mounted read-only.
    pub workspace: &'a Path,
    pub script: &'a str,
    pub timeout: Duration,
}

pub trait SandboxExecutor: Send + Sync {
    fn name(&self) -> &str;
    fn available(&self) -> Result<(), SandboxError>;
    fn run(&self, job: &PocJob<'_>) -> Result<SandboxRun, SandboxError>;
}

/// Records submitted scripts and replays scripted outcomes in order.
pub struct FakeSandbox {
    runs: Mutex<VecDeque<SandboxRun>>,
    scripts: Mutex<Vec<String>>,
    available: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FakeScript {
    runs: Vec<SandboxRun>,
}

impl FakeSandbox {
    pub fn new(runs: Vec<SandboxRun>) -> Self {
        Self {
            runs: Mutex::new(runs.into()),
            scripts: Mutex::new(Vec::new()),
            available: true,
        }
    }

    pub fn unavailable() -> Self {
        Self {
            available: false,
            ..Self::new(Vec::new())
        }
    }

    /// Loads `{"runs": [{"exit_code": 0, "log": "..."}]}`.
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        let script: FakeScript = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(Self::new(script.runs))
    }

    pub fn reached() -> SandboxRun {
        SandboxRun {
            exit_code: Some(0),
            log: format!("{SINK_MARKER} fake\n"),
        }
    }

    pub fn scripts(&self) -> Vec<String> {
        self.scripts.lock().expect("fake sandbox poisoned").clone()
    }
}

impl SandboxExecutor for FakeSandbox {
    fn name(&self) -> &str {
        "fake"
    }

    fn available(&self) -> Result<(), SandboxError> {
        if self.available {
            Ok(())
        } else {
            Err(SandboxError::Unavailable("fake sandbox configured as unavailable".into()))
        }
    }

    fn run(&self, job: &PocJob<'_>) -> Result<SandboxRun, SandboxError> {
        self.available()?;
        self.scripts.lock().expect("fake sandbox poisoned").push(job.script.to_string());
        Ok(self.runs.lock().expect("fake sandbox poisoned").pop_front().unwrap_or(SandboxRun {
            exit_code: Some(1),
            log: "fake sandbox: no scripted outcome left".into(),
        }))
    }
}

/// Python startup hook that replaces cataloged sinks with a marker print
/// followed by a clean exit, so no sink ever executes for real.
pub const SINK_INSTRUMENTATION: &str = r#"import builtins, sys

_MARK = "REFSCAN_SINK_REACHED"
_SINKS = {
    "os": ["system", "popen"],
    "subprocess": ["run", "call", "check_call", "check_output", "Popen"],
    "pickle": ["load", "loads"],
    "marshal": ["loads"],
    "torch": ["load"],
    "dill": ["load", "loads"],
    "joblib": ["load"],
    "yaml": ["load", "unsafe_load"],
    "numpy": ["load"],
}
_done = set()


def _hook(api):
    def reached(*args, **kwargs):
        print(_MARK, api, flush=True)
        sys.exit(0)
    return reached


def _patch(name):
    mod = sys.modules.get(name)
    if mod is None or name in _done:
        return
    _done.add(name)
    for attr in _SINKS[name]:
        if hasattr(mod, attr):
            setattr(mod, attr, _hook(name + "." + attr))


_import = builtins.__import__


def _instrumented_import(name, *args, **kwargs):
    mod = _import(name, *args, **kwargs)
    for root in list(_SINKS):
        _patch(root)
    return mod


builtins.__import__ = _instrumented_import
for _root in list(_SINKS):
    _patch(_root)
"#;

/// Runs PoC scripts in a throwaway container with no network, capped
/// memory, CPU and process count, and a read-only view of the checkout.
pub struct ContainerSandbox {
    pub engine: String,
    pub image: String,
    pub memory: String,
    pub cpus: String,
    pub network: bool,
}

impl Default for ContainerSandbox {
    fn default() -> Self {
        Self {
            engine: "docker".into(),
            image: "python:3.11-slim".into(),
            memory: "512m".into(),
            cpus: "1".into(),
            network: false,
        }
    }
}

impl ContainerSandbox {
    fn args(&self, workspace: &Path, poc_dir: &Path) -> Vec<String> {
        let mut a: Vec<String> = vec!["run".into(), "--rm".into()];
        if !self.network {
            a.extend(["--network".into(), "none".into()]);
        }
        a.extend([
            "--memory".into(),
            self.memory.clone(),
            "--cpus".into(),
            self.cpus.clone(),
            "--pids-limit".into(),
            "128".into(),
            "--read-only".into(),
            "--tmpfs".into(),
            "/tmp".into(),
            "-v".into(),
            format!("{}:/work:ro", workspace.display()),
            "-v".into(),
            format!("{}:/poc:ro", poc_dir.display()),
            "-w".into(),
            "/work".into(),
            "-e".into(),
            "PYTHONPATH=/poc:/work".into(),
            self.image.clone(),
            "python".into(),
            "/poc/poc.py".into(),
        ]);
        a
    }
}

impl SandboxExecutor for ContainerSandbox {
    fn name(&self) -> &str {
        "container"
    }

    fn available(&self) -> Result<(), SandboxError> {
        let status = Command::new(&self.engine)
            .args(["version", "--format", "{{.Server.Version}}"])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| SandboxError::Unavailable(format!("{}: {e}", self.engine)))?;
        if status.success() {
            Ok(())
        } else {
            Err(SandboxError::Unavailable(format!("{} daemon not reachable", self.engine)))
        }
    }

    fn run(&self, job: &PocJob<'_>) -> Result<SandboxRun, SandboxError> {
        let dir = tempfile::tempdir().map_err(|e| SandboxError::Failed(e.to_string()))?;
        std::fs::write(dir.path().join("poc.py"), job.script).map_err(|e| SandboxError::Failed(e.to_string()))?;
        std::fs::write(dir.path().join("sitecustomize.py"), SINK_INSTRUMENTATION)
            .map_err(|e| SandboxError::Failed(e.to_string()))?;
        let mut child = Command::new(&self.engine)
            .args(self.args(job.workspace, dir.path()))
            .stdin(Stdio::null())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("{}: {e}", self.engine)))?;
        let mut stdout = child.stdout.take().expect("piped");
        let mut stderr = child.stderr.take().expect("piped");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stdout.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = stderr.read_to_string(&mut s);
            s
        });
        let started = Instant::now();
        let (exit_code, timed_out) = loop {
            match child.try_wait() {
                Ok(Some(status)) => break (status.code(), false),
                Ok(None) if started.elapsed() > job.timeout => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break (None, true);
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(50)),
                Err(e) => return Err(SandboxError::Failed(e.to_string())),
            }
        };
        let mut log = out_reader.join().unwrap_or_default();
        log.push_str(&err_reader.join().unwrap_or_default());
        if timed_out {
            log.push_str(&format!("\n[killed after {:?}]", job.timeout));
        }
        Ok(SandboxRun { exit_code, log })
    }
}

pub fn outcome_of(run: &SandboxRun) -> PocOutcome {
    if run.log.contains(SINK_MARKER) {
        PocOutcome::ReachedSink
    } else if run.log.contains(BLOCKED_MARKER) {
        PocOutcome::Blocked
    } else {
        PocOutcome::Error
    }
}

fn tail(s: &str) -> &str {
    let n = s.chars().count();
    if n <= LOG_TAIL_CHARS {
        return s;
    }
    let skip = s.char_indices().nth(n - LOG_TAIL_CHARS).map(|(i, _)| i).unwrap_or(0);
    &s[skip..]
}

fn parse_script(v: &Value) -> Result<(String, String), String> {
    let description = v
        .get("description")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing `description`")?;
    let script = v
        .get("script")
        .and_then(Value::as_str)
        .filter(|s| !s.trim().is_empty())
        .ok_or("missing `script`")?;
    Ok((description.to_string(), script.to_string()))
}

fn poc_prompt(candidate: &Candidate, previous: Option<(&PocAttempt, &str)>) -> String {
    let mut s = format!(
        "Write a minimal Python script that drives the target code along the path below until it calls `{}` at {}:{}-{}. \
The checkout is the working directory and is on sys.path. Sinks are instrumented: reaching one prints {SINK_MARKER}. \
Do not build a real payload; a harmless placeholder argument is enough. If the code rejects the input through a \
validation or sanitization step, print {BLOCKED_MARKER}. Reply with JSON {{\"description\": <one line>, \"script\": <python source>}}.\n\nPath:\n",
        candidate.sink, candidate.location.file, candidate.location.start_line, candidate.location.end_line
    );
    for st in &candidate.path_narrative {
        s.push_str(&format!("- [{}] {}::{} {}\n", st.role, st.file, st.function, st.description));
    }
    if let Some((attempt, log)) = previous {
        s.push_str(&format!(
            "\nThe previous attempt ({}) ended with {:?}. Its log:\n```\n{}\n```\nFix the script.",
            attempt.description,
            attempt.outcome,
            tail(log)
        ));
    }
    s
}

pub struct PocSettings<'a> {
    pub max_attempts: u32,
    pub workspace: &'a Path,
    pub timeout: Duration,
    /// Sandbox logs are kept here when set.
    pub log_dir: Option<&'a Path>,
}

/// Generates and runs up to `max_attempts` PoC scripts, stopping at the first
/// that reaches the sink. `Ok(None)` when the conclusion does not call for a
/// PoC or the sandbox is unavailable.
pub fn attempt_poc(
    candidate: &Candidate,
    conclusion: &Conclusion,
    sandbox: &dyn SandboxExecutor,
    gateway: &Gateway,
    settings: &PocSettings<'_>,
) -> Result<(Option<PocRecord>, Usage), VerificationError> {
    let mut usage = Usage::default();
    if !matches!(
        conclusion.kind,
        ConclusionKind::Exploitable | ConclusionKind::ConditionallyExploitable
    ) {
        return Ok((None, usage));
    }
    if let Err(e) = sandbox.available() {
        warn!("{e}; keeping the static conclusion");
        return Ok((None, usage));
    }
    let mut record = PocRecord {
        attempts: Vec::new(),
        max_attempts: settings.max_attempts,
    };
    let mut last_log = String::new();
    for n in 1..=settings.max_attempts {
        let previous = record.attempts.last().map(|a| (a, last_log.as_str()));
        let messages = [Message::user(poc_prompt(candidate, previous))];
        let ((description, script), u) =
            gateway.complete_structured(Stage::Verification, POC_PROMPT_ID, &messages, parse_script)?;
        usage.add(u);
        let job = PocJob {
            workspace: settings.workspace,
            script: &script,
            timeout: settings.timeout,
        };
        let run = match sandbox.run(&job) {
            Ok(r) => r,
            Err(SandboxError::Unavailable(msg)) if record.attempts.is_empty() => {
                warn!("sandbox unavailable: {msg}; keeping the static conclusion");
                return Ok((None, usage));
            }
            Err(e) => SandboxRun {
                exit_code: None,
                log: e.to_string(),
            },
        };
        let log_digest = hex::encode(Sha256::digest(run.log.as_bytes()));
        let log_path = match settings.log_dir {
            Some(dir) => Some(write_log(dir, &candidate.id, n, &script, &run)?),
            None => None,
        };
        let outcome = outcome_of(&run);
        record.attempts.push(PocAttempt {
            description,
            log_digest,
            outcome,
            log_path: log_path.map(|p| p.display().to_string()),
        });
        last_log = run.log;
        if outcome == PocOutcome::ReachedSink {
            break;
        }
    }
    Ok((Some(record), usage))
}

fn write_log(dir: &Path, candidate: &str, attempt: u32, script: &str, run: &SandboxRun) -> Result<PathBuf, VerificationError> {
    std::fs::create_dir_all(dir).map_err(|e| VerificationError::Io(format!("{}: {e}", dir.display())))?;
    let path = dir.join(format!("{candidate}-attempt{attempt}.log"));
    let body = format!(
        "# script\n{script}\n# exit code: {:?}\n# log\n{}",
        run.exit_code, run.log
    );
    std::fs::write(&path, body).map_err(|e| VerificationError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Final conclusion after dynamic verification: blocked in every attempt
/// downgrades to non_exploitable; no attempt reaching the sink keeps the
/// conclusion at most conditionally exploitable.
pub fn apply_poc(mut conclusion: Conclusion, poc: &PocRecord) -> Conclusion {
    if poc.reached_sink() || poc.attempts.is_empty() {
        return conclusion;
    }
    if poc.attempts.iter().all(|a| a.outcome == PocOutcome::Blocked) {
        return Conclusion {
            kind: ConclusionKind::NonExploitable,
            rationale: format!(
                "{}; every PoC attempt was blocked by a protection on the path",
                conclusion.rationale
            ),
            preconditions: Vec::new(),
        };
    }
    let note = format!("PoC did not reach the sink in {} attempts", poc.attempts.len());
    if conclusion.kind == ConclusionKind::Exploitable {
        conclusion.kind = ConclusionKind::ConditionallyExploitable;
    }
    if conclusion.kind != ConclusionKind::ConditionallyExploitable {
        // Only conditional verdicts carry preconditions.
        conclusion.rationale = format!("{}; {note}", conclusion.rationale);
    } else if !conclusion.preconditions.contains(&note) {
        conclusion.preconditions.push(note);
    }
    conclusion
}
