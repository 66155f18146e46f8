//! Run configuration: flags > environment > config file > defaults.
//!
//! Flags and their environment variables are handled by clap; this module
//! layers the result over the optional TOML file.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use refscan_core::similarity::{DEFAULT_TAU_M, KEEP_THRESHOLD, MIN_PASSING, SUPPLEMENT_TOP_K};
use refscan_core::verification::DEFAULT_MAX_ATTEMPTS;
use serde::Deserialize;

use crate::error::CliError;

pub const DEFAULT_CONFIG_FILE: &str = "refscan.toml";
pub const DEFAULT_STATE_DIR: &str = ".refscan";
pub const DEFAULT_CONTEXT_WINDOW: usize = 32_768;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SandboxMode {
    Container,
    Fake,
    Off,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendConfig {
    /// Scripted replay file; takes precedence over `url`.
    pub script: Option<PathBuf>,
    pub url: Option<String>,
    pub model: Option<String>,
    pub api_key: Option<String>,
    pub context_window: usize,
    pub fallback_url: Option<String>,
    pub fallback_model: Option<String>,
    pub timeout_secs: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingConfig {
    pub url: Option<String>,
    pub model: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub state_dir: PathBuf,
    pub backend: BackendConfig,
    pub embedding: EmbeddingConfig,
    pub tau_m: f64,
    pub keep_threshold: f64,
    pub min_passing: usize,
    pub supplement_size: usize,
    pub max_iterations: u32,
    pub turn_budget: usize,
    pub poc_max_attempts: u32,
    pub poc_timeout_secs: u64,
    pub sandbox: SandboxMode,
    pub fake_sandbox_script: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            state_dir: PathBuf::from(DEFAULT_STATE_DIR),
            backend: BackendConfig {
                script: None,
                url: None,
                model: None,
                api_key: None,
                context_window: DEFAULT_CONTEXT_WINDOW,
                fallback_url: None,
                fallback_model: None,
                timeout_secs: 120,
            },
            embedding: EmbeddingConfig { url: None, model: None },
            tau_m: DEFAULT_TAU_M,
            keep_threshold: KEEP_THRESHOLD,
            min_passing: MIN_PASSING,
            supplement_size: SUPPLEMENT_TOP_K,
            max_iterations: 3,
            turn_budget: 40,
            poc_max_attempts: DEFAULT_MAX_ATTEMPTS,
            poc_timeout_secs: 120,
            sandbox: SandboxMode::Off,
            fake_sandbox_script: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        for (name, v) in [("tau_m", self.tau_m), ("keep_threshold", self.keep_threshold)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(CliError::Config(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        if self.max_iterations < 1 {
            return Err(CliError::Config("max_iterations must be at least 1".into()));
        }
        if self.turn_budget < 1 {
            return Err(CliError::Config("turn_budget must be at least 1".into()));
        }
        if self.supplement_size < 1 {
            return Err(CliError::Config("supplement_size must be at least 1".into()));
        }
        if self.poc_max_attempts < 1 {
            return Err(CliError::Config("poc_max_attempts must be at least 1".into()));
        }
        if self.backend.context_window < 1024 {
            return Err(CliError::Config("backend.context_window must be at least 1024".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    state_dir: Option<PathBuf>,
    tau_m: Option<f64>,
    keep_threshold: Option<f64>,
    min_passing: Option<usize>,
    supplement_size: Option<usize>,
    max_iterations: Option<u32>,
    turn_budget: Option<usize>,
    #[serde(default)]
    backend: FileBackend,
    #[serde(default)]
    embedding: FileEmbedding,
    #[serde(default)]
    verification: FileVerification,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBackend {
    script: Option<PathBuf>,
    url: Option<String>,
    model: Option<String>,
    /// Name of the environment variable holding the API key.
    api_key_env: Option<String>,
    context_window: Option<usize>,
    fallback_url: Option<String>,
    fallback_model: Option<String>,
    timeout_secs: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileEmbedding {
    url: Option<String>,
    model: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileVerification {
    sandbox: Option<SandboxMode>,
    fake_script: Option<PathBuf>,
    max_attempts: Option<u32>,
    timeout_secs: Option<u64>,
}

/// Global options shared by every subcommand.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Config file (default: ./refscan.toml when present)
    #[arg(long, global = true, env = "REFSCAN_CONFIG")]
    pub config: Option<PathBuf>,
    /// State directory holding profiles, memories, findings and reports
    #[arg(long, global = true, env = "REFSCAN_STATE_DIR")]
    pub state_dir: Option<PathBuf>,
    /// Scripted backend replay file (offline runs and tests)
    #[arg(long, global = true, env = "REFSCAN_SCRIPT")]
    pub script: Option<PathBuf>,
    /// OpenAI-compatible chat endpoint base URL
    #[arg(long, global = true, env = "REFSCAN_LLM_URL")]
    pub llm_url: Option<String>,
    #[arg(long, global = true, env = "REFSCAN_LLM_MODEL")]
    pub llm_model: Option<String>,
    #[arg(long, global = true, env = "REFSCAN_LLM_API_KEY", hide_env_values = true)]
    pub llm_api_key: Option<String>,
    #[arg(long, global = true, env = "REFSCAN_CONTEXT_WINDOW")]
    pub context_window: Option<usize>,
    /// Embedding endpoint; the built-in hashing embedder is used when unset
    #[arg(long, global = true, env = "REFSCAN_EMBED_URL")]
    pub embed_url: Option<String>,
    #[arg(long, global = true, env = "REFSCAN_EMBED_MODEL")]
    pub embed_model: Option<String>,
    /// Module promotion threshold
    #[arg(long, global = true, env = "REFSCAN_TAU_M")]
    pub tau_m: Option<f64>,
    /// Overall similarity a target needs to be kept
    #[arg(long, global = true, env = "REFSCAN_KEEP_THRESHOLD")]
    pub keep_threshold: Option<f64>,
    /// Number of most similar targets taken when too few pass the threshold
    #[arg(long, global = true, env = "REFSCAN_SUPPLEMENT_SIZE")]
    pub supplement_size: Option<usize>,
    #[arg(long, global = true, env = "REFSCAN_MAX_ITERATIONS")]
    pub max_iterations: Option<u32>,
    /// Tool calls per inspection iteration
    #[arg(long, global = true, env = "REFSCAN_TURN_BUDGET")]
    pub turn_budget: Option<usize>,
    #[arg(long, global = true, env = "REFSCAN_POC_MAX_ATTEMPTS")]
    pub poc_max_attempts: Option<u32>,
    #[arg(long, global = true, value_enum, env = "REFSCAN_SANDBOX")]
    pub sandbox: Option<SandboxMode>,
    /// Scripted outcomes for `--sandbox fake`
    #[arg(long, global = true, env = "REFSCAN_FAKE_SANDBOX")]
    pub fake_script: Option<PathBuf>,
}

fn resolve(base: &Path, p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        base.join(p)
    }
}

fn read_file_config(path: &Path) -> Result<FileConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut fc: FileConfig =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    // Paths in the file are relative to the file itself.
    let base = path.parent().unwrap_or(Path::new("."));
    fc.state_dir = fc.state_dir.map(|p| resolve(base, p));
    fc.backend.script = fc.backend.script.map(|p| resolve(base, p));
    fc.verification.fake_script = fc.verification.fake_script.map(|p| resolve(base, p));
    Ok(fc)
}

pub fn load(o: &Overrides) -> Result<RunConfig, CliError> {
    let fc = match &o.config {
        Some(p) => read_file_config(p)?,
        None if Path::new(DEFAULT_CONFIG_FILE).is_file() => read_file_config(Path::new(DEFAULT_CONFIG_FILE))?,
        None => FileConfig::default(),
    };
    let d = RunConfig::default();
    let api_key = match (&o.llm_api_key, &fc.backend.api_key_env) {
        (Some(k), _) => Some(k.clone()),
        (None, Some(var)) => std::env::var(var).ok(),
        (None, None) => None,
    };
    let cfg = RunConfig {
        state_dir: o.state_dir.clone().or(fc.state_dir).unwrap_or(d.state_dir),
        backend: BackendConfig {
            script: o.script.clone().or(fc.backend.script),
            url: o.llm_url.clone().or(fc.backend.url),
            model: o.llm_model.clone().or(fc.backend.model),
            api_key,
            context_window: o
                .context_window
                .or(fc.backend.context_window)
                .unwrap_or(d.backend.context_window),
            fallback_url: fc.backend.fallback_url,
            fallback_model: fc.backend.fallback_model,
            timeout_secs: fc.backend.timeout_secs.unwrap_or(d.backend.timeout_secs),
        },
        embedding: EmbeddingConfig {
            url: o.embed_url.clone().or(fc.embedding.url),
            model: o.embed_model.clone().or(fc.embedding.model),
        },
        tau_m: o.tau_m.or(fc.tau_m).unwrap_or(d.tau_m),
        keep_threshold: o.keep_threshold.or(fc.keep_threshold).unwrap_or(d.keep_threshold),
        min_passing: fc.min_passing.unwrap_or(d.min_passing),
        supplement_size: o.supplement_size.or(fc.supplement_size).unwrap_or(d.supplement_size),
        max_iterations: o.max_iterations.or(fc.max_iterations).unwrap_or(d.max_iterations),
        turn_budget: o.turn_budget.or(fc.turn_budget).unwrap_or(d.turn_budget),
        poc_max_attempts: o
            .poc_max_attempts
            .or(fc.verification.max_attempts)
            .unwrap_or(d.poc_max_attempts),
        poc_timeout_secs: fc.verification.timeout_secs.unwrap_or(d.poc_timeout_secs),
        sandbox: o.sandbox.or(fc.verification.sandbox).unwrap_or(d.sandbox),
        fake_sandbox_script: o.fake_script.clone().or(fc.verification.fake_script),
    };
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("refscan.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_validate() {
        let c = RunConfig::default();
        assert_eq!((c.tau_m, c.keep_threshold, c.supplement_size, c.max_iterations), (0.8, 0.5, 5, 3));
        c.validate().unwrap();
    }

    #[test]
    fn flags_beat_file_and_file_beats_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "tau_m = 0.7\nmax_iterations = 2\n[backend]\nscript = \"s.json\"\n");
        let o = Overrides {
            config: Some(p),
            tau_m: Some(0.9),
            ..Default::default()
        };
        let c = load(&o).unwrap();
        assert_eq!(c.tau_m, 0.9);
        assert_eq!(c.max_iterations, 2);
        assert_eq!(c.backend.script, Some(dir.path().join("s.json")));
        assert_eq!(c.turn_budget, 40);
    }

    #[test]
    fn out_of_range_threshold_is_a_config_error() {
        let o = Overrides {
            keep_threshold: Some(1.5),
            config: Some(write(tempfile::tempdir().unwrap().path(), "")),
            ..Default::default()
        };
        assert!(matches!(load(&o), Err(CliError::Config(_))));
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            config: Some(write(dir.path(), "max_iterations = 0\n")),
            ..Default::default()
        };
        assert!(matches!(load(&o), Err(CliError::Config(m)) if m.contains("max_iterations")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let o = Overrides {
            config: Some(write(dir.path(), "tau = 0.8\n")),
            ..Default::default()
        };
        assert!(matches!(load(&o), Err(CliError::Config(m)) if m.contains("tau")));
    }
}
