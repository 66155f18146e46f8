use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SinkCategory {
    Deserialization,
    ShellExecution,
    CodeEvaluation,
    TemplateRendering,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RiskySink {
    pub api: &'static str,
    /// Import root that must be present for the sink to be reachable.
    pub package: &'static str,
    pub category: SinkCategory,
}

const fn sink(api: &'static str, package: &'static str, category: SinkCategory) -> RiskySink {
    RiskySink { api, package, category }
}

use SinkCategory::*;

pub const RISKY_SINKS: &[RiskySink] = &[
    sink("torch.load", "torch", Deserialization),
    sink("pickle.load", "pickle", Deserialization),
    sink("pickle.loads", "pickle", Deserialization),
    sink("cPickle.loads", "cPickle", Deserialization),
    sink("dill.load", "dill", Deserialization),
    sink("dill.loads", "dill", Deserialization),
    sink("cloudpickle.load", "cloudpickle", Deserialization),
    sink("joblib.load", "joblib", Deserialization),
    sink("yaml.load", "yaml", Deserialization),
    sink("yaml.unsafe_load", "yaml", Deserialization),
    sink("numpy.load", "numpy", Deserialization),
    sink("np.load", "numpy", Deserialization),
    sink("marshal.loads", "marshal", Deserialization),
    sink("shelve.open", "shelve", Deserialization),
    sink("os.system", "os", ShellExecution),
    sink("os.popen", "os", ShellExecution),
    sink("subprocess.run", "subprocess", ShellExecution),
    sink("subprocess.call", "subprocess", ShellExecution),
    sink("subprocess.check_call", "subprocess", ShellExecution),
    sink("subprocess.check_output", "subprocess", ShellExecution),
    sink("subprocess.Popen", "subprocess", ShellExecution),
    sink("eval", "builtins", CodeEvaluation),
    sink("exec", "builtins", CodeEvaluation),
    sink("jinja2.Template", "jinja2", TemplateRendering),
    sink("Environment.from_string", "jinja2", TemplateRendering),
    sink("mako.template.Template", "mako", TemplateRendering),
];

/// Catalog entry for a sink as written in a candidate, e.g. `os.system` or
/// `subprocess.run(shell=True)`. Matches on the dotted name or its suffix.
pub fn lookup_sink(api: &str) -> Option<&'static RiskySink> {
    let name = sink_name(api);
    RISKY_SINKS
        .iter()
        .find(|s| s.api == name)
        .or_else(|| RISKY_SINKS.iter().find(|s| name.ends_with(&format!(".{}", s.api))))
}

/// The dotted callee part of a sink description.
pub fn sink_name(api: &str) -> &str {
    api.split(|c: char| c == '(' || c.is_whitespace()).next().unwrap_or("").trim()
}

/// Last identifier of the sink, the token expected on the sink line.
pub fn sink_token(api: &str) -> &str {
    sink_name(api).rsplit('.').next().unwrap_or("")
}

/// Regexes for protections that neutralize a sink of the given category.
pub fn guard_patterns(category: Option<SinkCategory>) -> Vec<&'static str> {
    const PATH: &[&str] = &[r"os\.path\.basename\(", r"secure_filename\("];
    let Some(category) = category else {
        let all = [Deserialization, ShellExecution, CodeEvaluation, TemplateRendering];
        let mut out: Vec<&str> = all.into_iter().flat_map(|c| guard_patterns(Some(c))).collect();
        out.sort_unstable();
        out.dedup();
        return out;
    };
    let specific: &[&str] = match category {
        Deserialization => &[
            r"weights_only\s*=\s*True",
            r"\bsafe_load\(",
            r"SafeLoader",
            r"safetensors",
            r"RestrictedUnpickler|restricted_loads",
            r"allow_pickle\s*=\s*False",
        ],
        ShellExecution => &[
            r"shlex\.quote\(",
            r"pipes\.quote\(",
            r"\bALLOWED_[A-Z_]+\b",
            r"(?i)\ballow_?list\b|\bwhitelist\b",
            r"\.fullmatch\(",
        ],
        CodeEvaluation => &[r"ast\.literal_eval\("],
        TemplateRendering => &[r"SandboxedEnvironment", r"autoescape\s*=\s*True", r"markupsafe\.escape\("],
    };
    specific.iter().chain(PATH).copied().collect()
}

/// Regexes suggesting a function consumes attacker-controllable input.
pub const INPUT_INDICATORS: &[&str] = &[
    r"\brequest\.",
    r"\binput\(",
    r"sys\.argv",
    r"argparse",
    r"os\.environ",
    r"\bgr\.",
    r"\bst\.",
    r"@\w+\.(route|get|post|put|websocket)\(",
    r"@click\.",
    r"\bUploadFile\b",
    r"(?i)\b(upload|user_input|form|query|payload)\b",
];
