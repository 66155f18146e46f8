use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const ADV: &str = "IMGSTUDIO-2024-001";

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().unwrap()
}

fn fx(rel: &str) -> String {
    fixtures().join(rel).display().to_string()
}

fn run(state: &Path, script: Option<&Path>, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_refscan"));
    cmd.args(args)
        .current_dir(fixtures())
        .env("REFSCAN_STATE_DIR", state)
        .env_remove("REFSCAN_CONFIG")
        .env_remove("REFSCAN_SCRIPT")
        .env_remove("REFSCAN_LLM_URL")
        .env_remove("REFSCAN_EMBED_URL")
        .env_remove("REFSCAN_TAU_M")
        .env_remove("REFSCAN_SANDBOX");
    if let Some(s) = script {
        cmd.env("REFSCAN_SCRIPT", s);
    }
    cmd.output().unwrap()
}

fn scripted(state: &Path, args: &[&str]) -> Output {
    run(state, Some(&fixtures().join("scripts/pipeline.json")), args)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}\n{}", o.status.code(), stdout(&o), stderr(&o));
    stdout(&o)
}

fn profile_reference(state: &Path) {
    ok(scripted(state, &["profile", &fx("reference/imgstudio"), "--project", "imgstudio", "--commit", "v1"]));
}

#[test]
fn later_stages_refuse_to_run_without_their_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path();
    let o = scripted(state, &["select", ADV]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("extract-vuln"), "{}", stderr(&o));

    let o = scripted(state, &["extract-vuln", &fx("advisories/IMGSTUDIO-2024-001.toml")]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("profile"), "{}", stderr(&o));

    let o = scripted(state, &["verify", ADV, "--target", "renderhub@v2"]);
    assert_eq!(o.status.code(), Some(5));
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = fx("reference/imgstudio");
    let args = ["profile", path.as_str(), "--project", "imgstudio", "--commit", "v1"];

    let o = run(dir.path(), None, &args);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = Command::new(env!("CARGO_BIN_EXE_refscan"))
        .args(args)
        .env("REFSCAN_STATE_DIR", dir.path())
        .env("REFSCAN_SCRIPT", fixtures().join("scripts/pipeline.json"))
        .env("REFSCAN_TAU_M", "1.5")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));

    let o = scripted(dir.path(), &["inspect", ADV, "--target", "renderhub"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn a_held_lock_blocks_a_second_process() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join(".lock"), "pid 1").unwrap();
    let o = scripted(dir.path(), &["report", ADV]);
    assert_eq!(o.status.code(), Some(6), "{}", stderr(&o));
}

#[test]
fn cached_profile_needs_no_backend() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path();
    profile_reference(state);
    let ledger = state.join("ledger/profiles/imgstudio@v1.json");
    let before = std::fs::read(&ledger).unwrap();

    // No backend is configured at all; a cache hit must not need one.
    let out = ok(run(state, None, &["profile", &fx("reference/imgstudio"), "--project", "imgstudio", "--commit", "v1"]));
    assert!(out.contains("cached"), "{out}");
    assert_eq!(std::fs::read(&ledger).unwrap(), before);
}

#[test]
fn empty_selection_is_reported_explicitly() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path();
    profile_reference(state);
    ok(scripted(state, &["extract-vuln", &fx("advisories/IMGSTUDIO-2024-001.toml")]));
    let out = ok(scripted(state, &["select", ADV]));
    assert!(out.to_lowercase().contains("empty"), "{out}");
    let out = ok(scripted(state, &["inspect", ADV]));
    assert!(out.contains("the selection is empty"), "{out}");
}

#[test]
fn report_lists_missing_stages_and_matches_its_json() {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path();
    profile_reference(state);
    for (path, commit) in [("targets/renderhub", "v2"), ("targets/renderhub-patched", "v2-patched")] {
        ok(scripted(state, &["profile", &fx(path), "--project", "renderhub", "--commit", commit]));
    }
    ok(scripted(state, &["extract-vuln", &fx("advisories/IMGSTUDIO-2024-001.toml")]));
    ok(scripted(state, &["select", ADV]));
    ok(scripted(state, &["inspect", ADV, "--target", "renderhub@v2"]));

    let out = ok(scripted(state, &["report", ADV]));
    assert!(out.contains("renderhub@v2 missing: verify"), "{out}");
    assert!(out.contains("renderhub@v2-patched missing: inspect, verify"), "{out}");

    let fake = fx("sandbox/reached.json");
    ok(scripted(state, &["verify", ADV, "--target", "renderhub@v2", "--sandbox", "fake", "--fake-script", &fake]));
    // A second verify reuses the stored findings.
    let again = ok(scripted(state, &["verify", ADV, "--target", "renderhub@v2", "--sandbox", "fake", "--fake-script", &fake]));
    assert!(again.contains("cached findings"), "{again}");

    ok(scripted(state, &["report", ADV]));
    let dir = state.join("reports").join(ADV);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("consolidated.json")).unwrap()).unwrap();
    let body = &json["body"];
    let md = std::fs::read_to_string(dir.join("consolidated.md")).unwrap();
    let totals = md.lines().find(|l| l.starts_with("Totals:")).unwrap();
    let mut fields = std::collections::BTreeMap::new();
    for kv in totals.trim_start_matches("Totals:").split_whitespace() {
        let (k, v) = kv.split_once('=').unwrap();
        fields.insert(k.to_string(), v.parse::<u64>().unwrap());
    }
    assert_eq!(fields["findings"], body["total_findings"].as_u64().unwrap());
    assert_eq!(fields["unverifiable"], body["unverifiable"].as_u64().unwrap());
    for (kind, n) in body["counts"].as_object().unwrap() {
        assert_eq!(fields[kind], n.as_u64().unwrap(), "{kind}");
    }
    assert_eq!(fields["exploitable"], 1);
    let sarif: Value = serde_json::from_str(&std::fs::read_to_string(dir.join("consolidated.sarif")).unwrap()).unwrap();
    assert_eq!(sarif["version"], "2.1.0");
}
