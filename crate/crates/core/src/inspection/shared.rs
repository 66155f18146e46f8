use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::store::{self, StoreError, SCHEMA_VERSION};

/// Upper bound on one observation's length, in characters.
pub const MAX_OBSERVATION_CHARS: usize = 400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharedEntry {
    pub project: String,
    /// Module id the observation is about.
    pub scope: String,
    pub observation: String,
    pub run_id: String,
}

#[derive(Serialize, Deserialize)]
struct Line {
    schema_version: u32,
    #[serde(flatten)]
    entry: SharedEntry,
}

/// Append-only JSON-lines log of cross-run observations, one file per project.
pub struct SharedMemory {
    dir: PathBuf,
    writer: Mutex<()>,
}

impl SharedMemory {
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            writer: Mutex::new(()),
        }
    }

    fn path(&self, project: &str) -> PathBuf {
        self.dir.join(format!("{}.jsonl", store::sanitize_key(project)))
    }

    pub fn append(&self, entries: &[SharedEntry]) -> Result<(), StoreError> {
        let _guard = self.writer.lock().expect("shared memory writer poisoned");
        for e in entries {
            let path = self.path(&e.project);
            std::fs::create_dir_all(&self.dir).map_err(|err| StoreError::Io {
                path: self.dir.display().to_string(),
                source: err,
            })?;
            let mut entry = e.clone();
            entry.observation = entry.observation.chars().take(MAX_OBSERVATION_CHARS).collect();
            let line = serde_json::to_string(&Line {
                schema_version: SCHEMA_VERSION,
                entry,
            })
            .expect("entry serializes");
            let io = |err| StoreError::Io {
                path: path.display().to_string(),
                source: err,
            };
            let mut f = OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
            writeln!(f, "{line}").map_err(io)?;
        }
        Ok(())
    }

    /// Entries for a project, optionally narrowed to one scope, in append
    /// order. A torn final line from an interrupted write is ignored.
    pub fn read(&self, project: &str, scope: Option<&str>) -> Result<Vec<SharedEntry>, StoreError> {
        let path = self.path(project);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => {
                return Err(StoreError::Io {
                    path: path.display().to_string(),
                    source: e,
                })
            }
        };
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let mut out = Vec::new();
        for (i, raw) in lines.iter().enumerate() {
            let line: Line = match serde_json::from_str(raw) {
                Ok(l) => l,
                Err(_) if i + 1 == lines.len() && !text.ends_with('\n') => break,
                Err(e) => {
                    return Err(StoreError::Schema {
                        path: path.display().to_string(),
                        field: format!("line {}", i + 1),
                        message: e.to_string(),
                    })
                }
            };
            if line.schema_version != SCHEMA_VERSION {
                return Err(StoreError::Migration {
                    path: path.display().to_string(),
                    found: line.schema_version.into(),
                    expected: SCHEMA_VERSION,
                });
            }
            if scope.is_none_or(|s| s == line.entry.scope) {
                out.push(line.entry);
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(scope: &str, obs: &str) -> SharedEntry {
        SharedEntry {
            project: "demo".into(),
            scope: scope.into(),
            observation: obs.into(),
            run_id: "r1".into(),
        }
    }

    #[test]
    fn append_and_read_back_verbatim() {
        let dir = tempfile::tempdir().unwrap();
        let s = SharedMemory::new(dir.path());
        assert!(s.read("demo", None).unwrap().is_empty());
        s.append(&[entry("m1", "path flows from form field to torch.load"), entry("m2", "x")]).unwrap();
        s.append(&[entry("m1", "second")]).unwrap();
        let all = s.read("demo", None).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0], entry("m1", "path flows from form field to torch.load"));
        assert_eq!(s.read("demo", Some("m1")).unwrap().len(), 2);
    }

    #[test]
    fn torn_tail_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let s = SharedMemory::new(dir.path());
        s.append(&[entry("m1", "ok")]).unwrap();
        let p = dir.path().join("demo.jsonl");
        let mut f = OpenOptions::new().append(true).open(&p).unwrap();
        write!(f, "{{\"schema_version\": 1, \"proj").unwrap();
        assert_eq!(s.read("demo", None).unwrap().len(), 1);
    }

    #[test]
    fn long_observations_are_capped() {
        let dir = tempfile::tempdir().unwrap();
        let s = SharedMemory::new(dir.path());
        s.append(&[entry("m1", &"x".repeat(MAX_OBSERVATION_CHARS * 2))]).unwrap();
        assert_eq!(s.read("demo", None).unwrap()[0].observation.len(), MAX_OBSERVATION_CHARS);
    }
}
