use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CodeFactsError;

/// A read-only repository revision on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepoCheckout {
    pub root_path: PathBuf,
    pub project_name: String,
    pub commit_id: String,
}

impl RepoCheckout {
    pub fn new(
        root_path: impl Into<PathBuf>,
        project_name: impl Into<String>,
        commit_id: impl Into<String>,
    ) -> Result<Self, CodeFactsError> {
        let root_path = root_path.into();
        let project_name = project_name.into();
        let commit_id = commit_id.into();
        if !root_path.is_dir() {
            return Err(CodeFactsError::InvalidCheckout(format!(
                "{} is not a directory",
                root_path.display()
            )));
        }
        if commit_id.trim().is_empty() {
            return Err(CodeFactsError::InvalidCheckout("commit id is empty".into()));
        }
        if project_name.trim().is_empty() {
            return Err(CodeFactsError::InvalidCheckout("project name is empty".into()));
        }
        Ok(Self {
            root_path,
            project_name,
            commit_id,
        })
    }

    /// `project@commit`, the key used by every persisted artifact.
    pub fn key(&self) -> String {
        format!("{}@{}", self.project_name, self.commit_id)
    }

    /// Maps a repo-relative path onto the filesystem, rejecting anything that
    /// would escape the checkout root.
    pub fn resolve(&self, rel: &str) -> Result<PathBuf, CodeFactsError> {
        let normalized = normalize_relative(rel)?;
        let joined = self.root_path.join(&normalized);
        if joined.exists() {
            let root = self
                .root_path
                .canonicalize()
                .map_err(|e| CodeFactsError::io(&self.root_path, e))?;
            let real = joined
                .canonicalize()
                .map_err(|e| CodeFactsError::io(&joined, e))?;
            if !real.starts_with(&root) {
                return Err(CodeFactsError::PathOutsideCheckout(rel.to_string()));
            }
        }
        Ok(joined)
    }

    /// Normalized repo-relative form (forward slashes, no `.` segments).
    pub fn relative(&self, rel: &str) -> Result<String, CodeFactsError> {
        let p = normalize_relative(rel)?;
        Ok(path_to_slash(&p))
    }

    pub fn read_to_string(&self, rel: &str) -> Result<String, CodeFactsError> {
        let path = self.resolve(rel)?;
        let bytes = std::fs::read(&path).map_err(|e| CodeFactsError::io(&path, e))?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    pub fn file_exists(&self, rel: &str) -> bool {
        self.resolve(rel).map(|p| p.is_file()).unwrap_or(false)
    }

    /// Content digest over every file (path + bytes), used to assert that
    /// analysis never mutates the checkout.
    pub fn tree_digest(&self) -> Result<String, CodeFactsError> {
        let mut hasher = Sha256::new();
        for rel in super::list_files(self, None)? {
            let path = self.root_path.join(&rel);
            let bytes = std::fs::read(&path).map_err(|e| CodeFactsError::io(&path, e))?;
            hasher.update(rel.as_bytes());
            hasher.update([0u8]);
            hasher.update((bytes.len() as u64).to_le_bytes());
            hasher.update(&bytes);
        }
        Ok(hex::encode(hasher.finalize()))
    }
}

fn normalize_relative(rel: &str) -> Result<PathBuf, CodeFactsError> {
    let path = Path::new(rel);
    let mut out = PathBuf::new();
    for comp in path.components() {
        match comp {
            Component::Normal(c) => out.push(c),
            Component::CurDir => {}
            Component::ParentDir => {
                if !out.pop() {
                    return Err(CodeFactsError::PathOutsideCheckout(rel.to_string()));
                }
            }
            Component::RootDir | Component::Prefix(_) => {
                return Err(CodeFactsError::PathOutsideCheckout(rel.to_string()))
            }
        }
    }
    Ok(out)
}

pub(crate) fn path_to_slash(p: &Path) -> String {
    p.components()
        .filter_map(|c| match c {
            Component::Normal(s) => Some(s.to_string_lossy().into_owned()),
            _ => None,
        })
        .collect::<Vec<_>>()
        .join("/")
}
