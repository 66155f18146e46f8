//! On-disk state layout and the process lock.

use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use refscan_core::llm::LedgerSnapshot;
use refscan_core::similarity::TargetSelection;
use refscan_core::store::{self, StoreError};

use crate::error::CliError;

const LOCK_FILE: &str = ".lock";
const LEDGER_KIND: &str = "token-ledger";
const SELECTION_KIND: &str = "target-selection";

pub struct Lock {
    path: PathBuf,
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct State {
    root: PathBuf,
    _lock: Lock,
}

impl State {
    /// Creates the layout if needed and takes the lock.
    pub fn open(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root).map_err(|e| CliError::Other(format!("cannot create {}: {e}", root.display())))?;
        let path = root.join(LOCK_FILE);
        let mut f = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                return Err(CliError::Locked(format!("{} ({})", path.display(), holder.trim())));
            }
            Err(e) => return Err(CliError::Other(format!("cannot create {}: {e}", path.display()))),
        };
        let _ = writeln!(f, "pid {}", std::process::id());
        Ok(Self {
            root: root.to_path_buf(),
            _lock: Lock { path },
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn profiles(&self) -> PathBuf {
        self.root.join("profiles")
    }

    pub fn vulns(&self) -> PathBuf {
        self.root.join("vulns")
    }

    pub fn memory(&self) -> PathBuf {
        self.root.join("memory")
    }

    pub fn shared(&self) -> PathBuf {
        self.root.join("shared")
    }

    pub fn findings(&self) -> PathBuf {
        self.root.join("findings")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn selection_path(&self, advisory: &str) -> PathBuf {
        self.root
            .join("selections")
            .join(format!("{}.json", store::sanitize_key(advisory)))
    }

    pub fn save_selection(&self, advisory: &str, sel: &TargetSelection) -> Result<(), StoreError> {
        store::write_document(&self.selection_path(advisory), SELECTION_KIND, sel)
    }

    pub fn load_selection(&self, advisory: &str) -> Result<Option<TargetSelection>, StoreError> {
        let p = self.selection_path(advisory);
        if !p.exists() {
            return Ok(None);
        }
        store::read_document(&p, SELECTION_KIND).map(Some)
    }

    pub fn profile_ledger(&self, project: &str, commit: &str) -> PathBuf {
        self.root
            .join("ledger/profiles")
            .join(format!("{}.json", store::revision_key(project, commit)))
    }

    pub fn stage_ledger(&self, advisory: &str, stage: &str, target: Option<(&str, &str)>) -> PathBuf {
        let name = match target {
            Some((p, c)) => format!("{stage}-{}.json", store::revision_key(p, c)),
            None => format!("{stage}.json"),
        };
        self.root.join("ledger").join(store::sanitize_key(advisory)).join(name)
    }

    pub fn load_ledger(&self, path: &Path) -> Result<LedgerSnapshot, StoreError> {
        if !path.exists() {
            return Ok(LedgerSnapshot::default());
        }
        store::read_document(path, LEDGER_KIND)
    }

    /// Ledgers accumulate across runs of the same stage.
    pub fn add_ledger(&self, path: &Path, snap: &LedgerSnapshot) -> Result<(), StoreError> {
        let mut acc = self.load_ledger(path)?;
        acc.merge(snap);
        store::write_document(path, LEDGER_KIND, &acc)
    }
}
