use walkdir::WalkDir;

use super::checkout::path_to_slash;
use super::{CodeFactsError, RepoCheckout};

const VCS_DIRS: &[&str] = &[".git", ".hg", ".svn", ".bzr", "_darcs"];

const SOURCE_EXTENSIONS: &[&str] = &[
    "py", "pyi", "pyx", "js", "jsx", "ts", "tsx", "mjs", "sh", "bash", "go", "rs", "c", "cc",
    "cpp", "cxx", "h", "hpp", "cu", "java", "kt", "rb", "php", "lua", "scala", "swift",
];

pub fn is_python_file(rel: &str) -> bool {
    rel.ends_with(".py") || rel.ends_with(".pyi")
}

pub fn is_source_file(rel: &str) -> bool {
    rel.rsplit_once('.')
        .map(|(_, ext)| SOURCE_EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Enumerates files under the checkout (or `subdir`), lexicographically sorted,
/// skipping version-control metadata.
pub fn list_files(
    checkout: &RepoCheckout,
    subdir: Option<&str>,
) -> Result<Vec<String>, CodeFactsError> {
    let base = match subdir {
        Some(sd) => {
            let path = checkout.resolve(sd)?;
            if !path.exists() {
                return Err(CodeFactsError::EmptyScope(sd.to_string()));
            }
            path
        }
        None => checkout.root_path.clone(),
    };
    if base.is_file() {
        let rel = base.strip_prefix(&checkout.root_path).unwrap_or(&base);
        return Ok(vec![path_to_slash(rel)]);
    }
    let mut out = Vec::new();
    let walker = WalkDir::new(&base)
        .follow_links(false)
        .into_iter()
        .filter_entry(|e| {
            !(e.file_type().is_dir()
                && VCS_DIRS.contains(&e.file_name().to_string_lossy().as_ref()))
        });
    for entry in walker {
        let entry = entry.map_err(|e| {
            let path = e.path().map(|p| p.to_path_buf()).unwrap_or_default();
            CodeFactsError::io(&path, e.into())
        })?;
        if !entry.file_type().is_file() {
            continue;
        }
        let rel = entry
            .path()
            .strip_prefix(&checkout.root_path)
            .unwrap_or(entry.path());
        out.push(path_to_slash(rel));
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn fixture() -> (tempfile::TempDir, RepoCheckout) {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.py"), "x = 1\n").unwrap();
        fs::create_dir_all(dir.path().join("src")).unwrap();
        fs::write(dir.path().join("src/b.py"), "y = 2\n").unwrap();
        fs::create_dir_all(dir.path().join(".git/objects")).unwrap();
        fs::write(dir.path().join(".git/HEAD"), "ref: x\n").unwrap();
        let co = RepoCheckout::new(dir.path(), "demo", "abc").unwrap();
        (dir, co)
    }

    #[test]
    fn full_enumeration_skips_vcs() {
        let (_d, co) = fixture();
        assert_eq!(list_files(&co, None).unwrap(), vec!["a.py", "src/b.py"]);
    }

    #[test]
    fn subdir_filter() {
        let (_d, co) = fixture();
        assert_eq!(list_files(&co, Some("src")).unwrap(), vec!["src/b.py"]);
    }

    #[test]
    fn traversal_and_missing_scope() {
        let (_d, co) = fixture();
        assert!(matches!(
            list_files(&co, Some("../etc")),
            Err(CodeFactsError::PathOutsideCheckout(_))
        ));
        assert!(matches!(
            list_files(&co, Some("nope")),
            Err(CodeFactsError::EmptyScope(_))
        ));
    }

    #[test]
    fn source_extension_filter() {
        assert!(is_source_file("a/b.py"));
        assert!(is_source_file("x.SH"));
        assert!(!is_source_file("README.md"));
        assert!(!is_source_file("Makefile"));
    }
}
