use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};
use tree_sitter::{Node, Parser, Tree};

use super::files::is_python_file;
use super::{CodeFactsError, RepoCheckout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionKind {
    Function,
    Method,
    Class,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionFact {
    pub file: String,
    pub qualified_name: String,
    pub start_line: usize,
    pub end_line: usize,
    pub kind: FunctionKind,
}

impl FunctionFact {
    pub fn to_ref(&self) -> FunctionRef {
        FunctionRef {
            file: self.file.clone(),
            qualified_name: self.qualified_name.clone(),
            start_line: self.start_line,
        }
    }

    pub fn simple_name(&self) -> &str {
        self.qualified_name
            .rsplit('.')
            .next()
            .unwrap_or(&self.qualified_name)
    }

    pub fn contains_line(&self, line: usize) -> bool {
        self.start_line <= line && line <= self.end_line
    }
}

/// Stable pointer to a [`FunctionFact`] inside one checkout.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionRef {
    pub file: String,
    pub qualified_name: String,
    pub start_line: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ImportBinding {
    /// Local name introduced into the file namespace.
    pub local: String,
    /// Fully qualified dotted target (module, or module.attribute).
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct RawCall {
    pub callee: String,
    pub line: usize,
    /// Index into `ParsedFile::functions` of the innermost enclosing fact.
    pub enclosing: Option<usize>,
}

/// Everything the grammar layer extracts from one Python file.
#[derive(Debug, Clone, Default)]
pub struct ParsedFile {
    pub file: String,
    pub functions: Vec<FunctionFact>,
    pub imports: Vec<String>,
    pub(crate) bindings: Vec<ImportBinding>,
    pub(crate) calls: Vec<RawCall>,
    pub has_errors: bool,
}

pub(crate) fn parse_tree(source: &str) -> Option<Tree> {
    let mut parser = Parser::new();
    parser
        .set_language(&tree_sitter_python::LANGUAGE.into())
        .ok()?;
    parser.parse(source, None)
}

pub(crate) fn node_text<'a>(node: Node<'_>, src: &'a str) -> &'a str {
    &src[node.byte_range()]
}

/// Dotted module name for a repo-relative Python path
/// (`pkg/sub/mod.py` → `pkg.sub.mod`, `pkg/__init__.py` → `pkg`).
pub fn module_name_for_path(rel: &str) -> String {
    let stem = rel
        .strip_suffix(".pyi")
        .or_else(|| rel.strip_suffix(".py"))
        .unwrap_or(rel);
    let mut parts: Vec<&str> = stem.split('/').filter(|s| !s.is_empty()).collect();
    if parts.last() == Some(&"__init__") {
        parts.pop();
    }
    parts.join(".")
}

fn package_of(rel: &str) -> Vec<String> {
    let module = module_name_for_path(rel);
    let mut parts: Vec<String> = module.split('.').map(str::to_string).collect();
    let is_init = rel.ends_with("__init__.py") || rel.ends_with("__init__.pyi");
    if !is_init {
        parts.pop();
    }
    parts.retain(|p| !p.is_empty());
    parts
}

/// Resolves a (possibly relative) import module against the importing file.
fn normalize_import(file: &str, dots: usize, module: &str) -> String {
    if dots == 0 {
        return module.to_string();
    }
    let mut base = package_of(file);
    for _ in 1..dots {
        base.pop();
    }
    if !module.is_empty() {
        base.push(module.to_string());
    }
    base.join(".")
}

pub fn parse_python(file: &str, source: &str) -> ParsedFile {
    let mut parsed = ParsedFile {
        file: file.to_string(),
        ..Default::default()
    };
    let Some(tree) = parse_tree(source) else {
        parsed.has_errors = true;
        parsed.imports = fallback_imports(file, source);
        return parsed;
    };
    let root = tree.root_node();
    parsed.has_errors = root.has_error();

    let mut imports_seen = BTreeSet::new();
    // (node, scope stack of (qualified prefix, is_class), enclosing fact index)
    let mut stack: Vec<(Node, Vec<(String, bool)>, Option<usize>)> = vec![(root, Vec::new(), None)];
    while let Some((node, scope, enclosing)) = stack.pop() {
        let mut child_scope = scope.clone();
        let mut child_enclosing = enclosing;
        match node.kind() {
            "function_definition" | "class_definition" => {
                if let Some(name_node) = node.child_by_field_name("name") {
                    let name = node_text(name_node, source).to_string();
                    let in_class = scope.last().map(|(_, c)| *c).unwrap_or(false);
                    let is_class = node.kind() == "class_definition";
                    let kind = if is_class {
                        FunctionKind::Class
                    } else if in_class {
                        FunctionKind::Method
                    } else {
                        FunctionKind::Function
                    };
                    let qualified = match scope.last() {
                        Some((prefix, _)) => format!("{prefix}.{name}"),
                        None => name,
                    };
                    parsed.functions.push(FunctionFact {
                        file: file.to_string(),
                        qualified_name: qualified.clone(),
                        start_line: node.start_position().row + 1,
                        end_line: node.end_position().row + 1,
                        kind,
                    });
                    child_enclosing = Some(parsed.functions.len() - 1);
                    child_scope.push((qualified, is_class));
                }
            }
            "import_statement" => {
                let mut cursor = node.walk();
                for child in node.named_children(&mut cursor) {
                    let (module, alias) = match child.kind() {
                        "dotted_name" => (node_text(child, source).to_string(), None),
                        "aliased_import" => {
                            let name = child
                                .child_by_field_name("name")
                                .map(|n| node_text(n, source).to_string())
                                .unwrap_or_default();
                            let alias = child
                                .child_by_field_name("alias")
                                .map(|n| node_text(n, source).to_string());
                            (name, alias)
                        }
                        _ => continue,
                    };
                    if module.is_empty() {
                        continue;
                    }
                    if imports_seen.insert(module.clone()) {
                        parsed.imports.push(module.clone());
                    }
                    match alias {
                        Some(a) => parsed.bindings.push(ImportBinding {
                            local: a,
                            target: module,
                        }),
                        None => {
                            // `import a.b` binds `a`; keep the full path too so
                            // `a.b.f()` resolves through the longest prefix.
                            parsed.bindings.push(ImportBinding {
                                local: module.clone(),
                                target: module,
                            });
                        }
                    }
                }
            }
            "import_from_statement" => {
                let module_node = node.child_by_field_name("module_name");
                let (dots, module) = match module_node {
                    Some(m) if m.kind() == "relative_import" => {
                        let text = node_text(m, source);
                        let dots = text.chars().take_while(|c| *c == '.').count();
                        (dots, text[dots..].trim().to_string())
                    }
                    Some(m) => (0, node_text(m, source).to_string()),
                    None => (0, String::new()),
                };
                let normalized = normalize_import(file, dots, &module);
                if !normalized.is_empty() && imports_seen.insert(normalized.clone()) {
                    parsed.imports.push(normalized.clone());
                }
                let mut cursor = node.walk();
                for child in node.children_by_field_name("name", &mut cursor) {
                    let (name, alias) = match child.kind() {
                        "dotted_name" => (node_text(child, source).to_string(), None),
                        "aliased_import" => (
                            child
                                .child_by_field_name("name")
                                .map(|n| node_text(n, source).to_string())
                                .unwrap_or_default(),
                            child
                                .child_by_field_name("alias")
                                .map(|n| node_text(n, source).to_string()),
                        ),
                        _ => continue,
                    };
                    let target = if normalized.is_empty() {
                        name.clone()
                    } else {
                        format!("{normalized}.{name}")
                    };
                    parsed.bindings.push(ImportBinding {
                        local: alias.unwrap_or(name),
                        target,
                    });
                }
            }
            "call" => {
                if let Some(func) = node.child_by_field_name("function") {
                    let callee: String = node_text(func, source)
                        .chars()
                        .filter(|c| !c.is_whitespace())
                        .collect();
                    parsed.calls.push(RawCall {
                        callee,
                        line: node.start_position().row + 1,
                        enclosing,
                    });
                }
            }
            _ => {}
        }
        let mut cursor = node.walk();
        let children: Vec<Node> = node.children(&mut cursor).collect();
        for child in children.into_iter().rev() {
            stack.push((child, child_scope.clone(), child_enclosing));
        }
    }
    parsed.calls.sort_by_key(|c| c.line);
    parsed
}

fn fallback_imports(file: &str, source: &str) -> Vec<String> {
    let import_re = Regex::new(r"^\s*import\s+([\w.]+(?:\s*,\s*[\w.]+)*)").expect("static regex");
    let from_re = Regex::new(r"^\s*from\s+(\.*)([\w.]*)\s+import\b").expect("static regex");
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for line in source.lines() {
        if let Some(c) = from_re.captures(line) {
            let m = normalize_import(file, c[1].len(), &c[2]);
            if !m.is_empty() && seen.insert(m.clone()) {
                out.push(m);
            }
        } else if let Some(c) = import_re.captures(line) {
            for m in c[1].split(',') {
                let m = m.trim().to_string();
                if !m.is_empty() && seen.insert(m.clone()) {
                    out.push(m);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportList {
    pub modules: Vec<String>,
    /// Set when the grammar rejected the file and a line regex was used.
    pub degraded: bool,
}

pub fn get_imports(checkout: &RepoCheckout, file: &str) -> Result<ImportList, CodeFactsError> {
    let rel = checkout.relative(file)?;
    let source = checkout.read_to_string(&rel)?;
    if !is_python_file(&rel) {
        return Ok(ImportList {
            modules: fallback_imports(&rel, &source),
            degraded: true,
        });
    }
    let parsed = parse_python(&rel, &source);
    if parsed.has_errors {
        Ok(ImportList {
            modules: fallback_imports(&rel, &source),
            degraded: true,
        })
    } else {
        Ok(ImportList {
            modules: parsed.imports,
            degraded: false,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "by", content = "value", rename_all = "snake_case")]
pub enum FunctionSelector {
    Name(String),
    Line(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FunctionCode {
    pub fact: FunctionFact,
    /// Source lines prefixed with their 1-based line numbers.
    pub text: String,
    /// Whole-file fallback because the grammar could not parse the file.
    pub unparsed: bool,
}

pub(crate) fn numbered(source: &str, start: usize, end: usize) -> String {
    source
        .lines()
        .enumerate()
        .skip(start.saturating_sub(1))
        .take(end + 1 - start.max(1))
        .map(|(i, l)| format!("{:>5} | {}", i + 1, l))
        .collect::<Vec<_>>()
        .join("\n")
}

pub(crate) fn find_fact<'a>(
    functions: &'a [FunctionFact],
    selector: &FunctionSelector,
) -> Option<&'a FunctionFact> {
    match selector {
        FunctionSelector::Name(name) => functions
            .iter()
            .find(|f| &f.qualified_name == name)
            .or_else(|| functions.iter().find(|f| f.simple_name() == name)),
        FunctionSelector::Line(line) => functions
            .iter()
            .filter(|f| f.contains_line(*line))
            .max_by_key(|f| f.start_line),
    }
}

pub fn get_function_code(
    checkout: &RepoCheckout,
    file: &str,
    selector: &FunctionSelector,
) -> Result<FunctionCode, CodeFactsError> {
    let rel = checkout.relative(file)?;
    if !checkout.file_exists(&rel) {
        return Err(CodeFactsError::NotFound {
            file: rel,
            name: "file".into(),
        });
    }
    let source = checkout.read_to_string(&rel)?;
    let line_count = source.lines().count().max(1);
    let parsed = is_python_file(&rel).then(|| parse_python(&rel, &source));
    match parsed {
        Some(p) if !p.has_errors => {
            let fact = find_fact(&p.functions, selector).ok_or_else(|| {
                CodeFactsError::NotFound {
                    file: rel.clone(),
                    name: match selector {
                        FunctionSelector::Name(n) => n.clone(),
                        FunctionSelector::Line(l) => format!("line {l}"),
                    },
                }
            })?;
            Ok(FunctionCode {
                text: numbered(&source, fact.start_line, fact.end_line),
                fact: fact.clone(),
                unparsed: false,
            })
        }
        _ => Ok(FunctionCode {
            fact: FunctionFact {
                file: rel.clone(),
                qualified_name: module_name_for_path(&rel),
                start_line: 1,
                end_line: line_count,
                kind: FunctionKind::Function,
            },
            text: numbered(&source, 1, line_count),
            unparsed: true,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn checkout_with(files: &[(&str, &str)]) -> (tempfile::TempDir, RepoCheckout) {
        let dir = tempfile::tempdir().unwrap();
        for (path, body) in files {
            let p = dir.path().join(path);
            fs::create_dir_all(p.parent().unwrap()).unwrap();
            fs::write(p, body).unwrap();
        }
        let co = RepoCheckout::new(dir.path(), "demo", "abc").unwrap();
        (dir, co)
    }

    #[test]
    fn function_span_and_kind() {
        let (_d, co) = checkout_with(&[("a.py", "def f():\n  return 1\n")]);
        let code = get_function_code(&co, "a.py", &FunctionSelector::Name("f".into())).unwrap();
        assert_eq!((code.fact.start_line, code.fact.end_line), (1, 2));
        assert_eq!(code.fact.kind, FunctionKind::Function);
        assert!(code.text.contains("    1 | def f():"));
        assert!(!code.unparsed);
    }

    #[test]
    fn class_and_method() {
        let src = "class Loader:\n    def load(self, p):\n        return p\n";
        let (_d, co) = checkout_with(&[("a.py", src)]);
        let cls = get_function_code(&co, "a.py", &FunctionSelector::Name("Loader".into())).unwrap();
        assert_eq!(cls.fact.kind, FunctionKind::Class);
        assert_eq!((cls.fact.start_line, cls.fact.end_line), (1, 3));
        let m = get_function_code(&co, "a.py", &FunctionSelector::Line(3)).unwrap();
        assert_eq!(m.fact.qualified_name, "Loader.load");
        assert_eq!(m.fact.kind, FunctionKind::Method);
    }

    #[test]
    fn missing_function() {
        let (_d, co) = checkout_with(&[("a.py", "def f():\n  return 1\n")]);
        assert!(matches!(
            get_function_code(&co, "a.py", &FunctionSelector::Name("missing".into())),
            Err(CodeFactsError::NotFound { .. })
        ));
    }

    #[test]
    fn unparseable_file_degrades_to_whole_file() {
        let (_d, co) = checkout_with(&[("bad.py", "def f(:\n  return (\n")]);
        let code = get_function_code(&co, "bad.py", &FunctionSelector::Name("f".into())).unwrap();
        assert!(code.unparsed);
        assert_eq!((code.fact.start_line, code.fact.end_line), (1, 2));
    }

    #[test]
    fn imports_dedup_and_order() {
        let src = "import os\nfrom x.y import z\nimport os\nfrom x.y import w\n";
        let (_d, co) = checkout_with(&[("a.py", src), ("empty.py", "")]);
        let imports = get_imports(&co, "a.py").unwrap();
        assert_eq!(imports.modules, vec!["os", "x.y"]);
        assert!(!imports.degraded);
        assert!(get_imports(&co, "empty.py").unwrap().modules.is_empty());
    }

    #[test]
    fn relative_imports_normalized() {
        let src = "from . import a\nfrom .m import b\nfrom ..top import c\n";
        let (_d, co) = checkout_with(&[("pkg/sub/mod.py", src)]);
        let imports = get_imports(&co, "pkg/sub/mod.py").unwrap();
        assert_eq!(imports.modules, vec!["pkg.sub", "pkg.sub.m", "pkg.top"]);
    }

    #[test]
    fn import_fallback_when_unparseable() {
        let src = "import os\nfrom .util import x\ndef broken(:\n";
        let (_d, co) = checkout_with(&[("pkg/a.py", src)]);
        let imports = get_imports(&co, "pkg/a.py").unwrap();
        assert!(imports.degraded);
        assert_eq!(imports.modules, vec!["os", "pkg.util"]);
    }

    #[test]
    fn module_names() {
        assert_eq!(module_name_for_path("pkg/sub/mod.py"), "pkg.sub.mod");
        assert_eq!(module_name_for_path("pkg/__init__.py"), "pkg");
    }
}
