use serde::{Deserialize, Serialize};
use tree_sitter::Node;

use super::files::is_python_file;
use super::python::{node_text, parse_tree};
use super::{CodeFactsError, FunctionFact, FunctionRef, RepoCheckout};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowVia {
    Parameter,
    Assignment,
    CallArgument,
    Return,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FlowEdge {
    pub from: String,
    pub to: String,
    pub via: FlowVia,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataFlowSummary {
    pub function: FunctionRef,
    pub edges: Vec<FlowEdge>,
    pub unparsed: bool,
}

/// Symbol name used as the sink of `return` edges.
pub const RETURN_SYMBOL: &str = "return";

const LITERALS: &[&str] = &[
    "integer", "float", "string", "true", "false", "none", "concatenated_string",
];

fn compact(node: Node<'_>, src: &str) -> String {
    node_text(node, src)
        .chars()
        .filter(|c| !c.is_whitespace())
        .collect()
}

/// Symbols whose value may flow out of an expression. Over-approximates.
fn value_symbols(node: Node<'_>, src: &str, top: bool, out: &mut Vec<String>) {
    match node.kind() {
        "identifier" => out.push(node_text(node, src).to_string()),
        "attribute" => out.push(compact(node, src)),
        "call" => {
            if let Some(f) = node.child_by_field_name("function") {
                out.push(compact(f, src));
            }
        }
        "lambda" | "function_definition" | "class_definition" => {}
        "assignment" | "augmented_assignment" => {
            if let Some(r) = node.child_by_field_name("right") {
                value_symbols(r, src, top, out);
            }
        }
        "keyword_argument" => {
            if let Some(v) = node.child_by_field_name("value") {
                value_symbols(v, src, false, out);
            }
        }
        k if LITERALS.contains(&k) && k != "string" && k != "concatenated_string" => {
            if top {
                out.push(node_text(node, src).to_string());
            }
        }
        "string" | "concatenated_string" => {
            let before = out.len();
            let mut cursor = node.walk();
            for child in node.named_children(&mut cursor) {
                value_symbols(child, src, false, out);
            }
            if top && out.len() == before {
                out.push(node_text(node, src).to_string());
            }
        }
        _ => {
            let mut cursor = node.walk();
            for child in node.named_children(&mut cursor) {
                value_symbols(child, src, false, out);
            }
        }
    }
}

fn target_symbols(node: Node<'_>, src: &str, out: &mut Vec<String>) {
    match node.kind() {
        "identifier" => out.push(node_text(node, src).to_string()),
        "attribute" => out.push(compact(node, src)),
        "subscript" => {
            if let Some(v) = node.child_by_field_name("value") {
                target_symbols(v, src, out);
            }
        }
        "list_splat_pattern" | "tuple_pattern" | "list_pattern" | "pattern_list"
        | "expression_list" | "tuple" | "list" => {
            let mut cursor = node.walk();
            for child in node.named_children(&mut cursor) {
                target_symbols(child, src, out);
            }
        }
        _ => {}
    }
}

struct EdgeSink(Vec<FlowEdge>);

impl EdgeSink {
    fn push(&mut self, from: String, to: String, via: FlowVia) {
        let edge = FlowEdge { from, to, via };
        if !self.0.contains(&edge) {
            self.0.push(edge);
        }
    }

    fn flow(&mut self, value: Option<Node<'_>>, targets: &[String], src: &str, via: FlowVia) {
        let Some(value) = value else { return };
        let mut sources = Vec::new();
        value_symbols(value, src, true, &mut sources);
        for t in targets {
            for s in &sources {
                self.push(s.clone(), t.clone(), via);
            }
        }
    }
}

fn collect(func: Node<'_>, src: &str) -> Vec<FlowEdge> {
    let mut sink = EdgeSink(Vec::new());

    if let Some(params) = func.child_by_field_name("parameters") {
        let mut cursor = params.walk();
        for p in params.named_children(&mut cursor) {
            if matches!(p.kind(), "default_parameter" | "typed_default_parameter") {
                let name = p
                    .child_by_field_name("name")
                    .map(|n| node_text(n, src).to_string());
                if let Some(name) = name {
                    sink.flow(p.child_by_field_name("value"), &[name], src, FlowVia::Parameter);
                }
            }
        }
    }

    let Some(body) = func.child_by_field_name("body") else {
        return sink.0;
    };
    let mut stack = vec![body];
    while let Some(node) = stack.pop() {
        match node.kind() {
            "function_definition" | "class_definition" | "lambda" => continue,
            "assignment" | "augmented_assignment" => {
                let mut targets = Vec::new();
                if let Some(left) = node.child_by_field_name("left") {
                    target_symbols(left, src, &mut targets);
                }
                sink.flow(node.child_by_field_name("right"), &targets, src, FlowVia::Assignment);
            }
            "named_expression" => {
                let targets: Vec<String> = node
                    .child_by_field_name("name")
                    .map(|n| vec![node_text(n, src).to_string()])
                    .unwrap_or_default();
                sink.flow(node.child_by_field_name("value"), &targets, src, FlowVia::Assignment);
            }
            "for_statement" | "for_in_clause" => {
                let mut targets = Vec::new();
                if let Some(left) = node.child_by_field_name("left") {
                    target_symbols(left, src, &mut targets);
                }
                sink.flow(node.child_by_field_name("right"), &targets, src, FlowVia::Assignment);
            }
            "as_pattern" => {
                let mut targets = Vec::new();
                if let Some(alias) = node.child_by_field_name("alias") {
                    let mut cursor = alias.walk();
                    for child in alias.named_children(&mut cursor) {
                        target_symbols(child, src, &mut targets);
                    }
                }
                sink.flow(node.named_child(0), &targets, src, FlowVia::Assignment);
            }
            "call" => {
                let callee = node.child_by_field_name("function").map(|f| compact(f, src));
                if let (Some(callee), Some(args)) = (callee, node.child_by_field_name("arguments")) {
                    let mut cursor = args.walk();
                    for arg in args.named_children(&mut cursor) {
                        if arg.kind() == "comment" {
                            continue;
                        }
                        sink.flow(Some(arg), std::slice::from_ref(&callee), src, FlowVia::CallArgument);
                    }
                }
            }
            "return_statement" => {
                if let Some(value) = node.named_child(0) {
                    sink.flow(Some(value), &[RETURN_SYMBOL.to_string()], src, FlowVia::Return);
                }
            }
            _ => {}
        }
        let mut cursor = node.walk();
        let children: Vec<Node> = node.named_children(&mut cursor).collect();
        stack.extend(children.into_iter().rev());
    }
    sink.0
}

/// Intraprocedural edges for one function: assignments, call arguments,
/// returns and parameter defaults. Nested definitions are not entered.
pub fn analyze_data_flow(
    checkout: &RepoCheckout,
    function: &FunctionFact,
) -> Result<DataFlowSummary, CodeFactsError> {
    let source = checkout.read_to_string(&function.file)?;
    let unparsed = DataFlowSummary {
        function: function.to_ref(),
        edges: Vec::new(),
        unparsed: true,
    };
    if !is_python_file(&function.file) {
        return Ok(unparsed);
    }
    let Some(tree) = parse_tree(&source) else {
        return Ok(unparsed);
    };
    let root = tree.root_node();
    let mut stack = vec![root];
    let mut target = None;
    while let Some(node) = stack.pop() {
        if matches!(node.kind(), "function_definition" | "class_definition")
            && node.start_position().row + 1 == function.start_line
        {
            target = Some(node);
            break;
        }
        let mut cursor = node.walk();
        stack.extend(node.named_children(&mut cursor));
    }
    match target {
        Some(node) if !node.has_error() => Ok(DataFlowSummary {
            function: function.to_ref(),
            edges: collect(node, &source),
            unparsed: false,
        }),
        _ => Ok(unparsed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::code_facts::{get_function_code, FunctionSelector};
    use std::fs;

    fn flows(src: &str, name: &str) -> DataFlowSummary {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("m.py"), src).unwrap();
        let co = RepoCheckout::new(dir.path(), "demo", "abc").unwrap();
        let fact = get_function_code(&co, "m.py", &FunctionSelector::Name(name.into()))
            .unwrap()
            .fact;
        analyze_data_flow(&co, &fact).unwrap()
    }

    fn e(from: &str, to: &str, via: FlowVia) -> FlowEdge {
        FlowEdge {
            from: from.into(),
            to: to.into(),
            via,
        }
    }

    #[test]
    fn assignment_then_sink_argument() {
        let s = flows("def f(p):\n    q = p\n    sink(q)\n", "f");
        assert_eq!(
            s.edges,
            vec![
                e("p", "q", FlowVia::Assignment),
                e("q", "sink", FlowVia::CallArgument)
            ]
        );
    }

    #[test]
    fn literal_return() {
        let s = flows("def f():\n    return 1\n", "f");
        assert_eq!(s.edges, vec![e("1", RETURN_SYMBOL, FlowVia::Return)]);
    }

    #[test]
    fn only_returned_parameter_flows() {
        let s = flows("def f(a, b):\n    return a\n", "f");
        assert_eq!(s.edges, vec![e("a", RETURN_SYMBOL, FlowVia::Return)]);
    }

    #[test]
    fn call_result_assignment_and_defaults() {
        let src = "def load(path, mode=DEFAULT):\n    data = torch.load(path, map_location=mode)\n    return data\n";
        let s = flows(src, "load");
        assert!(s.edges.contains(&e("DEFAULT", "mode", FlowVia::Parameter)));
        assert!(s.edges.contains(&e("torch.load", "data", FlowVia::Assignment)));
        assert!(s.edges.contains(&e("path", "torch.load", FlowVia::CallArgument)));
        assert!(s.edges.contains(&e("mode", "torch.load", FlowVia::CallArgument)));
        assert!(s.edges.contains(&e("data", RETURN_SYMBOL, FlowVia::Return)));
    }

    #[test]
    fn nested_definitions_are_not_entered() {
        let src = "def outer(a):\n    def inner(b):\n        c = b\n    x = a\n";
        let s = flows(src, "outer");
        assert_eq!(s.edges, vec![e("a", "x", FlowVia::Assignment)]);
    }

    #[test]
    fn edge_symbols_appear_in_span() {
        let src = "def f(p, q=3):\n    a, b = p, q\n    c = f\"{a}-{b}\"\n    os.system(c)\n    return [a, b]\n";
        let s = flows(src, "f");
        for edge in &s.edges {
            assert!(src.contains(&edge.from), "{edge:?}");
            assert!(src.contains(&edge.to), "{edge:?}");
        }
        assert!(s.edges.contains(&e("c", "os.system", FlowVia::CallArgument)));
        assert!(s.edges.contains(&e("a", "c", FlowVia::Assignment)));
    }
}
