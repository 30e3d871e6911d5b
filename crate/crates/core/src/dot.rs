//! Graphviz rendering of a live graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::config::WorkflowSpec;
use crate::graph::LiveGraph;
use crate::ids::InstanceId;
use crate::registry::TaskState;

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

fn fill(state: Option<TaskState>) -> &'static str {
    match state {
        Some(TaskState::Succeeded) => "palegreen",
        Some(TaskState::Failed) => "salmon",
        Some(TaskState::Cancelled) => "lightgray",
        Some(TaskState::AwaitingDecision) => "gold",
        Some(TaskState::Running | TaskState::Submitted) => "lightblue",
        _ => "white",
    }
}

/// Nodes are labelled `name#k [state]`. When `spec` is given, declared tasks
/// with no instance yet are drawn dashed, with dashed edges for the
/// dependencies they would impose.
pub fn to_dot(
    graph: &LiveGraph,
    states: &BTreeMap<InstanceId, TaskState>,
    spec: Option<&WorkflowSpec>,
) -> String {
    let mut out = String::from("digraph workflow {\n  rankdir=LR;\n  node [shape=box, style=filled];\n");
    for id in graph.creation_order() {
        let state = states.get(id).copied();
        let label = match state {
            Some(s) => format!("{id} [{s}]"),
            None => id.to_string(),
        };
        let _ = writeln!(
            out,
            "  {} [label={}, fillcolor={}];",
            quote(&id.to_string()),
            quote(&label),
            fill(state)
        );
    }
    for (from, to) in graph.edges() {
        let _ = writeln!(out, "  {} -> {};", quote(&from.to_string()), quote(&to.to_string()));
    }

    if let Some(spec) = spec {
        let instantiated: BTreeSet<&str> = graph.instances().iter().map(InstanceId::base).collect();
        for name in spec.tasks.keys().filter(|n| !instantiated.contains(n.as_str())) {
            let _ = writeln!(
                out,
                "  {} [label={}, style=dashed, fillcolor=white];",
                quote(name),
                quote(&format!("{name} (declared inactive)"))
            );
        }
        for id in graph.creation_order() {
            for dep in &spec.tasks[id.base()].depends_on {
                if !instantiated.contains(dep.as_str()) {
                    let _ = writeln!(
                        out,
                        "  {} -> {} [style=dashed];",
                        quote(dep),
                        quote(&id.to_string())
                    );
                }
            }
        }
    }
    out.push_str("}\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_graph_is_an_empty_digraph() {
        let dot = to_dot(&LiveGraph::default(), &BTreeMap::new(), None);
        assert!(dot.starts_with("digraph workflow {"));
        assert!(!dot.contains("->"));
    }

    #[test]
    fn quoting_escapes_specials() {
        assert_eq!(quote("a\"b\\c"), "\"a\\\"b\\\\c\"");
    }
}
