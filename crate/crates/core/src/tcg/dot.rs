//! Graphviz export.

use std::fmt::Write;

use super::graph::{NodeId, TaskGraph};

const ARGS_LIMIT: usize = 24;

/// Renders `graph` as DOT. Nodes are numbered in depth-first order with
/// children visited by descriptor key, so the output depends only on graph
/// content and not on insertion order. Stateless attachments appear as
/// dashed leaves.
pub fn export_dot(graph: &TaskGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "digraph \"{}\" {{", escape(graph.task_id()));
    out.push_str("  node [shape=box, fontname=\"monospace\"];\n");

    let mut edges = String::new();
    let mut next = 0usize;
    let mut stack: Vec<(NodeId, Option<usize>)> = vec![(NodeId::ROOT, None)];
    while let Some((id, parent)) = stack.pop() {
        let node = graph.node(id).expect("child ids are valid");
        let ordinal = next;
        next += 1;
        let label = match node.descriptor() {
            None => "root".to_string(),
            Some(desc) => format!("{}({})\\nhits={}", escape(desc.tool_name()), escape(&truncate(desc.args_canonical())), node.hit_count()),
        };
        let style = if node.snapshot().is_some() { ", style=filled, fillcolor=\"#f4a261\"" } else { "" };
        let _ = writeln!(out, "  n{ordinal} [label=\"{label}\"{style}];");
        if let Some(p) = parent {
            let _ = writeln!(edges, "  n{p} -> n{ordinal};");
        }
        for (i, att) in node.attachments().enumerate() {
            let _ = writeln!(
                out,
                "  n{ordinal}_s{i} [label=\"{}({})\\nhits={}\", style=dashed];",
                escape(att.descriptor.tool_name()),
                escape(&truncate(att.descriptor.args_canonical())),
                att.hit_count.load(std::sync::atomic::Ordering::Relaxed)
            );
            let _ = writeln!(edges, "  n{ordinal} -> n{ordinal}_s{i} [style=dashed];");
        }
        // Push in reverse so the smallest key is visited first.
        let children: Vec<NodeId> = node.children().map(|(_, c)| c).collect();
        for child in children.into_iter().rev() {
            stack.push((child, Some(ordinal)));
        }
    }
    out.push_str(&edges);
    out.push_str("}\n");
    out
}

fn truncate(args: &str) -> String {
    if args.chars().count() <= ARGS_LIMIT {
        return args.to_string();
    }
    let mut s: String = args.chars().take(ARGS_LIMIT).collect();
    s.push_str("...");
    s
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c.is_control() => {
                let _ = write!(out, "\\\\u{:04x}", c as u32);
            }
            c => out.push(c),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tcg::fixtures::*;

    fn count(dot: &str) -> (usize, usize) {
        let nodes = dot.lines().filter(|l| l.trim_start().starts_with('n') && l.contains("[label=")).count();
        let edges = dot.lines().filter(|l| l.contains("->")).count();
        (nodes, edges)
    }

    #[test]
    fn empty_graph_has_single_root() {
        let dot = export_dot(&TaskGraph::new("p", 1));
        assert_eq!(count(&dot), (1, 0));
        assert!(dot.contains("n0 [label=\"root\"]"));
    }

    #[test]
    fn sample_tree_export_counts_and_styles() {
        let g = sample_tree();
        let dot = export_dot(&g);
        assert_eq!(count(&dot), (g.node_count(), g.node_count() - 1));
        let filled: Vec<&str> = dot.lines().filter(|l| l.contains("style=filled")).collect();
        assert_eq!(filled.len(), 1);
        assert!(filled[0].contains("t3()"));
    }

    #[test]
    fn export_is_independent_of_insertion_order() {
        let a = sample_tree();
        let mut b = TaskGraph::new("sample_tree", 8);
        for rollout in SAMPLE_ROLLOUTS.iter().rev() {
            for len in 1..=rollout.len() {
                let payload = format!("r({})", rollout[..len].join(","));
                let snapshot = (rollout[..len] == ["t1", "t2", "t3"]).then(|| snap("s-t3"));
                b.insert(&traj(&rollout[..len]), res(&payload), snapshot).unwrap();
            }
        }
        assert_eq!(export_dot(&a), export_dot(&b));
    }

    #[test]
    fn labels_are_escaped_and_truncated() {
        let mut g = TaskGraph::new("p", 1);
        let desc = crate::tcg::ToolDescriptor::new("w\"x", "{\"content\":\"aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa\"}", true).unwrap();
        g.insert(&crate::tcg::Trajectory::new(vec![desc]), res("r"), None).unwrap();
        let dot = export_dot(&g);
        assert!(dot.contains("w\\\"x"));
        assert!(dot.contains("..."));
    }
}
