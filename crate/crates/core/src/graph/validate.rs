//! Structural and typing diagnostics.

use std::collections::HashMap;
use std::fmt;

use serde::Serialize;

use super::infer::infer_all;
use super::{Graph, NodeId, OperatorKind};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub node: Option<NodeId>,
    pub node_name: Option<String>,
    pub port: Option<usize>,
    pub rule: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (&self.node_name, self.port) {
            (Some(n), Some(p)) => write!(f, "{n}[{p}]: {}: {}", self.rule, self.message),
            (Some(n), None) => write!(f, "{n}: {}: {}", self.rule, self.message),
            _ => write!(f, "{}: {}", self.rule, self.message),
        }
    }
}

/// Returns every problem found; an empty list means the graph is valid.
pub fn validate(g: &Graph) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut diag = |node: Option<NodeId>, port: Option<usize>, rule: &str, message: String| {
        out.push(Diagnostic {
            node,
            node_name: node.map(|n| g.nodes[n].name.clone()),
            port,
            rule: rule.to_string(),
            message,
        });
    };

    let mut structural = false;
    for node in &g.nodes {
        let (ni, no) = node.kind.arity();
        if node.inputs.len() != ni || node.outputs.len() != no {
            diag(
                Some(node.id),
                None,
                "arity",
                format!(
                    "{} expects {ni} inputs and {no} outputs, has {} and {}",
                    node.kind.name(),
                    node.inputs.len(),
                    node.outputs.len()
                ),
            );
            structural = true;
        }
        match &node.kind {
            OperatorKind::Broadcast { n } if *n < 2 => {
                diag(Some(node.id), None, "broadcast-fanout", format!("fan-out {n} < 2"))
            }
            OperatorKind::Partition { num_consumers: 0, .. }
            | OperatorKind::Reassemble { inputs: 0, .. }
            | OperatorKind::EagerMerge { inputs: 0, .. } => {
                diag(Some(node.id), None, "count", "needs at least one stream".into())
            }
            OperatorKind::FlatMap { rank, f } => {
                if let Some(e) = f.flat_extents() {
                    if e.len() != rank + 1 {
                        diag(
                            Some(node.id),
                            None,
                            "flatmap-rank",
                            format!("kernel emits rank {}, node declares {rank}", e.len() - 1),
                        );
                    }
                }
            }
            _ => {}
        }
        if node.kind.is_higher_order() && node.compute_bw == Some(0) {
            diag(Some(node.id), None, "compute-bw", "compute bandwidth must be positive".into());
        }
    }

    for ch in &g.channels {
        let is_in = g.inputs.contains(&ch.id);
        let is_out = g.outputs.contains(&ch.id);
        if ch.src.is_none() && !is_in {
            diag(None, None, "unconnected", format!("channel `{}` has no producer", ch.name));
            structural = true;
        }
        if ch.dst.is_none() && !is_out {
            diag(None, None, "unconnected", format!("channel `{}` has no consumer", ch.name));
            structural = true;
        }
        if ch.src.is_some() && is_in {
            diag(None, None, "double-producer", format!("external input `{}` also has a producer", ch.name));
        }
        if ch.capacity == Some(0) {
            diag(None, None, "capacity", format!("channel `{}` has zero capacity", ch.name));
        }
        for (end, list) in [(ch.src, "outputs"), (ch.dst, "inputs")] {
            if let Some(e) = end {
                let node = &g.nodes[e.node];
                let ports = if list == "outputs" { &node.outputs } else { &node.inputs };
                if ports.get(e.port) != Some(&ch.id) {
                    diag(Some(e.node), Some(e.port), "endpoint", format!("channel `{}` endpoint mismatch", ch.name));
                    structural = true;
                }
            }
        }
    }
    for &c in &g.inputs {
        if g.channels[c].shape.is_none() || g.channels[c].vtype.is_none() {
            diag(None, None, "input-shape", format!("external input `{}` needs a type and shape", g.channels[c].name));
            structural = true;
        }
    }

    if !structural {
        let (_, errors) = infer_all(g, &HashMap::new());
        for e in errors {
            diag(e.node, e.port, e.rule, e.msg);
        }
    }
    out
}
