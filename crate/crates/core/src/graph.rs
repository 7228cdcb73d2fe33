//! Cumulative state-transition multigraph over discrete cells.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::agent::Successor;
use crate::discretizer::DiscreteStateId;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphFormat {
    Dot,
    Json,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransitionGraph {
    nodes: BTreeSet<Successor>,
    edges: BTreeMap<(DiscreteStateId, Successor), u64>,
}

/// JSON form: `{"edges":[{"count","from","to"}],"nodes":[...]}`. The failure
/// sink is the string `"failure"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDocument {
    pub edges: Vec<EdgeRecord>,
    pub nodes: Vec<NodeLabel>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeRecord {
    pub count: u64,
    pub from: u16,
    pub to: NodeLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum NodeLabel {
    State(u16),
    Failure(FailureTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureTag {
    Failure,
}

impl From<Successor> for NodeLabel {
    fn from(s: Successor) -> Self {
        match s {
            Successor::State(id) => NodeLabel::State(id.index() as u16),
            Successor::Failure => NodeLabel::Failure(FailureTag::Failure),
        }
    }
}

impl TransitionGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_transition(&mut self, from: DiscreteStateId, to: Successor) {
        self.nodes.insert(Successor::State(from));
        self.nodes.insert(to);
        *self.edges.entry((from, to)).or_insert(0) += 1;
    }

    /// Distinct cells seen, not counting the failure sink.
    pub fn unique_state_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Successor::State(_))).count()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self, from: DiscreteStateId, to: Successor) -> u64 {
        self.edges.get(&(from, to)).copied().unwrap_or(0)
    }

    pub fn distinct_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn total_transitions(&self) -> u64 {
        self.edges.values().sum()
    }

    pub fn contains_state(&self, id: DiscreteStateId) -> bool {
        self.nodes.contains(&Successor::State(id))
    }

    pub fn to_document(&self) -> GraphDocument {
        GraphDocument {
            edges: self
                .edges
                .iter()
                .map(|(&(from, to), &count)| EdgeRecord { count, from: from.index() as u16, to: to.into() })
                .collect(),
            nodes: self.nodes.iter().map(|&n| n.into()).collect(),
        }
    }

    pub fn from_document(doc: &GraphDocument) -> Self {
        let decode = |label: NodeLabel| match label {
            NodeLabel::State(i) => DiscreteStateId::new(i as usize).map(Successor::State),
            NodeLabel::Failure(_) => Some(Successor::Failure),
        };
        let mut graph = Self::new();
        graph.nodes.extend(doc.nodes.iter().filter_map(|&n| decode(n)));
        for edge in &doc.edges {
            if let (Some(from), Some(to)) = (DiscreteStateId::new(edge.from as usize), decode(edge.to)) {
                graph.nodes.insert(Successor::State(from));
                graph.nodes.insert(to);
                *graph.edges.entry((from, to)).or_insert(0) += edge.count;
            }
        }
        graph
    }

    pub fn to_dot(&self) -> String {
        let name = |n: Successor| match n {
            Successor::State(id) => format!("s{id}"),
            Successor::Failure => "failure".to_string(),
        };
        let mut out = String::from("digraph transitions {\n");
        for &node in &self.nodes {
            let _ = match node {
                Successor::State(id) => writeln!(out, "  {} [label=\"{id}\"];", name(node)),
                Successor::Failure => writeln!(out, "  failure [label=\"F\", shape=doublecircle];"),
            };
        }
        for (&(from, to), count) in &self.edges {
            let _ = writeln!(
                out,
                "  {} -> {} [weight={count}, penwidth={:.3}];",
                name(Successor::State(from)),
                name(to),
                1.0 + (*count as f64).ln()
            );
        }
        out.push_str("}\n");
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_document()).expect("graph document serializes")
    }

    pub fn export<W: Write>(&self, format: GraphFormat, sink: &mut W) -> Result<()> {
        let body = match format {
            GraphFormat::Dot => self.to_dot(),
            GraphFormat::Json => {
                let mut s = self.to_json();
                s.push('\n');
                s
            }
        };
        sink.write_all(body.as_bytes()).map_err(|e| crate::error::Error::io("<graph sink>", e))
    }
}
