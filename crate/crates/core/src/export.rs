//! Display-oriented graph export: activity threshold, inactive-pair edge
//! suppression and scalar edge weights, rendered as JSON or Graphviz DOT.

use std::f64::consts::TAU;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcn::EventRelationalGraph;

/// Events below this probability are inactive; exactly 0.1 is active.
pub const ACTIVE_THRESHOLD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Json,
    Dot,
}

impl std::str::FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ExportFormat::Json),
            "dot" => Ok(ExportFormat::Dot),
            other => Err(Error::Config(format!("unknown export format {other:?}; expected json or dot"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportNode {
    pub id: usize,
    /// Position in the 527-event space.
    pub event_index: usize,
    pub event: String,
    pub probability: f64,
    pub active: bool,
    /// Circular layout hint in unit coordinates.
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportEdge {
    pub src: usize,
    pub dst: usize,
    pub mean_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<ExportEdge>,
}

pub fn is_active(probability: f64) -> bool {
    probability >= ACTIVE_THRESHOLD
}

impl GraphExport {
    /// `names` are the display names in node order.
    pub fn from_graph(graph: &EventRelationalGraph, names: &[String]) -> Result<Self> {
        let n = graph.n;
        if names.len() != n || graph.event_probs.len() != n || graph.vocab.len() != n {
            return Err(Error::dim("graph_export", format!("{n} nodes but {} names, {} probabilities", names.len(), graph.event_probs.len())));
        }
        let nodes: Vec<ExportNode> = (0..n)
            .map(|i| {
                let p = graph.event_probs[i] as f64;
                let angle = TAU * i as f64 / n as f64;
                ExportNode {
                    id: i,
                    event_index: graph.vocab[i],
                    event: names[i].clone(),
                    probability: p,
                    active: is_active(p),
                    x: angle.cos(),
                    y: angle.sin(),
                }
            })
            .collect();
        let mut edges = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if !nodes[i].active && !nodes[j].active {
                    continue;
                }
                let e = graph.edge(i, j);
                let mean_weight = e.iter().map(|&v| v as f64).sum::<f64>() / e.len() as f64;
                edges.push(ExportEdge { src: i, dst: j, mean_weight });
            }
        }
        Ok(GraphExport { nodes, edges })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("export serializes")
    }

    /// Nodes are sized by probability (inactive ones dashed) and edge pen
    /// width grows with the absolute mean weight.
    pub fn to_dot(&self) -> String {
        let max_w = self.edges.iter().map(|e| e.mean_weight.abs()).fold(0.0, f64::max);
        let mut s = String::from("digraph event_relations {\n  layout=neato;\n  node [shape=circle, fixedsize=true];\n");
        for node in &self.nodes {
            let style = if node.active { "solid" } else { "dashed" };
            writeln!(
                s,
                "  n{} [label=\"{}\", event_index={}, probability={:e}, active={}, width={:.3}, style={style}, pos=\"{:.3},{:.3}!\"];",
                node.id,
                node.event.replace('"', "\\\""),
                node.event_index,
                node.probability,
                node.active,
                0.3 + node.probability,
                3.0 * node.x,
                3.0 * node.y,
            )
            .unwrap();
        }
        for e in &self.edges {
            let pen = if max_w > 0.0 { 0.2 + 4.0 * e.mean_weight.abs() / max_w } else { 0.2 };
            writeln!(s, "  n{} -> n{} [weight_mean={:e}, penwidth={pen:.3}];", e.src, e.dst, e.mean_weight).unwrap();
        }
        s.push_str("}\n");
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(probs: &[f32]) -> EventRelationalGraph {
        let n = probs.len();
        let d = 4;
        EventRelationalGraph {
            n,
            d,
            node_feats: vec![0.0; n * d],
            edge_feats: (0..n * n * d).map(|k| (k % 7) as f32 - 3.0).collect(),
            event_probs: probs.to_vec(),
            vocab: (0..n).map(|i| i * 3).collect(),
            layer_index: 0,
        }
    }

    fn names(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("ev{i}")).collect()
    }

    #[test]
    fn threshold_is_inclusive() {
        assert!(is_active(0.1));
        assert!(is_active(0.1f32 as f64));
        assert!(!is_active(0.099_999_9));
    }

    #[test]
    fn all_inactive_means_no_edges() {
        let g = graph(&[0.05, 0.0, 0.09]);
        let ex = GraphExport::from_graph(&g, &names(3)).unwrap();
        assert!(ex.edges.is_empty());
        assert!(ex.nodes.iter().all(|n| !n.active));
    }

    #[test]
    fn all_active_keeps_every_pair() {
        let g = graph(&[0.5; 25]);
        let ex = GraphExport::from_graph(&g, &names(25)).unwrap();
        assert_eq!(ex.edges.len(), 625);
    }

    #[test]
    fn edges_need_one_active_end_and_carry_the_mean() {
        let g = graph(&[0.9, 0.02, 0.03]);
        let ex = GraphExport::from_graph(&g, &names(3)).unwrap();
        assert_eq!(ex.edges.len(), 5);
        assert!(ex.edges.iter().all(|e| e.src == 0 || e.dst == 0));
        for e in &ex.edges {
            let v = g.edge(e.src, e.dst);
            assert_eq!(e.mean_weight, v.iter().map(|&x| x as f64).sum::<f64>() / 4.0);
        }
    }

    #[test]
    fn dot_lists_the_same_edges() {
        let ex = GraphExport::from_graph(&graph(&[0.9, 0.02, 0.5]), &names(3)).unwrap();
        let dot = ex.to_dot();
        assert_eq!(dot.matches(" -> ").count(), ex.edges.len());
        assert!(dot.contains("n1 [label=\"ev1\"") && dot.contains("style=dashed"));
        let json: GraphExport = serde_json::from_str(&ex.to_json()).unwrap();
        assert_eq!(json, ex);
    }

    #[test]
    fn format_parsing() {
        assert_eq!("dot".parse::<ExportFormat>().unwrap(), ExportFormat::Dot);
        assert!("svg".parse::<ExportFormat>().is_err());
    }
}
