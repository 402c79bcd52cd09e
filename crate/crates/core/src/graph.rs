//! Word co-occurrence networks and sentence-level graphs.
//!
//! Adjacency convention: `adjacency[(i, j)]` is the weight of the edge
//! `j -> i`, so row `i` lists the edges arriving at node `i`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Node id carried by the master (document) node.
pub const MASTER_ID: usize = usize::MAX;
pub const MASTER_LABEL: &str = "⊙";

#[derive(Debug, Clone, PartialEq)]
pub struct DocumentGraph {
    /// Vocabulary index (or sentence index) per node; [`MASTER_ID`] for the
    /// master node.
    pub node_ids: Vec<usize>,
    pub adjacency: Matrix,
    pub master_index: Option<usize>,
    pub directed: bool,
}

impl DocumentGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Positions of every node except the master, in node order.
    pub fn content_nodes(&self) -> Vec<usize> {
        (0..self.num_nodes())
            .filter(|&i| Some(i) != self.master_index)
            .collect()
    }

    /// Sum of weights, master edges excluded.
    pub fn content_weight(&self) -> f64 {
        let n = self.num_nodes();
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                if Some(i) != self.master_index && Some(j) != self.master_index {
                    total += self.adjacency[(i, j)];
                }
            }
        }
        total
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> DocumentGraph {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n);
        let mut node_ids = vec![0; n];
        let mut adjacency = Matrix::zeros(n, n);
        for i in 0..n {
            node_ids[perm[i]] = self.node_ids[i];
            for j in 0..n {
                adjacency[(perm[i], perm[j])] = self.adjacency[(i, j)];
            }
        }
        DocumentGraph {
            node_ids,
            adjacency,
            master_index: self.master_index.map(|m| perm[m]),
            directed: self.directed,
        }
    }

    /// Edges as `(src, dst, weight)`, sorted by source then destination.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.num_nodes();
        let mut edges = Vec::new();
        for src in 0..n {
            for dst in 0..n {
                let w = self.adjacency[(dst, src)];
                if w != 0.0 {
                    edges.push((src, dst, w));
                }
            }
        }
        edges
    }

    pub fn export(&self, node_label: impl Fn(usize) -> String) -> GraphExport {
        GraphExport {
            nodes: self
                .node_ids
                .iter()
                .map(|&id| {
                    if id == MASTER_ID {
                        MASTER_LABEL.to_owned()
                    } else {
                        node_label(id)
                    }
                })
                .collect(),
            directed: self.directed,
            master_index: self.master_index,
            edges: self
                .edges()
                .into_iter()
                .map(|(source, target, weight)| ExportedEdge {
                    source,
                    target,
                    weight,
                })
                .collect(),
        }
    }
}

/// Serialized form of a [`DocumentGraph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphExport {
    pub nodes: Vec<String>,
    pub directed: bool,
    pub master_index: Option<usize>,
    pub edges: Vec<ExportedEdge>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExportedEdge {
    pub source: usize,
    pub target: usize,
    pub weight: f64,
}

impl GraphExport {
    /// `src dst weight` per line, nodes written by label.
    pub fn to_edge_list(&self) -> String {
        let mut s = String::new();
        for e in &self.edges {
            s.push_str(&format!(
                "{} {} {}\n",
                self.nodes[e.source], self.nodes[e.target], e.weight
            ));
        }
        s
    }
}

/// Builds the co-occurrence network of a token stream.
///
/// One node per distinct token, in first-occurrence order. The window slides
/// one position at a time over the whole stream (a stream shorter than the
/// window forms a single window); within each window instance every ordered
/// pair of positions `(earlier, later)` with distinct tokens adds 1 to the
/// edge `earlier -> later`, or to both directions when `directed` is false.
/// With `with_master`, a master node is appended last and linked both ways
/// to every other node with weight 1.
pub fn build_cooccurrence_graph(
    tokens: &[usize],
    window: usize,
    directed: bool,
    with_master: bool,
) -> Result<DocumentGraph> {
    if tokens.is_empty() {
        return Err(Error::EmptyGraph);
    }
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "window must be at least 2, got {window}"
        )));
    }
    let mut node_ids: Vec<usize> = Vec::new();
    let mut position_node = Vec::with_capacity(tokens.len());
    let mut lookup = std::collections::HashMap::new();
    for &t in tokens {
        let node = *lookup.entry(t).or_insert_with(|| {
            node_ids.push(t);
            node_ids.len() - 1
        });
        position_node.push(node);
    }
    let words = node_ids.len();
    let n = words + usize::from(with_master);
    let mut adjacency = Matrix::zeros(n, n);

    // A pair of positions (i, j), i < j, shares every window whose start s
    // satisfies j + 1 - window <= s <= i, clipped to the valid starts.
    let last_start = tokens.len().saturating_sub(window);
    for j in 1..tokens.len() {
        let lo = (j + 1).saturating_sub(window);
        for i in lo..j {
            let (u, w) = (position_node[i], position_node[j]);
            if u == w {
                continue;
            }
            let hi = i.min(last_start);
            if hi < lo {
                continue;
            }
            let count = (hi - lo + 1) as f64;
            adjacency[(w, u)] += count;
            if !directed {
                adjacency[(u, w)] += count;
            }
        }
    }

    let master_index = with_master.then(|| {
        for k in 0..words {
            adjacency[(words, k)] = 1.0;
            adjacency[(k, words)] = 1.0;
        }
        node_ids.push(MASTER_ID);
        words
    });
    Ok(DocumentGraph {
        node_ids,
        adjacency,
        master_index,
        directed,
    })
}

/// Row-normalized operator `D^-1 A` (rows with no incoming weight stay
/// zero), or `A` itself when `enabled` is false.
pub fn renormalize(graph: &DocumentGraph, enabled: bool) -> Matrix {
    let mut m = graph.adjacency.clone();
    if enabled {
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let total: f64 = row.iter().sum();
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
            }
        }
    }
    m
}

/// Complete undirected graph over `k` sentences, without master node.
pub fn clique_graph(k: usize) -> Result<DocumentGraph> {
    if k == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut adjacency = Matrix::filled(k, k, 1.0);
    for i in 0..k {
        adjacency[(i, i)] = 0.0;
    }
    Ok(DocumentGraph {
        node_ids: (0..k).collect(),
        adjacency,
        master_index: None,
        directed: false,
    })
}

/// Directed chain `0 -> 1 -> ... -> k-1` over `k` sentences.
pub fn path_graph(k: usize) -> Result<DocumentGraph> {
    if k == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut adjacency = Matrix::zeros(k, k);
    for i in 0..k - 1 {
        adjacency[(i + 1, i)] = 1.0;
    }
    Ok(DocumentGraph {
        node_ids: (0..k).collect(),
        adjacency,
        master_index: None,
        directed: true,
    })
}
