//! Graph data model, dataset I/O, synthetic generation, batching, and the
//! structural-noise operators used by the robustness protocol.

pub mod io;
pub mod perturb;
pub mod synthetic;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// One labeled graph. Edges are stored once as undirected pairs; message
/// passing materializes both directions at batch time.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// n x d_in, row-major.
    pub node_features: Vec<f64>,
    pub num_nodes: usize,
    pub d_in: usize,
    /// Undirected pairs {i, j}, i != j, no duplicates, order preserved.
    pub edges: Vec<(usize, usize)>,
    /// |E| x d_edge, row-major; empty when d_edge == 0.
    pub edge_features: Vec<f64>,
    pub d_edge: usize,
    /// Per-task binary labels; entries with mask 0 are ignored everywhere.
    pub labels: Vec<f64>,
    pub label_mask: Vec<f64>,
}

impl Graph {
    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn n_tasks(&self) -> usize {
        self.labels.len()
    }

    /// Unordered endpoint set for duplicate checks.
    pub fn edge_key(i: usize, j: usize) -> (usize, usize) {
        if i <= j {
            (i, j)
        } else {
            (j, i)
        }
    }

    /// Check every structural invariant. `context` prefixes error messages.
    pub fn validate(&self, context: &str) -> Result<()> {
        if self.num_nodes == 0 {
            return Err(Error::invalid(context, "graph has no nodes"));
        }
        if self.node_features.len() != self.num_nodes * self.d_in {
            return Err(Error::invalid(
                context,
                format!(
                    "node feature buffer holds {} values, expected {}x{}",
                    self.node_features.len(),
                    self.num_nodes,
                    self.d_in
                ),
            ));
        }
        if self.edge_features.len() != self.edges.len() * self.d_edge {
            return Err(Error::invalid(
                context,
                format!(
                    "edge feature buffer holds {} values, expected {}x{}",
                    self.edge_features.len(),
                    self.edges.len(),
                    self.d_edge
                ),
            ));
        }
        if self.label_mask.len() != self.labels.len() {
            return Err(Error::invalid(
                context,
                "label mask length differs from label length",
            ));
        }
        let mut seen = HashSet::with_capacity(self.edges.len());
        for &(i, j) in &self.edges {
            if i == j {
                return Err(Error::invalid(context, format!("self-loop at node {i}")));
            }
            if i >= self.num_nodes || j >= self.num_nodes {
                return Err(Error::invalid(
                    context,
                    format!("edge ({i},{j}) exceeds node count {}", self.num_nodes),
                ));
            }
            if !seen.insert(Self::edge_key(i, j)) {
                return Err(Error::invalid(context, format!("duplicate edge ({i},{j})")));
            }
        }
        for (&y, &m) in self.labels.iter().zip(&self.label_mask) {
            if m != 0.0 && m != 1.0 {
                return Err(Error::invalid(context, "label mask entries must be 0 or 1"));
            }
            if m == 1.0 && y != 0.0 && y != 1.0 {
                return Err(Error::invalid(context, "observed labels must be 0 or 1"));
            }
        }
        Ok(())
    }

    /// Node degrees under the undirected edge set.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0usize; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }
}

/// Concatenation of several graphs with index-shifted, direction-expanded
/// edges, ready for message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    pub node_features: Vec<f64>,
    pub total_nodes: usize,
    pub d_in: usize,
    /// Directed edges: for each stored pair {i,j} both (i,j) and (j,i).
    pub edge_src: Vec<usize>,
    pub edge_dst: Vec<usize>,
    /// Per directed edge, row-major; empty when d_edge == 0.
    pub edge_features: Vec<f64>,
    pub d_edge: usize,
    /// Node index -> graph index; nondecreasing.
    pub segments: Vec<usize>,
    pub num_graphs: usize,
    /// num_graphs x n_tasks, row-major.
    pub labels: Vec<f64>,
    pub label_mask: Vec<f64>,
    pub n_tasks: usize,
}

impl BatchedGraph {
    pub fn num_directed_edges(&self) -> usize {
        self.edge_src.len()
    }

    /// Count of nodes per graph (for mean pooling).
    pub fn nodes_per_graph(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_graphs];
        for &s in &self.segments {
            counts[s] += 1;
        }
        counts
    }
}

/// Index-shifted concatenation. Both edge directions are materialized so the
/// aggregation step can scatter by destination node.
pub fn batch(graphs: &[&Graph]) -> Result<BatchedGraph> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::invalid("batch", "empty batch"))?;
    let d_in = first.d_in;
    let d_edge = first.d_edge;
    let n_tasks = first.n_tasks();
    let mut out = BatchedGraph {
        node_features: Vec::new(),
        total_nodes: 0,
        d_in,
        edge_src: Vec::new(),
        edge_dst: Vec::new(),
        edge_features: Vec::new(),
        d_edge,
        segments: Vec::new(),
        num_graphs: graphs.len(),
        labels: Vec::new(),
        label_mask: Vec::new(),
        n_tasks,
    };
    for (gi, g) in graphs.iter().enumerate() {
        if g.d_in != d_in {
            return Err(Error::dimension("batch", format!("d_in {d_in}"), format!("{}", g.d_in)));
        }
        if g.d_edge != d_edge {
            return Err(Error::dimension(
                "batch",
                format!("d_edge {d_edge}"),
                format!("{}", g.d_edge),
            ));
        }
        if g.n_tasks() != n_tasks {
            return Err(Error::dimension(
                "batch",
                format!("{n_tasks} tasks"),
                format!("{}", g.n_tasks()),
            ));
        }
        let offset = out.total_nodes;
        out.node_features.extend_from_slice(&g.node_features);
        out.segments.extend(std::iter::repeat(gi).take(g.num_nodes));
        out.total_nodes += g.num_nodes;
        for (ei, &(i, j)) in g.edges.iter().enumerate() {
            out.edge_src.push(i + offset);
            out.edge_dst.push(j + offset);
            out.edge_src.push(j + offset);
            out.edge_dst.push(i + offset);
            if d_edge > 0 {
                let row = &g.edge_features[ei * d_edge..(ei + 1) * d_edge];
                out.edge_features.extend_from_slice(row);
                out.edge_features.extend_from_slice(row);
            }
        }
        out.labels.extend_from_slice(&g.labels);
        out.label_mask.extend_from_slice(&g.label_mask);
    }
    Ok(out)
}

/// Disjoint train/validation/test index lists over a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Shuffle 0..n with the given stream and cut by ratios: train gets
/// floor(r_train * n), validation floor(r_val * n), test the remainder.
pub fn split_dataset(n: usize, r_train: f64, r_val: f64, rng: &mut ChaCha8Rng) -> Result<DatasetSplit> {
    if !(0.0..=1.0).contains(&r_train) || !(0.0..=1.0).contains(&r_val) || r_train + r_val > 1.0 {
        return Err(Error::invalid(
            "split_dataset",
            format!("ratios ({r_train}, {r_val}) must be nonnegative and sum to at most 1"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_train = (r_train * n as f64).floor() as usize;
    let n_val = (r_val * n as f64).floor() as usize;
    let train = order[..n_train].to_vec();
    let validation = order[n_train..n_train + n_val].to_vec();
    let test = order[n_train + n_val..].to_vec();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}
