//! JSONL dataset files: one graph record per line.
//!
//! Record shape:
//! `{"x": [[f,...],...], "edges": [[i,j],...], "edge_x": [[f,...],...] | null, "y": [0|1|null,...]}`
//! with 0-based indices and `null` labels meaning unobserved.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;

#[derive(Debug, Serialize, Deserialize)]
struct GraphRecord {
    x: Vec<Vec<f64>>,
    edges: Vec<[usize; 2]>,
    edge_x: Option<Vec<Vec<f64>>>,
    y: Vec<Option<u8>>,
}

/// Parse one JSONL line into a validated [`Graph`]. This is the untrusted-input
/// boundary: arbitrary bytes must produce either a graph or an error, never a
/// panic.
pub fn graph_from_json_line(line: &str) -> Result<Graph> {
    let record: GraphRecord = serde_json::from_str(line)?;
    let n = record.x.len();
    let d_in = record.x.first().map_or(0, Vec::len);
    let mut node_features = Vec::with_capacity(n * d_in);
    for (i, row) in record.x.iter().enumerate() {
        if row.len() != d_in {
            return Err(Error::invalid(
                "graph record",
                format!("node {i} has {} features, expected {d_in}", row.len()),
            ));
        }
        for &v in row {
            if !v.is_finite() {
                return Err(Error::invalid("graph record", format!("non-finite feature on node {i}")));
            }
            node_features.push(v);
        }
    }
    let edges: Vec<(usize, usize)> = record.edges.iter().map(|&[i, j]| (i, j)).collect();
    let (edge_features, d_edge) = match record.edge_x {
        None => (Vec::new(), 0),
        Some(rows) => {
            if rows.len() != edges.len() {
                return Err(Error::invalid(
                    "graph record",
                    format!("{} edge feature rows for {} edges", rows.len(), edges.len()),
                ));
            }
            let d_edge = rows.first().map_or(0, Vec::len);
            let mut flat = Vec::with_capacity(rows.len() * d_edge);
            for (i, row) in rows.iter().enumerate() {
                if row.len() != d_edge {
                    return Err(Error::invalid(
                        "graph record",
                        format!("edge {i} has {} features, expected {d_edge}", row.len()),
                    ));
                }
                for &v in row {
                    if !v.is_finite() {
                        return Err(Error::invalid(
                            "graph record",
                            format!("non-finite feature on edge {i}"),
                        ));
                    }
                    flat.push(v);
                }
            }
            (flat, d_edge)
        }
    };
    let mut labels = Vec::with_capacity(record.y.len());
    let mut label_mask = Vec::with_capacity(record.y.len());
    for (t, entry) in record.y.iter().enumerate() {
        match entry {
            None => {
                labels.push(0.0);
                label_mask.push(0.0);
            }
            Some(v @ (0 | 1)) => {
                labels.push(f64::from(*v));
                label_mask.push(1.0);
            }
            Some(v) => {
                return Err(Error::invalid(
                    "graph record",
                    format!("label for task {t} is {v}, expected 0, 1, or null"),
                ));
            }
        }
    }
    let graph = Graph {
        node_features,
        num_nodes: n,
        d_in,
        edges,
        edge_features,
        d_edge,
        labels,
        label_mask,
    };
    graph.validate("graph record")?;
    Ok(graph)
}

fn graph_to_record(g: &Graph) -> GraphRecord {
    let x = (0..g.num_nodes)
        .map(|i| g.node_features[i * g.d_in..(i + 1) * g.d_in].to_vec())
        .collect();
    let edges = g.edges.iter().map(|&(i, j)| [i, j]).collect();
    let edge_x = if g.d_edge == 0 {
        None
    } else {
        Some(
            (0..g.edges.len())
                .map(|e| g.edge_features[e * g.d_edge..(e + 1) * g.d_edge].to_vec())
                .collect(),
        )
    };
    let y = g
        .labels
        .iter()
        .zip(&g.label_mask)
        .map(|(&y, &m)| if m == 0.0 { None } else { Some(y as u8) })
        .collect();
    GraphRecord { x, edges, edge_x, y }
}

/// Load every graph in a JSONL file. Failures name the 1-based line.
pub fn load_jsonl(path: &Path) -> Result<Vec<Graph>> {
    let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut graphs = Vec::new();
    for (idx, line) in content.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let graph = graph_from_json_line(line).map_err(|e| Error::GraphRecord {
            path: path.display().to_string(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        graphs.push(graph);
    }
    Ok(graphs)
}

/// Write graphs as JSONL, one record per line, LF-terminated.
pub fn save_jsonl(path: &Path, graphs: &[Graph]) -> Result<()> {
    let mut out = Vec::new();
    for g in graphs {
        serde_json::to_writer(&mut out, &graph_to_record(g))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}
