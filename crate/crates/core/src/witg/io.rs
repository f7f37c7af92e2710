//! Edge-list serialization.
//!
//! ```text
//! # witg nodes=<|V|> edges=<E> sha256=<hex of the edge lines>
//! <i> <j> <raw> <normalized>      (one line per undirected edge, i < j)
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use super::TransitionGraph;

#[derive(Debug, Error)]
pub enum GraphIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("graph file: {0}")]
    Format(String),
}

fn edge_lines(graph: &TransitionGraph) -> String {
    let mut body = String::new();
    for (i, j, raw, norm) in graph.edges() {
        body.push_str(&format!("{i} {j} {raw:?} {norm:?}\n"));
    }
    body
}

/// Returns the file text; the header carries the content hash of the edges.
pub fn write_graph(graph: &TransitionGraph, path: &Path) -> Result<String, GraphIoError> {
    let text = graph_text(graph);
    fs::write(path, &text).map_err(|e| GraphIoError::Io { path: path.display().to_string(), source: e })?;
    Ok(text)
}

pub fn graph_text(graph: &TransitionGraph) -> String {
    let body = edge_lines(graph);
    let hash = hex::encode(Sha256::digest(body.as_bytes()));
    format!("# witg nodes={} edges={} sha256={hash}\n{body}", graph.node_count(), graph.edge_count())
}

/// Hash recorded in the header of a serialized graph.
pub fn content_hash(graph: &TransitionGraph) -> String {
    hex::encode(Sha256::digest(edge_lines(graph).as_bytes()))
}

pub fn read_graph(path: &Path) -> Result<TransitionGraph, GraphIoError> {
    let text = fs::read_to_string(path).map_err(|e| GraphIoError::Io { path: path.display().to_string(), source: e })?;
    parse_graph(&text)
}

pub fn parse_graph(text: &str) -> Result<TransitionGraph, GraphIoError> {
    let bad = |m: String| GraphIoError::Format(m);
    let (header, body) = text.split_once('\n').ok_or_else(|| bad("missing header".into()))?;
    let fields: Vec<&str> = header.strip_prefix("# witg ").ok_or_else(|| bad("bad header".into()))?.split(' ').collect();
    let field = |key: &str| {
        fields
            .iter()
            .find_map(|f| f.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| bad(format!("header lacks {key}")))
    };
    let nodes: usize = field("nodes")?.parse().map_err(|_| bad("bad node count".into()))?;
    let edges: usize = field("edges")?.parse().map_err(|_| bad("bad edge count".into()))?;
    let hash = field("sha256")?;
    if hex::encode(Sha256::digest(body.as_bytes())) != hash {
        return Err(bad("content hash mismatch".into()));
    }

    let mut raw_edges = Vec::with_capacity(edges);
    let mut stored = Vec::with_capacity(edges);
    for (no, line) in body.lines().enumerate() {
        let parts: Vec<&str> = line.split(' ').collect();
        let [i, j, w, n] = parts[..] else {
            return Err(bad(format!("line {}: expected 4 fields", no + 2)));
        };
        let parse_err = |_| bad(format!("line {}: bad number", no + 2));
        let i: usize = i.parse().map_err(|_| bad(format!("line {}: bad node", no + 2)))?;
        let j: usize = j.parse().map_err(|_| bad(format!("line {}: bad node", no + 2)))?;
        let w: f64 = w.parse().map_err(parse_err)?;
        let n: f64 = n.parse().map_err(parse_err)?;
        raw_edges.push((i, j, w));
        stored.push(n);
    }
    let graph = TransitionGraph::from_raw_edges(nodes, raw_edges);
    if graph.edge_count() != edges || graph.node_count() != nodes {
        return Err(bad("edge or node count disagrees with header".into()));
    }
    if graph.edges().zip(&stored).any(|((_, _, _, n), s)| n.to_bits() != s.to_bits()) {
        return Err(bad("normalized weights disagree with raw weights".into()));
    }
    Ok(graph)
}
