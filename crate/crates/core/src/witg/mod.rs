//! The weighted item transition graph and per-sequence sampled views.
//!
//! Every pair of items `k in {1, 2, 3}` positions apart in a training
//! sequence adds `1/k` to the weight of their undirected edge. After all
//! sequences are folded in, each edge weight is rescaled by
//! `1/deg(i) + 1/deg(j)`, with `deg` the unweighted neighbor count.

mod io;
mod sample;

use std::collections::{BTreeMap, HashMap};

use crate::corpus::{Sequence, PAD};

pub use io::{content_hash, graph_text, parse_graph, read_graph, write_graph, GraphIoError};
pub use sample::{sample_view, SampledView, SamplerConfig};

/// Hop distances that create edges.
pub const MAX_HOP: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub neighbor: usize,
    pub raw: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransitionGraph {
    node_count: usize,
    /// `adjacency[i]` sorted by neighbor; slot 0 (padding) stays empty.
    adjacency: Vec<Vec<Edge>>,
}

impl TransitionGraph {
    pub fn empty(node_count: usize) -> Self {
        Self { node_count, adjacency: vec![Vec::new(); node_count + 1] }
    }

    /// Builds from undirected raw weights and derives normalized weights.
    /// Duplicate pairs are summed; self-loops and padding are dropped.
    pub fn from_raw_edges(node_count: usize, edges: impl IntoIterator<Item = (usize, usize, f64)>) -> Self {
        let mut acc: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (a, b, w) in edges {
            if a == b || a == PAD || b == PAD {
                continue;
            }
            *acc.entry((a.min(b), a.max(b))).or_default() += w;
        }
        Self::from_pair_map(node_count, acc)
    }

    fn from_pair_map(node_count: usize, pairs: BTreeMap<(usize, usize), f64>) -> Self {
        let node_count = pairs.keys().map(|&(_, b)| b).max().unwrap_or(0).max(node_count);
        let mut adjacency: Vec<Vec<Edge>> = vec![Vec::new(); node_count + 1];
        let mut degree = vec![0usize; node_count + 1];
        for &(a, b) in pairs.keys() {
            degree[a] += 1;
            degree[b] += 1;
        }
        for (&(a, b), &raw) in &pairs {
            let norm = raw * (1.0 / degree[a] as f64 + 1.0 / degree[b] as f64);
            adjacency[a].push(Edge { neighbor: b, raw, norm });
            adjacency[b].push(Edge { neighbor: a, raw, norm });
        }
        for adj in &mut adjacency {
            adj.sort_by_key(|e| e.neighbor);
        }
        Self { node_count, adjacency }
    }

    /// Item count `|V|`; valid node indices are `1..=node_count`.
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn neighbors(&self, node: usize) -> &[Edge] {
        self.adjacency.get(node).map_or(&[], Vec::as_slice)
    }

    pub fn degree(&self, node: usize) -> usize {
        self.neighbors(node).len()
    }

    pub fn edge(&self, a: usize, b: usize) -> Option<&Edge> {
        let adj = self.neighbors(a);
        adj.binary_search_by_key(&b, |e| e.neighbor).ok().map(|i| &adj[i])
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Each undirected edge once, as `(i, j, raw, norm)` with `i < j`.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize, f64, f64)> + '_ {
        self.adjacency.iter().enumerate().flat_map(|(a, adj)| {
            adj.iter().filter(move |e| e.neighbor > a).map(move |e| (a, e.neighbor, e.raw, e.norm))
        })
    }

    pub fn stats(&self) -> StatsReport {
        graph_stats(self)
    }
}

/// Folds every training sequence into the graph.
///
/// Per-pair hop counts are accumulated as integers and converted to weights
/// once at the end, so the result does not depend on sequence order.
pub fn build_witg(train_sequences: &[Sequence], item_count: usize) -> TransitionGraph {
    let mut hops: HashMap<(usize, usize), [u64; MAX_HOP]> = HashMap::new();
    for seq in train_sequences {
        let items = &seq.items;
        for t in 0..items.len() {
            for k in 1..=MAX_HOP {
                let Some(&next) = items.get(t + k) else { break };
                let cur = items[t];
                if cur == next || cur == PAD || next == PAD {
                    continue;
                }
                hops.entry((cur.min(next), cur.max(next))).or_default()[k - 1] += 1;
            }
        }
    }
    let pairs = hops
        .into_iter()
        .map(|(pair, counts)| {
            let raw = counts.iter().enumerate().map(|(k, &c)| c as f64 / (k + 1) as f64).sum();
            (pair, raw)
        })
        .collect();
    TransitionGraph::from_pair_map(item_count, pairs)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

impl Quantiles {
    fn of(mut values: Vec<f64>) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        values.sort_by(f64::total_cmp);
        let at = |q: f64| {
            let pos = q * (values.len() - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = pos.ceil() as usize;
            values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
        };
        Self { min: values[0], q25: at(0.25), median: at(0.5), q75: at(0.75), max: values[values.len() - 1] }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StatsReport {
    pub nodes: usize,
    /// Nodes with at least one edge.
    pub connected_nodes: usize,
    pub edges: usize,
    /// degree -> number of nodes with that degree (connected nodes only).
    pub degree_histogram: BTreeMap<usize, usize>,
    pub raw_weight: Quantiles,
    pub norm_weight: Quantiles,
}

impl StatsReport {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("nodes = {}\n", self.nodes));
        s.push_str(&format!("connected_nodes = {}\n", self.connected_nodes));
        s.push_str(&format!("edges = {}\n", self.edges));
        for (name, q) in [("raw_weight", &self.raw_weight), ("norm_weight", &self.norm_weight)] {
            s.push_str(&format!(
                "{name}.min = {}\n{name}.q25 = {}\n{name}.median = {}\n{name}.q75 = {}\n{name}.max = {}\n",
                q.min, q.q25, q.median, q.q75, q.max
            ));
        }
        for (deg, count) in &self.degree_histogram {
            s.push_str(&format!("degree.{deg} = {count}\n"));
        }
        s
    }
}

pub fn graph_stats(graph: &TransitionGraph) -> StatsReport {
    let mut degree_histogram = BTreeMap::new();
    for node in 1..=graph.node_count() {
        let d = graph.degree(node);
        if d > 0 {
            *degree_histogram.entry(d).or_insert(0) += 1;
        }
    }
    let (raw, norm): (Vec<f64>, Vec<f64>) = graph.edges().map(|(_, _, r, n)| (r, n)).unzip();
    StatsReport {
        nodes: graph.node_count(),
        connected_nodes: degree_histogram.values().sum(),
        edges: graph.edge_count(),
        degree_histogram,
        raw_weight: Quantiles::of(raw),
        norm_weight: Quantiles::of(norm),
    }
}
