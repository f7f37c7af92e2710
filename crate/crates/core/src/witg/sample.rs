use std::collections::{BTreeSet, HashMap};

use rand::seq::index::sample;

use super::TransitionGraph;
use crate::numerics::rng::{SeedStreams, SAMPLING};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SamplerConfig {
    /// Sampling depth `M`.
    pub depth: usize,
    /// Neighbors drawn per frontier node per step, `N`.
    pub size: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { depth: 2, size: 20, seed: 0 }
    }
}

impl SamplerConfig {
    /// Upper bound on view size for `anchors` anchor items:
    /// `anchors * (1 + N + ... + N^M)`.
    pub fn node_bound(&self, anchors: usize) -> usize {
        let mut per_anchor = 0usize;
        let mut layer = 1usize;
        for _ in 0..=self.depth {
            per_anchor = per_anchor.saturating_add(layer);
            layer = layer.saturating_mul(self.size);
        }
        anchors.saturating_mul(per_anchor)
    }
}

/// A sampled subgraph anchored on one sequence.
///
/// Local node `k` is `nodes[k]`. The distinct anchors come first in
/// sequence order, followed by the other sampled nodes in ascending item
/// order.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledView {
    pub anchors: Vec<usize>,
    pub nodes: Vec<usize>,
    /// Local row of each anchor position.
    pub anchor_rows: Vec<usize>,
    /// Undirected edges `(local i, local j, normalized weight)`, `i < j`.
    pub edges: Vec<(usize, usize, f64)>,
    /// Per local node: `(local neighbor, normalized weight)`.
    pub neighbors: Vec<Vec<(usize, f64)>>,
}

impl SampledView {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Each edge in both directions as `(dst, src, weight)`; with `weighted`
    /// off every existing edge carries 1.
    pub fn directed_edges(&self, weighted: bool) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::with_capacity(self.edges.len() * 2);
        for &(a, b, w) in &self.edges {
            let w = if weighted { w } else { 1.0 };
            out.push((a, b, w));
            out.push((b, a, w));
        }
        out
    }

    /// `(dst, src, 1/deg(dst))` so aggregation yields the neighbor mean.
    pub fn mean_edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for (dst, nbrs) in self.neighbors.iter().enumerate() {
            let inv = 1.0 / nbrs.len().max(1) as f64;
            out.extend(nbrs.iter().map(|&(src, _)| (dst, src, inv)));
        }
        out
    }
}

/// Samples one augmented view of `anchors`.
///
/// From every anchor, `depth` rounds run; in each, every frontier node
/// contributes `min(size, degree)` distinct uniformly chosen neighbors and
/// those form the next frontier. The view keeps every parent edge between
/// sampled nodes with its normalized weight. The draw is a pure function of
/// `(cfg.seed, identity, draw)`; anchors absent from the graph become
/// isolated nodes.
pub fn sample_view(graph: &TransitionGraph, anchors: &[usize], identity: u64, cfg: &SamplerConfig, draw: u64) -> SampledView {
    let mut rng = SeedStreams::new(cfg.seed).keyed(SAMPLING, &[identity, draw]);
    let mut sampled: BTreeSet<usize> = BTreeSet::new();
    for &anchor in anchors {
        let mut frontier = vec![anchor];
        for _ in 0..cfg.depth {
            let mut next: BTreeSet<usize> = BTreeSet::new();
            for &f in &frontier {
                let nbrs = graph.neighbors(f);
                if nbrs.is_empty() {
                    continue;
                }
                let take = cfg.size.min(nbrs.len());
                for k in sample(&mut rng, nbrs.len(), take) {
                    next.insert(nbrs[k].neighbor);
                }
            }
            sampled.extend(&next);
            frontier = next.into_iter().collect();
            if frontier.is_empty() {
                break;
            }
        }
    }

    let mut nodes: Vec<usize> = Vec::new();
    let mut local: HashMap<usize, usize> = HashMap::new();
    let mut anchor_rows = Vec::with_capacity(anchors.len());
    for &a in anchors {
        let row = *local.entry(a).or_insert_with(|| {
            nodes.push(a);
            nodes.len() - 1
        });
        anchor_rows.push(row);
    }
    for v in sampled {
        local.entry(v).or_insert_with(|| {
            nodes.push(v);
            nodes.len() - 1
        });
    }

    let mut edges = Vec::new();
    let mut neighbors = vec![Vec::new(); nodes.len()];
    for (i, &v) in nodes.iter().enumerate() {
        for e in graph.neighbors(v) {
            if let Some(&j) = local.get(&e.neighbor) {
                neighbors[i].push((j, e.norm));
                if v < e.neighbor {
                    edges.push((i.min(j), i.max(j), e.norm));
                }
            }
        }
    }
    edges.sort_by_key(|&(a, b, _)| (a, b));
    SampledView { anchors: anchors.to_vec(), nodes, anchor_rows, edges, neighbors }
}
