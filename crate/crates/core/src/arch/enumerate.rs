use std::collections::BTreeMap;

use super::doc::canonical_document;
use super::{canonicalize, Architecture, CellGraph, OpLabel};

/// Bounds of an exhaustively enumerable cell space.
#[derive(Clone, Debug)]
pub struct SpaceConstraints {
    /// Smallest cell size, counting input and output (at least 2).
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub max_edges: usize,
    /// Labels allowed on interior nodes.
    pub ops: Vec<OpLabel>,
}

impl SpaceConstraints {
    pub fn new(max_nodes: usize, max_edges: usize, ops: Vec<OpLabel>) -> Self {
        SpaceConstraints {
            min_nodes: 2,
            max_nodes,
            max_edges,
            ops,
        }
    }
}

/// Every valid cell within the constraints, once per canonical form, ordered
/// by (node count, canonical document). `prototype` supplies the backbone.
///
/// Cost grows as `2^(n(n-1)/2) * |ops|^(n-2)`; 5 nodes and 3 ops take
/// milliseconds, 7 nodes is out of reach.
pub fn enumerate_space(
    prototype: &Architecture,
    constraints: &SpaceConstraints,
) -> impl Iterator<Item = Architecture> {
    let mut found: BTreeMap<(usize, String), Architecture> = BTreeMap::new();
    let lo = constraints.min_nodes.max(2);
    for n in lo..=constraints.max_nodes {
        let pairs: Vec<(usize, usize)> = (0..n)
            .flat_map(|s| (s + 1..n).map(move |t| (s, t)))
            .collect();
        let interior = n - 2;
        if interior > 0 && constraints.ops.is_empty() {
            continue;
        }
        for mask in 0u64..(1u64 << pairs.len()) {
            if mask.count_ones() as usize > constraints.max_edges {
                continue;
            }
            let edges: Vec<(usize, usize)> = pairs
                .iter()
                .enumerate()
                .filter(|(b, _)| mask >> b & 1 == 1)
                .map(|(_, &e)| e)
                .collect();
            if !connected_without_dangling(n, &edges) {
                continue;
            }
            let combos = constraints.ops.len().pow(interior as u32);
            for mut code in 0..combos.max(1) {
                let mut node_ops = Vec::with_capacity(n);
                node_ops.push(OpLabel::Input);
                for _ in 0..interior {
                    node_ops.push(constraints.ops[code % constraints.ops.len()]);
                    code /= constraints.ops.len();
                }
                node_ops.push(OpLabel::Output);
                let arch = canonicalize(&prototype.with_cell(CellGraph {
                    node_ops,
                    edges: edges.clone(),
                }));
                let key = (n, canonical_document(&arch));
                found.entry(key).or_insert(arch);
            }
        }
    }
    found.into_values()
}

fn connected_without_dangling(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut indeg = vec![0usize; n];
    let mut outdeg = vec![0usize; n];
    for &(s, t) in edges {
        outdeg[s] += 1;
        indeg[t] += 1;
    }
    outdeg[0] > 0 && indeg[n - 1] > 0 && (1..n - 1).all(|i| indeg[i] > 0 && outdeg[i] > 0)
}
