use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use super::doc::canonical_document;
use super::{validate_architecture, ArchError, Architecture, CellGraph, OpLabel};

/// SHA-256 of the canonical `obfunas-arch/v1` document.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ArchHash(pub [u8; 32]);

impl fmt::Display for ArchHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ArchHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ArchHash({self})")
    }
}

impl FromStr for ArchHash {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s.trim()).map_err(|e| format!("bad hex digest: {e}"))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|b: Vec<u8>| format!("digest must be 32 bytes, got {}", b.len()))?;
        Ok(ArchHash(arr))
    }
}

impl serde::Serialize for ArchHash {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for ArchHash {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub(crate) fn label_key(op: &OpLabel) -> String {
    // Value maps are key-sorted, so this string is canonical.
    serde_json::to_value(op)
        .and_then(|v| serde_json::to_string(&v))
        .expect("op labels always serialize")
}

/// Canonical position -> original index. Topological order; among ready
/// nodes the smallest op label (canonical JSON) wins, then the original index.
///
/// Expects edges that reference valid nodes and form a DAG.
pub fn canonical_order(cell: &CellGraph) -> Vec<usize> {
    let n = cell.node_ops.len();
    let keys: Vec<String> = cell.node_ops.iter().map(label_key).collect();
    let mut indeg = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(s, t) in &cell.edges {
        indeg[t] += 1;
        succ[s].push(t);
    }
    let mut ready: BTreeSet<(&str, usize)> = (0..n)
        .filter(|&i| indeg[i] == 0)
        .map(|i| (keys[i].as_str(), i))
        .collect();
    let mut order = Vec::with_capacity(n);
    while let Some(first) = ready.pop_first() {
        let i = first.1;
        order.push(i);
        for &t in &succ[i] {
            indeg[t] -= 1;
            if indeg[t] == 0 {
                ready.insert((keys[t].as_str(), t));
            }
        }
    }
    order
}

/// Renumbers the cell into canonical order and sorts its edges.
pub fn canonicalize(arch: &Architecture) -> Architecture {
    let order = canonical_order(&arch.cell);
    let mut position = vec![0usize; order.len()];
    for (pos, &orig) in order.iter().enumerate() {
        position[orig] = pos;
    }
    let node_ops = order.iter().map(|&i| arch.cell.node_ops[i]).collect();
    let mut edges: Vec<(usize, usize)> = arch
        .cell
        .edges
        .iter()
        .map(|&(s, t)| (position[s], position[t]))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    arch.with_cell(CellGraph { node_ops, edges })
}

pub fn canonical_hash(arch: &Architecture) -> Result<ArchHash, ArchError> {
    let report = validate_architecture(arch);
    if !report.ok {
        return Err(ArchError::Invalid(report));
    }
    Ok(hash_document(&canonical_document(&canonicalize(arch))))
}

pub(crate) fn hash_document(doc: &str) -> ArchHash {
    let digest = Sha256::digest(doc.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&digest);
    ArchHash(out)
}
