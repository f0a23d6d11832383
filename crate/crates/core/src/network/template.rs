use std::collections::BTreeSet;

use crate::arch::{CellGraph, OpLabel};

/// Stable identifier of a cell node. Assigned once, never reused.
pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateNode {
    pub id: NodeId,
    pub op: OpLabel,
    /// Producers feeding this node, one per input slot.
    pub inputs: Vec<NodeId>,
}

/// The cell as the transforms see it: nodes in a topological order, addressed
/// by stable ids instead of positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CellTemplate {
    nodes: Vec<TemplateNode>,
    next_id: NodeId,
}

impl CellTemplate {
    /// Node `i` gets id `i`; input slots are ordered by source index.
    pub fn from_cell(cell: &CellGraph) -> Self {
        let mut nodes: Vec<TemplateNode> = cell
            .node_ops
            .iter()
            .enumerate()
            .map(|(id, &op)| TemplateNode { id, op, inputs: Vec::new() })
            .collect();
        let edges: BTreeSet<(usize, usize)> = cell.edges.iter().copied().collect();
        for (s, t) in edges {
            nodes[t].inputs.push(s);
        }
        CellTemplate {
            next_id: nodes.len(),
            nodes,
        }
    }

    pub fn nodes(&self) -> &[TemplateNode] {
        &self.nodes
    }

    pub fn next_id(&self) -> NodeId {
        self.next_id
    }

    pub fn position(&self, id: NodeId) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn node(&self, id: NodeId) -> Option<&TemplateNode> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut TemplateNode> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub(crate) fn fresh_id(&mut self) -> NodeId {
        let id = self.next_id;
        self.next_id += 1;
        id
    }

    /// Inserts a node at `pos`, shifting later nodes back.
    pub(crate) fn insert_at(&mut self, pos: usize, node: TemplateNode) {
        self.nodes.insert(pos, node);
    }

    pub fn input_id(&self) -> NodeId {
        self.nodes[0].id
    }

    pub fn output_id(&self) -> NodeId {
        self.nodes[self.nodes.len() - 1].id
    }

    /// Consumers of `id`, in node order, once per slot.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().filter(|&&s| s == id).map(move |_| n.id))
            .collect()
    }

    pub fn has_edge(&self, src: NodeId, dst: NodeId) -> bool {
        self.node(dst).is_some_and(|n| n.inputs.contains(&src))
    }

    /// Whether a directed path of at least one edge leads from `a` to `b`.
    pub fn reaches(&self, a: NodeId, b: NodeId) -> bool {
        let (Some(pa), Some(pb)) = (self.position(a), self.position(b)) else {
            return false;
        };
        if pa >= pb {
            return false;
        }
        let mut seen = BTreeSet::from([a]);
        for n in &self.nodes[pa + 1..=pb] {
            if n.inputs.iter().any(|s| seen.contains(s)) {
                seen.insert(n.id);
            }
        }
        seen.contains(&b)
    }

    /// Same as `reaches`, ignoring the direct edge `a -> b`.
    pub fn reaches_avoiding_edge(&self, a: NodeId, b: NodeId) -> bool {
        let (Some(pa), Some(pb)) = (self.position(a), self.position(b)) else {
            return false;
        };
        if pa >= pb {
            return false;
        }
        let mut seen = BTreeSet::from([a]);
        for n in &self.nodes[pa + 1..=pb] {
            let fed = n
                .inputs
                .iter()
                .any(|s| seen.contains(s) && !(n.id == b && *s == a));
            if fed {
                seen.insert(n.id);
            }
        }
        seen.contains(&b)
    }

    pub fn edges(&self) -> Vec<(NodeId, NodeId)> {
        self.nodes
            .iter()
            .flat_map(|n| n.inputs.iter().map(move |&s| (s, n.id)))
            .collect()
    }

    /// Positional cell graph: node `i` is the `i`-th template node.
    pub fn to_cell(&self) -> CellGraph {
        let pos = |id: NodeId| self.position(id).expect("template edge references a known node");
        CellGraph {
            node_ops: self.nodes.iter().map(|n| n.op).collect(),
            edges: self.edges().into_iter().map(|(s, t)| (pos(s), pos(t))).collect(),
        }
    }
}
