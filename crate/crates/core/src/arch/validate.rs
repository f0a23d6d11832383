use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{Architecture, ConvSpec, Family, OpLabel, PoolSpec};

pub const NB101_MAX_NODES: usize = 7;
pub const NB101_MAX_EDGES: usize = 9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case", tag = "at")]
pub enum Location {
    Field { name: String },
    Cell,
    Node { index: usize },
    Edge { source: usize, target: usize },
}

impl fmt::Display for Location {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Location::Field { name } => write!(f, "field {name}"),
            Location::Cell => write!(f, "cell"),
            Location::Node { index } => write!(f, "node {index}"),
            Location::Edge { source, target } => write!(f, "edge ({source},{target})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub location: Location,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.location, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub ok: bool,
    pub diagnostics: Vec<Diagnostic>,
}

impl ValidationReport {
    pub fn mentions(&self, needle: &str) -> bool {
        self.diagnostics.iter().any(|d| d.message.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ok {
            return write!(f, "ok");
        }
        let parts: Vec<String> = self.diagnostics.iter().map(|d| d.to_string()).collect();
        write!(f, "{}", parts.join("; "))
    }
}

struct Collector(Vec<Diagnostic>);

impl Collector {
    fn push(&mut self, location: Location, message: impl Into<String>) {
        self.0.push(Diagnostic {
            location,
            message: message.into(),
        });
    }

    fn field(&mut self, name: &str, message: impl Into<String>) {
        self.push(Location::Field { name: name.into() }, message);
    }
}

/// Checks every structural invariant and reports all violations found.
pub fn validate_architecture(arch: &Architecture) -> ValidationReport {
    let mut out = Collector(Vec::new());
    let bb = &arch.backbone;
    for (name, value) in [
        ("stem_channels", bb.stem_channels),
        ("num_stacks", bb.num_stacks),
        ("cells_per_stack", bb.cells_per_stack),
        ("num_classes", bb.num_classes),
    ] {
        if value == 0 {
            out.field(name, format!("{name} must be positive"));
        }
    }
    if bb.input_shape.contains(&0) {
        out.field("input_shape", "input_shape entries must be positive");
    }

    let cell = &arch.cell;
    let n = cell.node_ops.len();
    if n < 2 {
        out.push(Location::Cell, format!("cell needs input and output nodes, got {n} nodes"));
        return finish(out);
    }
    if bb.family == Family::CellStack {
        if n > NB101_MAX_NODES {
            out.push(Location::Cell, format!("node count {n} > {NB101_MAX_NODES}"));
        }
        if cell.edges.len() > NB101_MAX_EDGES {
            out.push(
                Location::Cell,
                format!("edge count {} > {NB101_MAX_EDGES}", cell.edges.len()),
            );
        }
    }

    for (i, op) in cell.node_ops.iter().enumerate() {
        let at = Location::Node { index: i };
        match (i, op) {
            (0, OpLabel::Input) => {}
            (0, other) => out.push(at, format!("node 0 must be input, found {}", other.kind_name())),
            (i, OpLabel::Output) if i == n - 1 => {}
            (i, other) if i == n - 1 => out.push(
                at,
                format!("last node must be output, found {}", other.kind_name()),
            ),
            (_, OpLabel::Input) | (_, OpLabel::Output) => {
                out.push(at, format!("{} only allowed at the cell boundary", op.kind_name()))
            }
            _ => check_op(&mut out, i, op, bb.family),
        }
    }

    let mut seen = HashSet::new();
    let mut indeg = vec![0usize; n];
    let mut outdeg = vec![0usize; n];
    for &(s, t) in &cell.edges {
        let at = Location::Edge { source: s, target: t };
        if s >= n || t >= n {
            out.push(at, format!("edge references a node outside 0..{n}"));
            continue;
        }
        if s == t {
            out.push(at, "self-loop");
            continue;
        }
        if s > t {
            out.push(at, "edge not topologically ordered");
            continue;
        }
        if !seen.insert((s, t)) {
            out.push(at, "duplicate edge");
            continue;
        }
        indeg[t] += 1;
        outdeg[s] += 1;
    }
    if outdeg[0] == 0 {
        out.push(Location::Node { index: 0 }, "input has no outgoing edge");
    }
    if indeg[n - 1] == 0 {
        out.push(Location::Node { index: n - 1 }, "output has no incoming edge");
    }
    for i in 1..n - 1 {
        if indeg[i] == 0 {
            out.push(Location::Node { index: i }, "dangling node: no incoming edge");
        }
        if outdeg[i] == 0 {
            out.push(Location::Node { index: i }, "dangling node: no outgoing edge");
        }
    }
    finish(out)
}

fn finish(out: Collector) -> ValidationReport {
    ValidationReport {
        ok: out.0.is_empty(),
        diagnostics: out.0,
    }
}

fn check_op(out: &mut Collector, i: usize, op: &OpLabel, family: Family) {
    let at = || Location::Node { index: i };
    if family == Family::CellStack {
        match op {
            OpLabel::Conv3x3BnRelu { channels: None }
            | OpLabel::Conv1x1BnRelu { channels: None }
            | OpLabel::MaxPool3x3 => {}
            OpLabel::Conv3x3BnRelu { .. } | OpLabel::Conv1x1BnRelu { .. } => {
                out.push(at(), "channel override not allowed in cell-stack family")
            }
            other => out.push(
                at(),
                format!("op {} not allowed in cell-stack family", other.kind_name()),
            ),
        }
    }
    if let Some(spec) = op.conv_spec() {
        check_conv(out, i, &spec);
    }
    if let OpLabel::AvgPool(p) = op {
        check_pool(out, i, p);
    }
}

fn check_kernel(out: &mut Collector, i: usize, kernel: [usize; 2], stride: usize) {
    for k in kernel {
        if k == 0 || k % 2 == 0 {
            out.push(
                Location::Node { index: i },
                format!("kernel size {k} must be odd and positive"),
            );
        }
    }
    if stride == 0 {
        out.push(Location::Node { index: i }, "stride must be positive");
    }
}

fn check_conv(out: &mut Collector, i: usize, spec: &ConvSpec) {
    check_kernel(out, i, spec.kernel, spec.stride);
    if spec.channels == Some(0) {
        out.push(Location::Node { index: i }, "channels must be positive");
    }
}

fn check_pool(out: &mut Collector, i: usize, spec: &PoolSpec) {
    check_kernel(out, i, spec.kernel, spec.stride);
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{Backbone, CellGraph};

    fn arch(family: Family, cell: CellGraph) -> Architecture {
        Architecture::new(
            Backbone {
                family,
                stem_channels: 4,
                num_stacks: 1,
                cells_per_stack: 1,
                input_shape: [3, 8, 8],
                num_classes: 10,
            },
            cell,
        )
    }

    #[test]
    fn minimal_chain_is_valid() {
        let r = validate_architecture(&arch(Family::CellStack, CellGraph::chain(&[OpLabel::conv3x3()])));
        assert!(r.ok, "{r}");
    }

    #[test]
    fn eight_nodes_exceed_nb101_limit() {
        let cell = CellGraph::chain(&[OpLabel::conv3x3(); 6]);
        assert_eq!(cell.len(), 8);
        let r = validate_architecture(&arch(Family::CellStack, cell.clone()));
        assert!(!r.ok);
        assert!(r.mentions("node count 8 > 7"), "{r}");
        // no limit outside the NB-101 family
        assert!(validate_architecture(&arch(Family::GenericDag, cell)).ok);
    }

    #[test]
    fn backwards_edge_reported() {
        let mut cell = CellGraph::chain(&[OpLabel::conv3x3(), OpLabel::conv1x1()]);
        cell.edges.push((2, 1));
        let r = validate_architecture(&arch(Family::CellStack, cell));
        assert!(r.diagnostics.iter().any(|d| d.message == "edge not topologically ordered"
            && d.location == Location::Edge { source: 2, target: 1 }));
    }

    #[test]
    fn dangling_and_duplicate_edges() {
        let cell = CellGraph {
            node_ops: vec![OpLabel::Input, OpLabel::conv3x3(), OpLabel::MaxPool3x3, OpLabel::Output],
            edges: vec![(0, 1), (1, 3), (1, 3), (0, 2)],
        };
        let r = validate_architecture(&arch(Family::CellStack, cell));
        assert!(r.mentions("duplicate edge"));
        assert!(r.diagnostics.iter().any(|d| d.location == Location::Node { index: 2 }
            && d.message.contains("no outgoing")));
    }

    #[test]
    fn cell_stack_rejects_foreign_ops() {
        let cell = CellGraph::chain(&[OpLabel::AvgPool(PoolSpec::same(3))]);
        let r = validate_architecture(&arch(Family::CellStack, cell.clone()));
        assert!(r.mentions("avgpool not allowed"));
        assert!(validate_architecture(&arch(Family::GenericDag, cell)).ok);
    }

    #[test]
    fn even_kernel_rejected() {
        let spec = ConvSpec { kernel: [2, 3], ..ConvSpec::same(3, false, crate::arch::Activation::None) };
        let r = validate_architecture(&arch(Family::GenericDag, CellGraph::chain(&[OpLabel::Conv(spec)])));
        assert!(r.mentions("kernel size 2"));
    }

    #[test]
    fn zero_stem_reported() {
        let mut a = arch(Family::CellStack, CellGraph::chain(&[OpLabel::conv3x3()]));
        a.backbone.stem_channels = 0;
        assert!(validate_architecture(&a).mentions("stem_channels must be positive"));
    }
}
