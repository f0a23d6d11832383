//! Structural side of each strategy: how the cell template changes, which
//! gates are new or carried over, and which nodes need fresh parameters.

use std::collections::HashMap;

use super::{StrategyApplication, StrategyKind, TransformError};
use crate::arch::{Activation, ConvRole, ConvSpec, OpLabel};
use crate::network::{CellTemplate, NodeId, Skeleton, TemplateNode};

/// How a rewritten node gets its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Fill {
    /// Extra output channels: zero weights, neutral batchnorm.
    WidenOut,
    /// Extra input channels: seeded random weights on inputs that are zero.
    WidenIn,
    /// Identity kernel, with a normalization-undo record when the spec has batchnorm.
    Identity,
    /// Old kernel centered in a larger zero kernel.
    GrowKernel,
    /// Channel-diagonal `1/(k1*k2)` kernel replacing an average pool.
    PoolDiagonal,
    /// All-zero weights, zero batchnorm scale and shift.
    Zero,
}

pub(crate) struct Rewrite {
    pub template: CellTemplate,
    /// `(dst, new src) -> old src` for slots whose producer was replaced.
    pub renamed: HashMap<(NodeId, NodeId), NodeId>,
    /// Gate values fixed by the rewrite, keyed by `(dst, src)`.
    pub new_gates: HashMap<(NodeId, NodeId), f64>,
    /// New node id -> node whose layer supplies its remaining parameters.
    pub carry_from: HashMap<NodeId, NodeId>,
    pub fill: HashMap<NodeId, Fill>,
}

impl Rewrite {
    fn new(template: CellTemplate) -> Self {
        Rewrite {
            template,
            renamed: HashMap::new(),
            new_gates: HashMap::new(),
            carry_from: HashMap::new(),
            fill: HashMap::new(),
        }
    }
}

fn fail<T>(msg: impl Into<String>) -> Result<T, TransformError> {
    Err(TransformError::Precondition(msg.into()))
}

fn node<'a>(t: &'a CellTemplate, id: NodeId) -> Result<&'a TemplateNode, TransformError> {
    t.node(id)
        .ok_or_else(|| TransformError::Precondition(format!("node {id} does not exist")))
}

fn conv_node(t: &CellTemplate, id: NodeId) -> Result<ConvSpec, TransformError> {
    let n = node(t, id)?;
    n.op.conv_spec().ok_or_else(|| {
        TransformError::Precondition(format!("node {id} ({}) is not a convolution", n.op.kind_name()))
    })
}

fn check_kernel(k: usize) -> Result<(), TransformError> {
    if k == 0 || k % 2 == 0 {
        return fail(format!("kernel size {k} must be odd and positive"));
    }
    Ok(())
}

/// Channel count of a node as its label states it; `None` tracks the cell
/// input width.
pub(crate) fn label_width(t: &CellTemplate, id: NodeId) -> Option<usize> {
    let n = t.node(id)?;
    match n.op {
        OpLabel::Input => None,
        op if op.is_conv() => op.conv_spec().and_then(|s| s.channels),
        _ => label_width(t, *n.inputs.first()?),
    }
}

/// Whether the node's output is non-negative in every cell instance.
/// `gates_nonneg` states that no join scales an input by a negative gate.
pub(crate) fn is_nonnegative(t: &CellTemplate, id: NodeId, total_cells: usize, gates_nonneg: bool) -> bool {
    // The stem ends in relu, so the first cell's input is non-negative; later
    // cells see the previous cell's output through max pooling.
    let input_nonneg = total_cells == 1 || nonneg_given(t, t.output_id(), true, gates_nonneg);
    nonneg_given(t, id, input_nonneg, gates_nonneg)
}

fn nonneg_given(t: &CellTemplate, id: NodeId, input_nonneg: bool, gates_nonneg: bool) -> bool {
    let mut memo: HashMap<NodeId, bool> = HashMap::new();
    for n in t.nodes() {
        let joined = || gates_nonneg && n.inputs.iter().all(|s| memo[s]);
        let v = match n.op {
            OpLabel::Input => input_nonneg,
            op if op.is_conv() => op.conv_spec().unwrap().activation == Activation::Relu,
            _ => joined(),
        };
        memo.insert(n.id, v);
        if n.id == id {
            return v;
        }
    }
    false
}

fn edge_check(t: &CellTemplate, [a, b]: [NodeId; 2]) -> Result<(), TransformError> {
    node(t, a)?;
    node(t, b)?;
    if !t.has_edge(a, b) {
        return fail(format!("no edge {a} -> {b}"));
    }
    Ok(())
}

fn endpoint_check(t: &CellTemplate, [src, dst]: [NodeId; 2]) -> Result<(), TransformError> {
    if src == dst {
        return fail(format!("source and destination are both node {src}"));
    }
    let s = node(t, src)?;
    let d = node(t, dst)?;
    if s.op == OpLabel::Output {
        return fail("the cell output cannot be a source");
    }
    if d.op == OpLabel::Input {
        return fail("the cell input cannot be a destination");
    }
    if t.position(src) > t.position(dst) {
        return fail(format!("node {src} does not precede node {dst} topologically"));
    }
    Ok(())
}

/// Inserts `conv` on edge `a -> b`, taking over b's slot and its gate.
fn insert_on_edge(rw: &mut Rewrite, [a, b]: [NodeId; 2], op: OpLabel, fill: Fill) -> NodeId {
    let t = &mut rw.template;
    let id = t.fresh_id();
    let pos = t.position(b).expect("edge checked");
    t.insert_at(pos, TemplateNode { id, op, inputs: vec![a] });
    let dst = t.node_mut(b).expect("edge checked");
    let slot = dst.inputs.iter().position(|&s| s == a).expect("edge checked");
    dst.inputs[slot] = id;
    rw.renamed.insert((b, id), a);
    rw.new_gates.insert((id, a), 1.0);
    rw.fill.insert(id, fill);
    id
}

fn identity_spec(kernel: usize, channels: Option<usize>, batchnorm: bool, activation: Activation) -> ConvSpec {
    ConvSpec {
        channels,
        ..ConvSpec::same(kernel, batchnorm, activation)
    }
}

/// Output channels of a node in every cell instance.
fn instance_widths(skel: &Skeleton, id: NodeId) -> Vec<usize> {
    let mut out: Vec<usize> = skel
        .layers
        .iter()
        .filter(|l| matches!(l.origin, crate::network::Origin::Cell { node, .. } if node == id))
        .map(|l| l.out_shape[0])
        .collect();
    if out.is_empty() {
        out.extend(skel.node_shape(id).map(|s| s[0]));
    }
    out
}

pub(crate) fn rewrite(
    skel: &Skeleton,
    app: &StrategyApplication,
    gates_nonneg: bool,
) -> Result<Rewrite, TransformError> {
    let t = &skel.template;
    let mut rw = Rewrite::new(t.clone());
    match *app {
        StrategyApplication::WidenLayer { node: id, channels, .. } => {
            let spec = conv_node(t, id)?;
            let current = instance_widths(skel, id).into_iter().max().unwrap_or(0);
            if channels <= current {
                return fail(format!(
                    "new width {channels} must exceed the current width {current}"
                ));
            }
            let consumers = t.consumers(id);
            if consumers.len() != 1 {
                return fail(format!("fan-out exceeds 1: node {id} feeds {} inputs", consumers.len()));
            }
            let succ = consumers[0];
            let sn = node(t, succ)?;
            if !sn.op.is_conv() || sn.inputs != [id] {
                return fail(format!(
                    "successor {succ} must be a convolution fed only by node {id}"
                ));
            }
            let n = rw.template.node_mut(id).unwrap();
            n.op = n.op.with_conv_spec(ConvSpec {
                channels: Some(channels),
                ..spec
            });
            rw.fill.insert(id, Fill::WidenOut);
            rw.fill.insert(succ, Fill::WidenIn);
        }
        StrategyApplication::DeepenLayer {
            edge,
            kernel,
            batchnorm,
            activation,
            ..
        } => {
            edge_check(t, edge)?;
            check_kernel(kernel)?;
            match activation {
                Activation::Swish => {
                    return fail("swish is not idempotent; deepen with fake-swish instead")
                }
                Activation::Relu
                    if !is_nonnegative(t, edge[0], skel.backbone.total_cells(), gates_nonneg) =>
                {
                    return fail(format!(
                        "relu after node {} is not an identity: its output can be negative",
                        edge[0]
                    ))
                }
                _ => {}
            }
            let spec = identity_spec(kernel, label_width(t, edge[0]), batchnorm, activation);
            insert_on_edge(&mut rw, edge, OpLabel::from_conv(spec, ConvRole::Identity), Fill::Identity);
        }
        StrategyApplication::WidenKernel { node: id, kernel: [k3, k4], .. } => {
            let spec = conv_node(t, id)?;
            let [k1, k2] = spec.kernel;
            if k3 < k1 || k4 < k2 {
                return fail(format!("kernel {k1}x{k2} cannot shrink to {k3}x{k4}"));
            }
            if (k3 - k1) % 2 != 0 || (k4 - k2) % 2 != 0 {
                return fail(format!("kernel {k3}x{k4} does not match the parity of {k1}x{k2}"));
            }
            if (k3, k4) == (k1, k2) {
                return fail(format!("kernel {k3}x{k4} widens nothing"));
            }
            let grown = ConvSpec {
                kernel: [k3, k4],
                padding: [spec.padding[0] + (k3 - k1) / 2, spec.padding[1] + (k4 - k2) / 2],
                ..spec
            };
            let n = rw.template.node_mut(id).unwrap();
            n.op = n.op.with_conv_spec(grown);
            rw.fill.insert(id, Fill::GrowKernel);
        }
        StrategyApplication::ReplaceAvgpool { node: id, .. } => {
            let n = node(t, id)?;
            let OpLabel::AvgPool(p) = n.op else {
                return fail(format!("node {id} ({}) is not an average pool", n.op.kind_name()));
            };
            let spec = ConvSpec {
                kernel: p.kernel,
                stride: p.stride,
                padding: p.padding,
                channels: label_width(t, id),
                bias: false,
                batchnorm: false,
                activation: Activation::None,
            };
            let tm = &mut rw.template;
            let new_id = tm.fresh_id();
            let consumers = tm.consumers(id);
            let n = tm.node_mut(id).unwrap();
            n.id = new_id;
            n.op = OpLabel::from_conv(spec, ConvRole::Plain);
            for c in consumers {
                for s in tm.node_mut(c).unwrap().inputs.iter_mut().filter(|s| **s == id) {
                    *s = new_id;
                }
                rw.renamed.insert((c, new_id), id);
            }
            rw.carry_from.insert(new_id, id);
            rw.fill.insert(new_id, Fill::PoolDiagonal);
        }
        StrategyApplication::ReplaceSkip { edge, kernel, .. } => {
            edge_check(t, edge)?;
            check_kernel(kernel)?;
            let [a, b] = edge;
            if node(t, b)?.inputs.len() < 2 || !t.reaches_avoiding_edge(a, b) {
                return fail(format!(
                    "edge {a} -> {b} is not a skip connection into a join"
                ));
            }
            let spec = identity_spec(kernel, label_width(t, a), false, Activation::None);
            insert_on_edge(&mut rw, edge, OpLabel::from_conv(spec, ConvRole::Identity), Fill::Identity);
        }
        StrategyApplication::AddShortcutSequential { edge, .. }
        | StrategyApplication::AddShortcutParallel { edge, .. } => {
            endpoint_check(t, edge)?;
            let [src, dst] = edge;
            if t.has_edge(src, dst) {
                return fail(format!("nodes {src} and {dst} are already connected"));
            }
            let downstream = t.reaches(src, dst);
            match app.kind() {
                StrategyKind::AddShortcutSequential if !downstream => {
                    return fail(format!("node {dst} is not downstream of node {src}; the pair is parallel"))
                }
                StrategyKind::AddShortcutParallel if downstream => {
                    return fail(format!("node {dst} is downstream of node {src}; the pair is sequential"))
                }
                _ => {}
            }
            rw.template.node_mut(dst).unwrap().inputs.push(src);
            rw.new_gates.insert((dst, src), 0.0);
        }
        StrategyApplication::AddBranch {
            edge,
            kernel,
            batchnorm,
            activation,
            stride,
            ..
        } => {
            endpoint_check(t, edge)?;
            check_kernel(kernel)?;
            if stride != 1 {
                return fail(format!("feature-map size not preserved: stride {stride}"));
            }
            let [src, dst] = edge;
            let spec = identity_spec(kernel, label_width(t, src), batchnorm, activation);
            let tm = &mut rw.template;
            let id = tm.fresh_id();
            let pos = tm.position(dst).unwrap();
            tm.insert_at(
                pos,
                TemplateNode {
                    id,
                    op: OpLabel::from_conv(spec, ConvRole::Branch),
                    inputs: vec![src],
                },
            );
            tm.node_mut(dst).unwrap().inputs.push(id);
            rw.new_gates.insert((id, src), 1.0);
            rw.new_gates.insert((dst, id), 1.0);
            rw.fill.insert(id, Fill::Zero);
        }
    }
    Ok(rw)
}

const GROWTH: [[usize; 2]; 3] = [[2, 2], [2, 0], [0, 2]];

/// Every syntactic application of `kind` on the current cell, seeds zeroed.
/// Preconditions are not checked; callers dry-run each candidate.
pub fn candidates(skel: &Skeleton, kind: StrategyKind) -> Vec<StrategyApplication> {
    let t = &skel.template;
    let convs: Vec<(NodeId, ConvSpec)> = t
        .nodes()
        .iter()
        .filter_map(|n| n.op.conv_spec().map(|s| (n.id, s)))
        .collect();
    let edges = t.edges();
    let pairs: Vec<[NodeId; 2]> = t
        .nodes()
        .iter()
        .enumerate()
        .flat_map(|(i, a)| t.nodes()[i + 1..].iter().map(move |b| [a.id, b.id]))
        .filter(|&[a, b]| {
            node(t, a).is_ok_and(|n| n.op != OpLabel::Output)
                && node(t, b).is_ok_and(|n| n.op != OpLabel::Input)
        })
        .collect();
    let acts = [Activation::Relu, Activation::FakeSwish, Activation::None];
    let mut out = Vec::new();
    match kind {
        StrategyKind::WidenLayer => {
            for &(id, _) in &convs {
                let o = instance_widths(skel, id).into_iter().max().unwrap_or(1);
                let mut opts = vec![o + (o / 2).max(1), 2 * o];
                opts.dedup();
                out.extend(opts.into_iter().map(|channels| StrategyApplication::WidenLayer { node: id, channels, seed: 0 }));
            }
        }
        StrategyKind::DeepenLayer => {
            for &(a, b) in &edges {
                for kernel in [1, 3] {
                    for batchnorm in [false, true] {
                        for activation in acts {
                            out.push(StrategyApplication::DeepenLayer {
                                edge: [a, b],
                                kernel,
                                batchnorm,
                                activation,
                                seed: 0,
                            });
                        }
                    }
                }
            }
        }
        StrategyKind::WidenKernel => {
            for &(id, spec) in &convs {
                for [g1, g2] in GROWTH {
                    out.push(StrategyApplication::WidenKernel {
                        node: id,
                        kernel: [spec.kernel[0] + g1, spec.kernel[1] + g2],
                        seed: 0,
                    });
                }
            }
        }
        StrategyKind::ReplaceAvgpool => {
            for n in t.nodes().iter().filter(|n| matches!(n.op, OpLabel::AvgPool(_))) {
                out.push(StrategyApplication::ReplaceAvgpool { node: n.id, seed: 0 });
            }
        }
        StrategyKind::ReplaceSkip => {
            for &(a, b) in &edges {
                for kernel in [1, 3] {
                    out.push(StrategyApplication::ReplaceSkip { edge: [a, b], kernel, seed: 0 });
                }
            }
        }
        StrategyKind::AddShortcutSequential | StrategyKind::AddShortcutParallel => {
            for &edge in &pairs {
                out.push(match kind {
                    StrategyKind::AddShortcutSequential => StrategyApplication::AddShortcutSequential { edge, seed: 0 },
                    _ => StrategyApplication::AddShortcutParallel { edge, seed: 0 },
                });
            }
        }
        StrategyKind::AddBranch => {
            for &edge in &pairs {
                for kernel in [1, 3] {
                    for batchnorm in [false, true] {
                        for activation in [Activation::Relu, Activation::None] {
                            out.push(StrategyApplication::AddBranch {
                                edge,
                                kernel,
                                batchnorm,
                                activation,
                                stride: 1,
                                seed: 0,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}
