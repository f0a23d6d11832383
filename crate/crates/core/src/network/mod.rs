//! Executable networks: a compiled layer list with resolved shapes, plus the
//! parameters (weights, batchnorm records, gate scalars) for every layer.
//!
//! Cells are compiled from a [`CellTemplate`] once per instance. The cell
//! input node aliases the preceding stage and a single-input output node
//! aliases its producer, so neither occupies a layer.

mod forward;
mod sidecar;
mod template;

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{
    validate_architecture, Activation, ArchError, Architecture, Backbone, ConvSpec, OpLabel,
    PoolSpec,
};
use crate::tensor::{BatchNormRecord, Kernel, TensorError};

pub use forward::{forward, forward_trace, numeric_gradient, Loss, ParamSelector, ParamTensor};
pub use sidecar::{
    export_weights, import_weights, load_network, load_network_files, manifest_path, save_network,
    WeightEntry, WeightManifest,
    WEIGHTS_SCHEMA,
};
pub use template::{CellTemplate, NodeId, TemplateNode};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("shape error at {at}: {message}")]
    Shape { at: String, message: String },
    #[error("layer {layer}: {source}")]
    Tensor {
        layer: String,
        #[source]
        source: TensorError,
    },
    #[error("input shape {got:?} does not match network input {want:?}")]
    InputShape { got: [usize; 3], want: [usize; 3] },
    #[error("no layer named {0}")]
    UnknownLayer(String),
    #[error("{0}")]
    Selector(String),
    #[error("weights: {0}")]
    Weights(String),
    #[error(transparent)]
    Arch(#[from] ArchError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Where a layer comes from in the backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Origin {
    Stem,
    Downsample { stack: usize },
    Cell { stack: usize, cell: usize, node: NodeId },
    GlobalPool,
    Classifier,
}

impl Origin {
    pub fn name(&self) -> String {
        match *self {
            Origin::Stem => "stem".into(),
            Origin::Downsample { stack } => format!("s{stack}.down"),
            Origin::Cell { stack, cell, node } => format!("s{stack}.c{cell}.n{node}"),
            Origin::GlobalPool => "pool".into(),
            Origin::Classifier => "classifier".into(),
        }
    }
}

/// A layer operand: the network input or an earlier layer's output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Value {
    Input,
    Layer(usize),
}

/// Layer operation. Multiple inputs are summed (gated) before the op runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerOp {
    /// `channels` is always resolved.
    Conv(ConvSpec),
    MaxPool(PoolSpec),
    AvgPool(PoolSpec),
    Sum,
    GlobalAvgPool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub origin: Origin,
    pub inputs: Vec<Value>,
    pub op: LayerOp,
    /// (channels, height, width) after the join.
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

impl LayerSpec {
    pub fn name(&self) -> String {
        self.origin.name()
    }
}

/// Shapes and wiring of a network, without parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Skeleton {
    pub backbone: Backbone,
    pub template: CellTemplate,
    pub layers: Vec<LayerSpec>,
    /// Input operand of every cell instance, stack-major.
    pub cell_inputs: Vec<(Value, [usize; 3])>,
}

impl Skeleton {
    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.backbone.clone(), self.template.to_cell())
    }

    pub fn layer_index(&self, origin: Origin) -> Option<usize> {
        self.layers.iter().position(|l| l.origin == origin)
    }

    /// Output shape of a cell node in the first cell instance.
    pub fn node_shape(&self, node: NodeId) -> Option<[usize; 3]> {
        self.node_shape_in(0, 0, node)
    }

    fn node_shape_in(&self, stack: usize, cell: usize, node: NodeId) -> Option<[usize; 3]> {
        let t = &self.template;
        let n = t.node(node)?;
        match n.op {
            OpLabel::Input => Some(self.cell_input_shape(stack, cell)),
            OpLabel::Output if n.inputs.len() == 1 => self.node_shape_in(stack, cell, n.inputs[0]),
            _ => {
                let i = self.layer_index(Origin::Cell { stack, cell, node })?;
                Some(self.layers[i].out_shape)
            }
        }
    }

    fn cell_input_shape(&self, stack: usize, cell: usize) -> [usize; 3] {
        self.cell_inputs[stack * self.backbone.cells_per_stack + cell].1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub weight: Kernel,
    pub bias: Option<Vec<f64>>,
    pub bn: Option<BatchNormRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// One scalar per input, applied before the join sum.
    pub gates: Vec<f64>,
    pub conv: Option<ConvParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConcreteNetwork {
    pub(crate) skeleton: Skeleton,
    pub(crate) params: Vec<LayerParams>,
}

impl ConcreteNetwork {
    /// Pairs a skeleton with parameters, checking every shape.
    pub fn new(skeleton: Skeleton, params: Vec<LayerParams>) -> Result<Self, NetworkError> {
        if skeleton.layers.len() != params.len() {
            return Err(NetworkError::Weights(format!(
                "{} parameter sets for {} layers",
                params.len(),
                skeleton.layers.len()
            )));
        }
        for (l, p) in skeleton.layers.iter().zip(&params) {
            check_params(l, p).map_err(|m| NetworkError::Weights(format!("{}: {m}", l.name())))?;
        }
        Ok(ConcreteNetwork { skeleton, params })
    }

    pub fn skeleton(&self) -> &Skeleton {
        &self.skeleton
    }

    pub fn backbone(&self) -> &Backbone {
        &self.skeleton.backbone
    }

    pub fn template(&self) -> &CellTemplate {
        &self.skeleton.template
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.skeleton.layers
    }

    pub fn params(&self) -> &[LayerParams] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [LayerParams] {
        &mut self.params
    }

    pub fn architecture(&self) -> Architecture {
        self.skeleton.architecture()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.skeleton.backbone.input_shape
    }

    pub fn find_layer(&self, name: &str) -> Result<usize, NetworkError> {
        self.layers()
            .iter()
            .position(|l| l.name() == name)
            .ok_or_else(|| NetworkError::UnknownLayer(name.to_string()))
    }

    /// Sets the gate on edge `src -> dst` in every cell instance.
    pub fn set_gate(&mut self, src: NodeId, dst: NodeId, value: f64) -> Result<(), NetworkError> {
        let slot = self
            .template()
            .node(dst)
            .and_then(|n| n.inputs.iter().position(|&s| s == src))
            .ok_or_else(|| NetworkError::Selector(format!("no edge {src} -> {dst}")))?;
        let mut hit = false;
        for (l, p) in self.skeleton.layers.iter().zip(&mut self.params) {
            if matches!(l.origin, Origin::Cell { node, .. } if node == dst) {
                p.gates[slot] = value;
                hit = true;
            }
        }
        if hit {
            Ok(())
        } else {
            Err(NetworkError::Selector(format!("node {dst} has no gated join")))
        }
    }
}

fn check_params(l: &LayerSpec, p: &LayerParams) -> Result<(), String> {
    if p.gates.len() != l.inputs.len() {
        return Err(format!("{} gates for {} inputs", p.gates.len(), l.inputs.len()));
    }
    match (&l.op, &p.conv) {
        (LayerOp::Conv(spec), Some(c)) => {
            let want = [spec.kernel[0], spec.kernel[1], l.in_shape[0], l.out_shape[0]];
            if c.weight.dims() != want {
                return Err(format!("weight {:?}, expected {want:?}", c.weight.dims()));
            }
            if spec.bias != c.bias.is_some() || c.bias.as_ref().is_some_and(|b| b.len() != want[3]) {
                return Err("bias does not match the layer".into());
            }
            if spec.batchnorm != c.bn.is_some()
                || c.bn.as_ref().is_some_and(|b| {
                    [b.gamma.len(), b.beta.len(), b.mean.len(), b.var.len()] != [want[3]; 4]
                })
            {
                return Err("batchnorm record does not match the layer".into());
            }
            Ok(())
        }
        (LayerOp::Conv(_), None) => Err("missing conv parameters".into()),
        (_, Some(_)) => Err("parameters on a parameter-free layer".into()),
        (_, None) => Ok(()),
    }
}

fn spatial(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    (span >= k && stride > 0).then(|| (span - k) / stride + 1)
}

fn shape_err(at: impl Into<String>, message: impl Into<String>) -> NetworkError {
    NetworkError::Shape {
        at: at.into(),
        message: message.into(),
    }
}

/// Resolves every layer and shape of `backbone` with `template` as its cell.
pub fn compile(backbone: &Backbone, template: &CellTemplate) -> Result<Skeleton, NetworkError> {
    let [cin, h, w] = backbone.input_shape;
    let mut layers = Vec::new();
    let stem = ConvSpec {
        channels: Some(backbone.stem_channels),
        ..ConvSpec::same(3, true, Activation::Relu)
    };
    layers.push(LayerSpec {
        origin: Origin::Stem,
        inputs: vec![Value::Input],
        op: LayerOp::Conv(stem),
        in_shape: [cin, h, w],
        out_shape: [backbone.stem_channels, h, w],
    });
    let mut cur = (Value::Layer(0), [backbone.stem_channels, h, w]);
    let mut cell_inputs = Vec::with_capacity(backbone.total_cells());
    for stack in 0..backbone.num_stacks {
        if stack > 0 {
            let origin = Origin::Downsample { stack };
            let [c, h, w] = cur.1;
            let (Some(oh), Some(ow)) = (spatial(h, 2, 2, 0), spatial(w, 2, 2, 0)) else {
                return Err(shape_err(origin.name(), format!("cannot downsample {h}x{w}")));
            };
            layers.push(LayerSpec {
                origin,
                inputs: vec![cur.0],
                op: LayerOp::MaxPool(PoolSpec {
                    kernel: [2, 2],
                    stride: 2,
                    padding: [0, 0],
                }),
                in_shape: cur.1,
                out_shape: [c, oh, ow],
            });
            cur = (Value::Layer(layers.len() - 1), [c, oh, ow]);
        }
        for cell in 0..backbone.cells_per_stack {
            cell_inputs.push(cur);
            cur = compile_cell(template, stack, cell, cur, &mut layers)?;
        }
    }
    let [c, _, _] = cur.1;
    layers.push(LayerSpec {
        origin: Origin::GlobalPool,
        inputs: vec![cur.0],
        op: LayerOp::GlobalAvgPool,
        in_shape: cur.1,
        out_shape: [c, 1, 1],
    });
    let head = ConvSpec {
        channels: Some(backbone.num_classes),
        bias: true,
        ..ConvSpec::same(1, false, Activation::None)
    };
    layers.push(LayerSpec {
        origin: Origin::Classifier,
        inputs: vec![Value::Layer(layers.len() - 1)],
        op: LayerOp::Conv(head),
        in_shape: [c, 1, 1],
        out_shape: [backbone.num_classes, 1, 1],
    });
    Ok(Skeleton {
        backbone: backbone.clone(),
        template: template.clone(),
        layers,
        cell_inputs,
    })
}

fn compile_cell(
    template: &CellTemplate,
    stack: usize,
    cell: usize,
    input: (Value, [usize; 3]),
    layers: &mut Vec<LayerSpec>,
) -> Result<(Value, [usize; 3]), NetworkError> {
    let width = input.1[0];
    let mut produced: HashMap<NodeId, (Value, [usize; 3])> = HashMap::new();
    for node in template.nodes() {
        let origin = Origin::Cell { stack, cell, node: node.id };
        let at = || format!("node {} ({})", node.id, origin.name());
        if node.op == OpLabel::Input {
            produced.insert(node.id, input);
            continue;
        }
        let ins: Vec<(Value, [usize; 3])> = node
            .inputs
            .iter()
            .map(|s| {
                produced
                    .get(s)
                    .copied()
                    .ok_or_else(|| shape_err(at(), format!("input {s} is not computed before it")))
            })
            .collect::<Result<_, _>>()?;
        let Some(&(_, join)) = ins.first() else {
            return Err(shape_err(at(), "node has no inputs"));
        };
        if let Some((_, other)) = ins.iter().find(|(_, s)| *s != join) {
            return Err(shape_err(
                at(),
                format!("join of mismatched shapes {join:?} and {other:?}"),
            ));
        }
        let values: Vec<Value> = ins.iter().map(|&(v, _)| v).collect();
        let [c, h, w] = join;
        let (op, out) = match node.op {
            OpLabel::Input => unreachable!(),
            OpLabel::Output if ins.len() == 1 => {
                produced.insert(node.id, ins[0]);
                continue;
            }
            OpLabel::Output | OpLabel::ZeroGatedSum => (LayerOp::Sum, join),
            OpLabel::MaxPool3x3 | OpLabel::AvgPool(_) => {
                let p = match node.op {
                    OpLabel::AvgPool(p) => p,
                    _ => PoolSpec::same(3),
                };
                let dims = (
                    spatial(h, p.kernel[0], p.stride, p.padding[0]),
                    spatial(w, p.kernel[1], p.stride, p.padding[1]),
                );
                if dims != (Some(h), Some(w)) {
                    return Err(shape_err(at(), format!("feature-map size not preserved: {dims:?} from {h}x{w}")));
                }
                let op = match node.op {
                    OpLabel::AvgPool(_) => LayerOp::AvgPool(p),
                    _ => LayerOp::MaxPool(p),
                };
                (op, join)
            }
            op => {
                let mut spec = op.conv_spec().expect("remaining labels are convolutions");
                let oc = spec.channels.unwrap_or(width);
                let dims = (
                    spatial(h, spec.kernel[0], spec.stride, spec.padding[0]),
                    spatial(w, spec.kernel[1], spec.stride, spec.padding[1]),
                );
                if dims != (Some(h), Some(w)) {
                    return Err(shape_err(at(), format!("feature-map size not preserved: {dims:?} from {h}x{w}")));
                }
                spec.channels = Some(oc);
                (LayerOp::Conv(spec), [oc, h, w])
            }
        };
        layers.push(LayerSpec {
            origin,
            inputs: values,
            op,
            in_shape: [c, h, w],
            out_shape: out,
        });
        produced.insert(node.id, (Value::Layer(layers.len() - 1), out));
    }
    Ok(produced[&template.output_id()])
}

/// How victim parameters are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InitPolicy {
    /// Weights and biases uniform in `±1/sqrt(fan_in)`; batchnorm statistics
    /// drawn around the identity. Every value is rounded to single precision.
    #[default]
    CenteredUniform,
}

pub(crate) fn f32_round(v: f64) -> f64 {
    v as f32 as f64
}

/// Default epsilon stored in batchnorm records.
pub const BN_EPS: f64 = 1e-5f32 as f64;

fn init_params(l: &LayerSpec, rng: &mut ChaCha8Rng) -> LayerParams {
    let gates = vec![1.0; l.inputs.len()];
    let LayerOp::Conv(spec) = l.op else {
        return LayerParams { gates, conv: None };
    };
    let dims = [spec.kernel[0], spec.kernel[1], l.in_shape[0], l.out_shape[0]];
    let bound = 1.0 / ((dims[0] * dims[1] * dims[2]) as f64).sqrt();
    let mut uniform = |lo: f64, hi: f64| f32_round(rng.random_range(lo..hi));
    let weight: Vec<f64> = (0..dims.iter().product::<usize>())
        .map(|_| uniform(-bound, bound))
        .collect();
    let bias = spec
        .bias
        .then(|| (0..dims[3]).map(|_| uniform(-bound, bound)).collect());
    let bn = spec.batchnorm.then(|| {
        let mut draw = |lo, hi| (0..dims[3]).map(|_| uniform(lo, hi)).collect::<Vec<_>>();
        BatchNormRecord {
            gamma: draw(0.8, 1.2),
            beta: draw(-0.1, 0.1),
            mean: draw(-0.1, 0.1),
            var: draw(0.5, 1.5),
            eps: BN_EPS,
        }
    });
    LayerParams {
        gates,
        conv: Some(ConvParams {
            weight: Kernel::from_vec(dims, weight).expect("sized from dims"),
            bias,
            bn,
        }),
    }
}

/// Instantiates `arch` with fresh parameters. Node `i` of the cell gets id `i`.
pub fn build_network(
    arch: &Architecture,
    init: InitPolicy,
    seed: u64,
) -> Result<ConcreteNetwork, NetworkError> {
    let report = validate_architecture(arch);
    if !report.ok {
        return Err(ArchError::Invalid(report).into());
    }
    let skeleton = compile(&arch.backbone, &CellTemplate::from_cell(&arch.cell))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match init {
        InitPolicy::CenteredUniform => skeleton.layers.iter().map(|l| init_params(l, &mut rng)).collect(),
    };
    Ok(ConcreteNetwork { skeleton, params })
}
