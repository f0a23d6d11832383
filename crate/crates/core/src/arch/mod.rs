//! Architecture description: a stacked-cell backbone plus one cell DAG.
//!
//! The cell is a small directed acyclic graph whose nodes are operations and
//! whose edges are feature tensors. Node 0 is the cell input and the last node
//! is the cell output; every edge goes from a lower to a higher index.

mod canonical;
mod doc;
mod enumerate;
mod validate;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use canonical::{canonical_hash, canonical_order, canonicalize, ArchHash};
pub use doc::{parse_architecture, serialize_architecture, ARCH_SCHEMA};
pub use enumerate::{enumerate_space, SpaceConstraints};
pub use validate::{
    validate_architecture, Diagnostic, Location, ValidationReport, NB101_MAX_EDGES,
    NB101_MAX_NODES,
};

#[derive(Debug, Error)]
pub enum ArchError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("invalid architecture: {0}")]
    Invalid(ValidationReport),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Stacked cells under NAS-Bench-101 limits (7 nodes, 9 edges, three op kinds).
    CellStack,
    /// Same backbone, no limits on cell size or op kinds.
    GenericDag,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    None,
    Relu,
    Swish,
    /// `x * t / t` with `t = 1 + exp(-x)`: the identity, built from swish's operators.
    FakeSwish,
}

impl Activation {
    /// Whether `act(act(x)) == act(x)` holds for every input.
    pub fn is_idempotent(self) -> bool {
        !matches!(self, Activation::Swish)
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn one() -> usize {
    1
}

/// Resolved parameters of a convolution-like cell operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
    pub padding: [usize; 2],
    /// Output channels; `None` keeps the width of the cell input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    #[serde(default, skip_serializing_if = "is_false")]
    pub bias: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub batchnorm: bool,
    pub activation: Activation,
}

impl ConvSpec {
    /// A stride-1 convolution with "same" padding.
    pub fn same(kernel: usize, batchnorm: bool, activation: Activation) -> Self {
        ConvSpec {
            kernel: [kernel, kernel],
            stride: 1,
            padding: [(kernel.saturating_sub(1)) / 2; 2],
            channels: None,
            bias: false,
            batchnorm,
            activation,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PoolSpec {
    pub kernel: [usize; 2],
    #[serde(default = "one")]
    pub stride: usize,
    pub padding: [usize; 2],
}

impl PoolSpec {
    pub fn same(kernel: usize) -> Self {
        PoolSpec {
            kernel: [kernel, kernel],
            stride: 1,
            padding: [(kernel.saturating_sub(1)) / 2; 2],
        }
    }
}

/// Which transform produced a convolution; kept in the label so that a
/// rewritten conv keeps its kind when its parameters change.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvRole {
    Plain,
    Identity,
    Branch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OpLabel {
    Input,
    Output,
    #[serde(rename = "conv3x3-bn-relu")]
    Conv3x3BnRelu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<usize>,
    },
    #[serde(rename = "conv1x1-bn-relu")]
    Conv1x1BnRelu {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channels: Option<usize>,
    },
    #[serde(rename = "maxpool3x3")]
    MaxPool3x3,
    #[serde(rename = "avgpool")]
    AvgPool(PoolSpec),
    IdentityConv(ConvSpec),
    /// Explicit parameter-free sum join; inputs may carry gate scalars.
    ZeroGatedSum,
    BranchOp(ConvSpec),
    Conv(ConvSpec),
}

impl OpLabel {
    pub fn conv3x3() -> Self {
        OpLabel::Conv3x3BnRelu { channels: None }
    }

    pub fn conv1x1() -> Self {
        OpLabel::Conv1x1BnRelu { channels: None }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            OpLabel::Input => "input",
            OpLabel::Output => "output",
            OpLabel::Conv3x3BnRelu { .. } => "conv3x3-bn-relu",
            OpLabel::Conv1x1BnRelu { .. } => "conv1x1-bn-relu",
            OpLabel::MaxPool3x3 => "maxpool3x3",
            OpLabel::AvgPool(_) => "avgpool",
            OpLabel::IdentityConv(_) => "identity-conv",
            OpLabel::ZeroGatedSum => "zero-gated-sum",
            OpLabel::BranchOp(_) => "branch-op",
            OpLabel::Conv(_) => "conv",
        }
    }

    /// Parameters of a conv-like op, with the fixed NAS-Bench-101 labels expanded.
    pub fn conv_spec(&self) -> Option<ConvSpec> {
        match *self {
            OpLabel::Conv3x3BnRelu { channels } => Some(ConvSpec {
                channels,
                ..ConvSpec::same(3, true, Activation::Relu)
            }),
            OpLabel::Conv1x1BnRelu { channels } => Some(ConvSpec {
                channels,
                ..ConvSpec::same(1, true, Activation::Relu)
            }),
            OpLabel::IdentityConv(s) | OpLabel::BranchOp(s) | OpLabel::Conv(s) => Some(s),
            _ => None,
        }
    }

    pub fn conv_role(&self) -> Option<ConvRole> {
        match self {
            OpLabel::Conv3x3BnRelu { .. } | OpLabel::Conv1x1BnRelu { .. } | OpLabel::Conv(_) => {
                Some(ConvRole::Plain)
            }
            OpLabel::IdentityConv(_) => Some(ConvRole::Identity),
            OpLabel::BranchOp(_) => Some(ConvRole::Branch),
            _ => None,
        }
    }

    /// Builds the label for a conv. Specs matching a NAS-Bench-101 op get
    /// that op's label regardless of role, since an extractor cannot tell
    /// them apart.
    pub fn from_conv(spec: ConvSpec, role: ConvRole) -> Self {
        let nb101 = spec.stride == 1 && !spec.bias && spec.batchnorm && spec.activation == Activation::Relu;
        if nb101 && spec.kernel == [3, 3] && spec.padding == [1, 1] {
            return OpLabel::Conv3x3BnRelu { channels: spec.channels };
        }
        if nb101 && spec.kernel == [1, 1] && spec.padding == [0, 0] {
            return OpLabel::Conv1x1BnRelu { channels: spec.channels };
        }
        match role {
            ConvRole::Plain => OpLabel::Conv(spec),
            ConvRole::Identity => OpLabel::IdentityConv(spec),
            ConvRole::Branch => OpLabel::BranchOp(spec),
        }
    }

    /// Same op with new conv parameters. Panics on non-conv labels.
    pub fn with_conv_spec(&self, spec: ConvSpec) -> Self {
        let role = self.conv_role().expect("with_conv_spec on a non-conv label");
        OpLabel::from_conv(spec, role)
    }

    pub fn is_conv(&self) -> bool {
        self.conv_spec().is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CellGraph {
    pub node_ops: Vec<OpLabel>,
    pub edges: Vec<(usize, usize)>,
}

impl CellGraph {
    /// `input -> op_1 -> ... -> op_k -> output`.
    pub fn chain(ops: &[OpLabel]) -> Self {
        let mut node_ops = vec![OpLabel::Input];
        node_ops.extend_from_slice(ops);
        node_ops.push(OpLabel::Output);
        let edges = (0..node_ops.len() - 1).map(|i| (i, i + 1)).collect();
        CellGraph { node_ops, edges }
    }

    pub fn len(&self) -> usize {
        self.node_ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node_ops.is_empty()
    }
}

/// Everything outside the cell: stem, stacking, and classifier head.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Backbone {
    pub family: Family,
    pub stem_channels: usize,
    pub num_stacks: usize,
    pub cells_per_stack: usize,
    /// (channels, height, width)
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl Backbone {
    pub fn total_cells(&self) -> usize {
        self.num_stacks * self.cells_per_stack
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub backbone: Backbone,
    pub cell: CellGraph,
}

impl Architecture {
    pub fn new(backbone: Backbone, cell: CellGraph) -> Self {
        Architecture { backbone, cell }
    }

    pub fn with_cell(&self, cell: CellGraph) -> Self {
        Architecture {
            backbone: self.backbone.clone(),
            cell,
        }
    }
}
