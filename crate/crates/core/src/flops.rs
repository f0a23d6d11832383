//! FLOPs model. Only convolutions cost anything: one multiply-accumulate is
//! two FLOPs and a bias adds one per output value. Pooling, batchnorm,
//! activations and joins are free.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use crate::arch::Architecture;
use crate::network::{compile, CellTemplate, ConcreteNetwork, LayerOp, NetworkError, Skeleton};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FlopsCount(pub u64);

impl FlopsCount {
    pub fn value(self) -> u64 {
        self.0
    }

    pub fn mflops(self) -> f64 {
        self.0 as f64 / 1e6
    }
}

impl fmt::Display for FlopsCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mflops={:.2} flops={}", self.mflops(), self.0)
    }
}

impl Add for FlopsCount {
    type Output = FlopsCount;

    fn add(self, rhs: FlopsCount) -> FlopsCount {
        FlopsCount(self.0 + rhs.0)
    }
}

impl Sum for FlopsCount {
    fn sum<I: Iterator<Item = FlopsCount>>(iter: I) -> FlopsCount {
        FlopsCount(iter.map(|f| f.0).sum())
    }
}

/// Operation kinds the model distinguishes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpCost {
    Conv { kernel: [usize; 2], bias: bool },
    Free,
}

/// Cost of one op producing `out = [c, h, w]` from `cin` input channels.
pub fn flops_of_op(op: OpCost, cin: usize, out: [usize; 3]) -> FlopsCount {
    match op {
        OpCost::Conv { kernel: [k1, k2], bias } => {
            let [co, h, w] = out.map(|v| v as u64);
            let plane = co * h * w;
            FlopsCount(2 * (k1 * k2 * cin) as u64 * plane + if bias { plane } else { 0 })
        }
        OpCost::Free => FlopsCount(0),
    }
}

pub fn flops_of_skeleton(skel: &Skeleton) -> FlopsCount {
    skel.layers
        .iter()
        .map(|l| match l.op {
            LayerOp::Conv(s) => flops_of_op(
                OpCost::Conv { kernel: s.kernel, bias: s.bias },
                l.in_shape[0],
                l.out_shape,
            ),
            _ => FlopsCount(0),
        })
        .sum()
}

/// Counts from the stored weight tensors rather than the layer specs.
pub fn flops_of_network(net: &ConcreteNetwork) -> FlopsCount {
    net.layers()
        .iter()
        .zip(net.params())
        .map(|(l, p)| match &p.conv {
            Some(c) => {
                let [k1, k2, ci, co] = c.weight.dims();
                let [_, h, w] = l.out_shape;
                flops_of_op(OpCost::Conv { kernel: [k1, k2], bias: c.bias.is_some() }, ci, [co, h, w])
            }
            None => FlopsCount(0),
        })
        .sum()
}

pub fn flops_of_arch(arch: &Architecture) -> Result<FlopsCount, NetworkError> {
    let skel = compile(&arch.backbone, &CellTemplate::from_cell(&arch.cell))?;
    Ok(flops_of_skeleton(&skel))
}
