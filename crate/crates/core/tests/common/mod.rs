#![allow(dead_code)]

use obfunas::arch::{
    validate_architecture, Activation, Architecture, Backbone, CellGraph, ConvSpec, Family, OpLabel, PoolSpec,
};
use obfunas::network::{build_network, ConcreteNetwork, InitPolicy};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn backbone(family: Family, stem: usize, stacks: usize, cells: usize) -> Backbone {
    Backbone {
        family,
        stem_channels: stem,
        num_stacks: stacks,
        cells_per_stack: cells,
        input_shape: [3, 6, 6],
        num_classes: 5,
    }
}

pub fn conv(k: usize, channels: Option<usize>, bn: bool, act: Activation) -> OpLabel {
    OpLabel::Conv(ConvSpec {
        channels,
        ..ConvSpec::same(k, bn, act)
    })
}

pub fn avgpool(k: usize) -> OpLabel {
    OpLabel::AvgPool(PoolSpec::same(k))
}

pub fn net(backbone: Backbone, cell: CellGraph, seed: u64) -> ConcreteNetwork {
    build_network(&Architecture::new(backbone, cell), InitPolicy::default(), seed).unwrap()
}

/// input -> a -> b -> output with a skip input -> output.
pub fn skip_cell(a: OpLabel, b: OpLabel) -> CellGraph {
    CellGraph {
        node_ops: vec![OpLabel::Input, a, b, OpLabel::Output],
        edges: vec![(0, 1), (1, 2), (2, 3), (0, 3)],
    }
}

/// A six-node cell in the NAS-Bench-101 vocabulary.
pub fn nb101_cell() -> CellGraph {
    CellGraph {
        node_ops: vec![
            OpLabel::Input,
            OpLabel::conv3x3(),
            OpLabel::conv1x1(),
            OpLabel::MaxPool3x3,
            OpLabel::conv3x3(),
            OpLabel::Output,
        ],
        edges: vec![(0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 5), (0, 5)],
    }
}

fn random_op(rng: &mut ChaCha8Rng) -> OpLabel {
    let acts = [Activation::None, Activation::Relu, Activation::Swish, Activation::FakeSwish];
    match rng.random_range(0..10) {
        0 => OpLabel::MaxPool3x3,
        1 | 2 => OpLabel::AvgPool(PoolSpec::same(if rng.random_bool(0.7) { 3 } else { 1 })),
        _ => OpLabel::Conv(ConvSpec {
            bias: rng.random_bool(0.3),
            ..ConvSpec::same(
                [1, 3, 5][rng.random_range(0..3)],
                rng.random_bool(0.5),
                acts[rng.random_range(0..acts.len())],
            )
        }),
    }
}

/// A random valid generic DAG: 3 to 6 nodes, every node on an input-output path.
pub fn random_arch(rng: &mut ChaCha8Rng) -> Architecture {
    loop {
        let n = rng.random_range(3..=6);
        let mut node_ops = vec![OpLabel::Input];
        node_ops.extend((1..n - 1).map(|_| random_op(rng)));
        node_ops.push(OpLabel::Output);
        let mut edges = Vec::new();
        for v in 1..n {
            edges.push((rng.random_range(0..v), v));
        }
        for u in 1..n - 1 {
            if !edges.iter().any(|&(s, _)| s == u) {
                edges.push((u, rng.random_range(u + 1..n)));
            }
        }
        for u in 0..n {
            for v in u + 1..n {
                if !edges.contains(&(u, v)) && rng.random_bool(0.2) {
                    edges.push((u, v));
                }
            }
        }
        let arch = Architecture::new(
            Backbone {
                family: Family::GenericDag,
                stem_channels: rng.random_range(2..=4),
                num_stacks: rng.random_range(1..=2),
                cells_per_stack: rng.random_range(1..=2),
                input_shape: [3, 8, 8],
                num_classes: 4,
            },
            CellGraph { node_ops, edges },
        );
        if validate_architecture(&arch).ok {
            return arch;
        }
    }
}

pub fn random_network(rng: &mut ChaCha8Rng) -> ConcreteNetwork {
    let arch = random_arch(rng);
    build_network(&arch, InitPolicy::default(), rng.random()).unwrap()
}
