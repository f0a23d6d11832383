mod common;

use common::*;
use obfunas::arch::{canonical_hash, Activation, CellGraph, Family, OpLabel};
use obfunas::network::{forward_trace, ConcreteNetwork};
use obfunas::tensor::{avg_pool, Tensor};
use obfunas::transforms::{
    apply_application, apply_plan, candidates, check_function_preserving, ObfuscationPlan,
    StrategyApplication as A, StrategyKind, TransformError,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn exact(f: &ConcreteNetwork, g: &ConcreteNetwork) {
    let r = check_function_preserving(f, g, 100, 11, 0.0).unwrap();
    assert!(r.pass, "max abs diff {}", r.max_abs_diff);
    assert_eq!(r.max_abs_diff, 0.0);
}

fn precondition(r: Result<ConcreteNetwork, TransformError>, needle: &str) {
    match r {
        Err(TransformError::Precondition(m)) => assert!(m.contains(needle), "{m}"),
        other => panic!("expected precondition error, got {:?}", other.map(|_| ())),
    }
}

fn generic(cell: CellGraph) -> ConcreteNetwork {
    net(backbone(Family::GenericDag, 2, 2, 1), cell, 7)
}

fn widen_chain() -> ConcreteNetwork {
    generic(CellGraph::chain(&[
        conv(1, Some(2), false, Activation::Relu),
        conv(1, Some(1), false, Activation::None),
    ]))
}

#[test]
fn widen_preserves_and_grows_successor() {
    let f = widen_chain();
    let g = apply_application(&f, &A::WidenLayer { node: 1, channels: 4, seed: 3 }).unwrap();
    exact(&f, &g);
    let succ = g.find_layer("s0.c0.n2").unwrap();
    assert_eq!(g.params()[succ].conv.as_ref().unwrap().weight.dims(), [1, 1, 4, 1]);
}

#[test]
fn widen_across_batchnorm() {
    let f = generic(CellGraph::chain(&[conv(3, Some(3), true, Activation::Relu), conv(1, None, true, Activation::Relu)]));
    let g = apply_application(&f, &A::WidenLayer { node: 1, channels: 5, seed: 1 }).unwrap();
    exact(&f, &g);
}

#[test]
fn widen_rejections() {
    let f = widen_chain();
    precondition(apply_application(&f, &A::WidenLayer { node: 1, channels: 2, seed: 0 }), "must exceed");
    precondition(apply_application(&f, &A::WidenLayer { node: 0, channels: 4, seed: 0 }), "not a convolution");
    let fan = generic(CellGraph {
        node_ops: vec![
            OpLabel::Input,
            conv(1, None, false, Activation::Relu),
            conv(1, None, false, Activation::Relu),
            conv(1, None, false, Activation::Relu),
            OpLabel::Output,
        ],
        edges: vec![(0, 1), (1, 2), (1, 3), (2, 4), (3, 4)],
    });
    precondition(apply_application(&fan, &A::WidenLayer { node: 1, channels: 4, seed: 0 }), "fan-out exceeds 1");
}

#[test]
fn deepen_identity_and_bn_undo() {
    let f = generic(CellGraph::chain(&[OpLabel::conv3x3(), conv(3, None, false, Activation::None)]));
    for (edge, bn, act) in [
        ([1, 2], false, Activation::Relu),
        ([1, 2], true, Activation::Relu),
        ([2, 3], true, Activation::FakeSwish),
        ([0, 1], true, Activation::None),
    ] {
        let app = A::DeepenLayer { edge, kernel: 3, batchnorm: bn, activation: act, seed: 5 };
        let g = apply_application(&f, &app).unwrap();
        assert_eq!(g.template().nodes().len(), f.template().nodes().len() + 1);
        exact(&f, &g);
    }
}

#[test]
fn deepen_rejections() {
    let f = generic(CellGraph::chain(&[conv(3, None, false, Activation::None), OpLabel::conv1x1()]));
    let mk = |edge, kernel, activation| A::DeepenLayer { edge, kernel, batchnorm: false, activation, seed: 0 };
    precondition(apply_application(&f, &mk([1, 2], 3, Activation::Swish)), "fake-swish");
    precondition(apply_application(&f, &mk([1, 2], 2, Activation::None)), "odd");
    precondition(apply_application(&f, &mk([1, 2], 3, Activation::Relu)), "negative");
    precondition(apply_application(&f, &mk([0, 2], 3, Activation::None)), "no edge");
}

#[test]
fn widen_kernel_cases() {
    let f = generic(CellGraph::chain(&[OpLabel::conv1x1(), OpLabel::conv3x3()]));
    let g = apply_application(&f, &A::WidenKernel { node: 1, kernel: [3, 3], seed: 0 }).unwrap();
    exact(&f, &g);
    let h = apply_application(&g, &A::WidenKernel { node: 2, kernel: [5, 5], seed: 0 }).unwrap();
    exact(&f, &h);
    let l = &h.layers()[h.find_layer("s0.c0.n2").unwrap()];
    assert_eq!(l.in_shape[1..], l.out_shape[1..]);
    match l.op {
        obfunas::network::LayerOp::Conv(s) => assert_eq!(s.padding, [2, 2]),
        _ => panic!("not a conv"),
    }
    let asym = apply_application(&f, &A::WidenKernel { node: 2, kernel: [5, 3], seed: 0 }).unwrap();
    exact(&f, &asym);
    precondition(apply_application(&f, &A::WidenKernel { node: 2, kernel: [3, 3], seed: 0 }), "widens nothing");
    precondition(apply_application(&f, &A::WidenKernel { node: 2, kernel: [4, 4], seed: 0 }), "parity");
    precondition(apply_application(&f, &A::WidenKernel { node: 2, kernel: [1, 3], seed: 0 }), "shrink");
}

#[test]
fn avgpool_replacement() {
    for k in [1, 3] {
        let f = generic(CellGraph::chain(&[OpLabel::conv3x3(), avgpool(k)]));
        let g = apply_application(&f, &A::ReplaceAvgpool { node: 2, seed: 0 }).unwrap();
        exact(&f, &g);
        let conv = g.template().nodes().iter().find(|n| n.op.is_conv() && n.id >= 4).unwrap();
        assert!(matches!(conv.op, OpLabel::Conv(_)));
        if k == 1 {
            let l = g.find_layer(&format!("s0.c0.n{}", conv.id)).unwrap();
            let w = &g.params()[l].conv.as_ref().unwrap().weight;
            assert_eq!(*w, obfunas::tensor::Kernel::identity(1, 1, 2));
        }
    }
    precondition(
        apply_application(&widen_chain(), &A::ReplaceAvgpool { node: 1, seed: 0 }),
        "not an average pool",
    );
}

#[test]
fn diagonal_conv_matches_pool_on_two_channels() {
    let f = generic(CellGraph::chain(&[avgpool(3)]));
    let g = apply_application(&f, &A::ReplaceAvgpool { node: 1, seed: 0 }).unwrap();
    let x = Tensor::standard_normal([4, 3, 6, 6], &mut ChaCha8Rng::seed_from_u64(2));
    let (tf, tg) = (forward_trace(&f, &x).unwrap(), forward_trace(&g, &x).unwrap());
    let pooled = avg_pool(&tf[0], [3, 3], 1, [1, 1]).unwrap();
    assert_eq!(tf[1], pooled);
    assert_eq!(tg[1], pooled);
}

#[test]
fn skip_replacement() {
    let f = generic(skip_cell(OpLabel::conv3x3(), conv(1, None, false, Activation::None)));
    let g = apply_application(&f, &A::ReplaceSkip { edge: [0, 3], kernel: 3, seed: 0 }).unwrap();
    exact(&f, &g);
    let new = g.template().next_id() - 1;
    let h = apply_application(
        &g,
        &A::DeepenLayer { edge: [new, 3], kernel: 1, batchnorm: true, activation: obfunas::arch::Activation::None, seed: 2 },
    )
    .unwrap();
    exact(&f, &h);
    precondition(apply_application(&f, &A::ReplaceSkip { edge: [1, 2], kernel: 1, seed: 0 }), "skip");
}

#[test]
fn shortcuts() {
    let f = generic(nb101_cell());
    let seq = apply_application(&f, &A::AddShortcutSequential { edge: [3, 5], seed: 0 });
    precondition(seq, "already connected");
    for app in [
        A::AddShortcutSequential { edge: [0, 4], seed: 0 },
        A::AddShortcutSequential { edge: [2, 5], seed: 0 },
        A::AddShortcutParallel { edge: [1, 4], seed: 0 },
        A::AddShortcutParallel { edge: [2, 3], seed: 0 },
    ] {
        let g = apply_application(&f, &app).unwrap();
        exact(&f, &g);
    }
    precondition(apply_application(&f, &A::AddShortcutSequential { edge: [1, 1], seed: 0 }), "both node");
    precondition(apply_application(&f, &A::AddShortcutParallel { edge: [4, 1], seed: 0 }), "precede");
    precondition(apply_application(&f, &A::AddShortcutParallel { edge: [0, 4], seed: 0 }), "sequential");
    precondition(apply_application(&f, &A::AddShortcutSequential { edge: [1, 4], seed: 0 }), "parallel");
}

#[test]
fn shortcut_shape_mismatch_is_an_error() {
    let f = generic(CellGraph::chain(&[conv(1, Some(3), false, Activation::Relu), conv(1, None, false, Activation::Relu)]));
    assert!(matches!(
        apply_application(&f, &A::AddShortcutSequential { edge: [1, 3], seed: 0 }),
        Err(TransformError::Network(_))
    ));
}

#[test]
fn branches() {
    let f = generic(nb101_cell());
    for (edge, k, bn, act) in [([0, 4], 3, true, Activation::Relu), ([1, 5], 1, false, Activation::None), ([2, 3], 3, false, Activation::Relu)] {
        let app = A::AddBranch { edge, kernel: k, batchnorm: bn, activation: act, stride: 1, seed: 4 };
        exact(&f, &apply_application(&f, &app).unwrap());
    }
    let strided = A::AddBranch { edge: [0, 4], kernel: 3, batchnorm: false, activation: Activation::Relu, stride: 2, seed: 0 };
    precondition(apply_application(&f, &strided), "feature-map size not preserved");
}

#[test]
fn every_application_changes_the_hash() {
    let f = generic(nb101_cell());
    let before = canonical_hash(&f.architecture()).unwrap();
    for kind in StrategyKind::ALL {
        for app in candidates(f.skeleton(), kind) {
            if let Ok(g) = apply_application(&f, &app) {
                assert_ne!(canonical_hash(&g.architecture()).unwrap(), before, "{app:?}");
            }
        }
    }
}

#[test]
fn cell_stack_family_limits() {
    let f = net(backbone(Family::CellStack, 4, 1, 1), nb101_cell(), 3);
    let widen = apply_application(&f, &A::WidenLayer { node: 2, channels: 8, seed: 0 });
    assert!(matches!(widen, Err(TransformError::Family { .. })));
    let deepen = A::DeepenLayer { edge: [1, 3], kernel: 3, batchnorm: true, activation: Activation::Relu, seed: 0 };
    exact(&f, &apply_application(&f, &deepen).unwrap());
    let grow = A::WidenKernel { node: 2, kernel: [3, 3], seed: 0 };
    exact(&f, &apply_application(&f, &grow).unwrap());
}

#[test]
fn plans() {
    let f = generic(nb101_cell());
    assert_eq!(apply_plan(&f, &ObfuscationPlan::default()).unwrap(), f);
    let plan = ObfuscationPlan::new(vec![
        A::AddShortcutParallel { edge: [1, 4], seed: 0 },
        A::ReplaceAvgpool { node: 3, seed: 0 },
        A::AddBranch { edge: [0, 5], kernel: 1, batchnorm: false, activation: Activation::None, stride: 1, seed: 0 },
    ]);
    let err = apply_plan(&f, &plan).unwrap_err();
    assert_eq!(err.position, 2);
    let plan = ObfuscationPlan::new(vec![
        A::DeepenLayer { edge: [0, 1], kernel: 1, batchnorm: true, activation: Activation::None, seed: 1 },
        A::DeepenLayer { edge: [6, 1], kernel: 3, batchnorm: false, activation: Activation::FakeSwish, seed: 2 },
        A::WidenKernel { node: 7, kernel: [5, 5], seed: 0 },
        A::AddShortcutParallel { edge: [6, 2], seed: 0 },
    ]);
    exact(&f, &apply_plan(&f, &plan).unwrap());
}

#[test]
fn plan_error_reports_third_position() {
    let f = generic(skip_cell(OpLabel::conv3x3(), avgpool(3)));
    let plan = ObfuscationPlan::new(vec![
        A::DeepenLayer { edge: [1, 2], kernel: 1, batchnorm: false, activation: Activation::Relu, seed: 0 },
        A::ReplaceAvgpool { node: 2, seed: 0 },
        A::WidenKernel { node: 2, kernel: [5, 5], seed: 0 },
    ]);
    let err = apply_plan(&f, &plan).unwrap_err();
    assert_eq!((err.position, err.kind), (3, StrategyKind::WidenKernel));
}

#[test]
fn equivalence_checker() {
    let f = widen_chain();
    let r = check_function_preserving(&f, &f, 10, 0, 0.0).unwrap();
    assert_eq!((r.max_abs_diff, r.pass, r.samples), (0.0, true, 10));
    let mut g = f.clone();
    let cls = g.find_layer("classifier").unwrap();
    g.params_mut()[cls].conv.as_mut().unwrap().weight.data_mut()[0] += 1e-2;
    assert!(!check_function_preserving(&f, &g, 10, 0, 1e-6).unwrap().pass);
    let other = net(
        obfunas::arch::Backbone { input_shape: [3, 8, 8], ..backbone(Family::GenericDag, 2, 1, 1) },
        CellGraph::chain(&[OpLabel::conv1x1()]),
        0,
    );
    assert!(check_function_preserving(&f, &other, 1, 0, 0.0).is_err());
}

#[test]
fn input_network_is_not_mutated() {
    let f = generic(nb101_cell());
    let copy = f.clone();
    let _ = apply_application(&f, &A::AddShortcutParallel { edge: [1, 4], seed: 0 }).unwrap();
    assert_eq!(f, copy);
}
