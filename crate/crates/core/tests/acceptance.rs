//! One pass/fail line per acceptance criterion. Runs without the test
//! harness: sequential, so timings are meaningful and the thread-count
//! variable is touched safely, and the lines are never captured.

mod common;

use std::time::{Duration, Instant};

use common::*;
use obfunas::arch::{canonical_hash, Activation, CellGraph, ConvSpec, Family, OpLabel};
use obfunas::flops::flops_of_network;
use obfunas::network::{
    forward_trace, numeric_gradient, ConcreteNetwork, Loss, ParamSelector, ParamTensor,
};
use obfunas::oracle::FitnessOracle;
use obfunas::search::{
    brute_force_search, evolve, evolve_with, random_application, random_plan, Evaluator, SearchConfig, SearchError,
    Tau, THREADS_ENV,
};
use obfunas::tensor::{batchnorm_inference, conv2d, fake_swish, Kernel, Tensor};
use obfunas::transforms::{
    apply_application, apply_plan, check_function_preserving, undo_batchnorm, StrategyApplication, StrategyKind as K,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// The seven strategies; the shortcut strategy covers both placements.
const STRATEGIES: [(&str, &[K]); 7] = [
    ("widen-layer", &[K::WidenLayer]),
    ("deepen-layer", &[K::DeepenLayer]),
    ("widen-kernel", &[K::WidenKernel]),
    ("replace-avgpool", &[K::ReplaceAvgpool]),
    ("replace-skip", &[K::ReplaceSkip]),
    ("add-shortcut", &[K::AddShortcutSequential, K::AddShortcutParallel]),
    ("add-branch", &[K::AddBranch]),
];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, t: Duration, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!("criterion {n}: {verdict} ({:.1}s) {}", t.as_secs_f64(), o.detail);
}

/// FLOPs counted from traced activation shapes and stored weights.
fn traced_flops(net: &ConcreteNetwork) -> u64 {
    let [c, h, w] = net.input_shape();
    let outs = forward_trace(net, &Tensor::zeros([1, c, h, w])).unwrap();
    net.params()
        .iter()
        .zip(&outs)
        .filter_map(|(p, out)| {
            let conv = p.conv.as_ref()?;
            let [k1, k2, ci, _] = conv.weight.dims();
            let plane = out.data().len() as u64;
            Some(2 * (k1 * k2 * ci) as u64 * plane + if conv.bias.is_some() { plane } else { 0 })
        })
        .sum()
}

struct Applied {
    strategy: usize,
    before: ConcreteNetwork,
    after: ConcreteNetwork,
    app: StrategyApplication,
}

/// 200 valid random applications of each strategy on random networks.
fn corpus(rng: &mut ChaCha8Rng) -> Vec<Applied> {
    let mut out = Vec::new();
    for (s, (_, kinds)) in STRATEGIES.iter().enumerate() {
        let mut made = 0;
        while made < 200 {
            let net = random_network(rng);
            let app = match random_application(net.skeleton(), kinds, rng) {
                Ok(a) => a,
                Err(SearchError::Saturated { .. }) => continue,
                Err(e) => panic!("{e}"),
            };
            let after = apply_application(&net, &app).unwrap_or_else(|e| panic!("{app:?}: {e}"));
            out.push(Applied { strategy: s, before: net, after, app });
            made += 1;
        }
    }
    out
}

fn criterion_1(corpus: &[Applied]) -> Outcome {
    let mut failures = Vec::new();
    let mut worst = 0.0f64;
    for (i, a) in corpus.iter().enumerate() {
        let r = check_function_preserving(&a.before, &a.after, 8, i as u64, 0.0).unwrap();
        worst = worst.max(r.max_abs_diff);
        if !r.pass {
            failures.push(format!("{:?}", a.app));
        }
    }
    Outcome {
        pass: failures.is_empty(),
        detail: format!(
            "{} applications, {} not bit-exact, max diff {worst:e}{}",
            corpus.len(),
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default()
        ),
    }
}

fn criterion_2(rng: &mut ChaCha8Rng) -> Outcome {
    let mut bad = 0;
    let mut lengths = 0;
    for i in 0..100 {
        let net = random_network(rng);
        let plan = random_plan(net.skeleton(), &K::ALL, 8, rng).unwrap();
        lengths += plan.len();
        let mask = apply_plan(&net, &plan).unwrap();
        if !check_function_preserving(&net, &mask, 4, i, 0.0).unwrap().pass {
            bad += 1;
        }
    }
    Outcome {
        pass: bad == 0,
        detail: format!("100 plans (mean length {:.2}), {bad} not bit-exact", lengths as f64 / 100.0),
    }
}

fn criterion_3(corpus: &[Applied]) -> Outcome {
    let mut bad = Vec::new();
    let mut mismatch = 0;
    for (s, (name, _)) in STRATEGIES.iter().enumerate() {
        let deltas: Vec<i128> = corpus
            .iter()
            .filter(|a| a.strategy == s)
            .take(100)
            .map(|a| {
                let (b, f) = (traced_flops(&a.before), traced_flops(&a.after));
                if b != flops_of_network(&a.before).value() || f != flops_of_network(&a.after).value() {
                    mismatch += 1;
                }
                f as i128 - b as i128
            })
            .collect();
        let ok = if *name == "add-shortcut" {
            deltas.iter().all(|&d| d == 0)
        } else {
            deltas.iter().all(|&d| d > 0)
        };
        if !ok {
            bad.push(*name);
        }
    }
    Outcome {
        pass: bad.is_empty() && mismatch == 0,
        detail: format!("700 applications, counter mismatches {mismatch}, wrong overhead sign: {bad:?}"),
    }
}

/// input -> n1 -> n2 -> output plus n1 -> output; the n2 -> output gate is
/// varied. Summing the output join, the derivative with respect to
/// W1[t, j] is sum(x_t) * (1 + g * sum_k W2[j, k]).
fn criterion_4() -> Outcome {
    let linear = || OpLabel::Conv(ConvSpec::same(1, false, Activation::None));
    let cell = CellGraph {
        node_ops: vec![OpLabel::Input, linear(), linear(), OpLabel::Output],
        edges: vec![(0, 1), (1, 2), (1, 3), (2, 3)],
    };
    let base = net(backbone(Family::GenericDag, 3, 1, 1), cell, 4);
    let x = Tensor::standard_normal([2, 3, 6, 6], &mut ChaCha8Rng::seed_from_u64(5));
    let stem = base.find_layer("stem").unwrap();
    let w1 = base.find_layer("s0.c0.n1").unwrap();
    let w2 = base.find_layer("s0.c0.n2").unwrap();
    let mut worst = 0.0f64;
    for g in [1.0, 0.0] {
        let mut f = base.clone();
        f.set_gate(2, 3, g).unwrap();
        let xs = &forward_trace(&f, &x).unwrap()[stem];
        let [_, c, h, w] = xs.shape();
        let k1 = f.params()[w1].conv.as_ref().unwrap().weight.clone();
        let k2 = &f.params()[w2].conv.as_ref().unwrap().weight;
        let selector = ParamSelector {
            layer: "s0.c0.n1".into(),
            tensor: ParamTensor::Weight,
            indices: (0..c).flat_map(|t| (0..c).map(move |j| (t, j))).map(|(t, j)| k1.offset(0, 0, t, j)).collect(),
        };
        let grad = numeric_gradient(&f, &x, &Loss::SumLayer("s0.c0.n3".into()), &selector, 1e-3).unwrap();
        for (i, (t, j)) in (0..c).flat_map(|t| (0..c).map(move |j| (t, j))).enumerate() {
            let sx: f64 = (0..2)
                .flat_map(|n| (0..h).flat_map(move |p| (0..w).map(move |q| (n, p, q))))
                .map(|(n, p, q)| xs.at(n, t, p, q))
                .sum();
            let row: f64 = (0..c).map(|k| k2.get(0, 0, j, k)).sum();
            let expected = sx * (1.0 + g * row);
            worst = worst.max((grad[i] - expected).abs() / expected.abs().max(1.0));
        }
    }
    Outcome {
        pass: worst <= 1e-5,
        detail: format!("gates 1 and 0, worst relative gradient error {worst:e}"),
    }
}

fn criterion_5() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut bad = [0usize; 3];
    for _ in 0..1000 {
        let c = rng.random_range(1..=4);
        let shape = [rng.random_range(1..=2), c, rng.random_range(1..=7), rng.random_range(1..=7)];
        let scale = [1e-3, 1.0, 1e3][rng.random_range(0..3)];
        let x = Tensor::standard_normal(shape, &mut rng).map(|v| (v * scale) as f32 as f64);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let y = conv2d(&x, &Kernel::identity(k, k, c), None, 1, [k / 2, k / 2]).unwrap();
        bad[0] += (y != x) as usize;
        let bn = undo_batchnorm(c, &mut rng);
        bad[1] += (batchnorm_inference(&x, &bn).unwrap() != x) as usize;
        bad[2] += (fake_swish(&x) != x) as usize;
    }
    Outcome {
        pass: bad == [0; 3],
        detail: format!("1000 tensors, mismatches identity-conv/bn-undo/fake-swish = {bad:?}"),
    }
}

fn criterion_6() -> Outcome {
    let chain2 = || CellGraph::chain(&[OpLabel::conv3x3(), OpLabel::conv1x1()]);
    let spaces: Vec<(&str, Family, CellGraph, Vec<K>, usize)> = vec![
        ("chain-deepen", Family::GenericDag, chain2(), vec![K::DeepenLayer], 2),
        ("kernel-pool", Family::GenericDag, nb101_cell(), vec![K::WidenKernel, K::ReplaceAvgpool], 3),
        ("cell-stack-all", Family::CellStack, chain2(), K::ALL.to_vec(), 2),
        ("shortcuts", Family::GenericDag, nb101_cell(), vec![K::AddShortcutSequential, K::AddShortcutParallel], 3),
        ("skip-deepen", Family::GenericDag, skip_cell(OpLabel::conv1x1(), avgpool(3)), vec![K::DeepenLayer], 2),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (i, (name, family, cell, strategies, len)) in spaces.into_iter().enumerate() {
        let f = net(backbone(family, 2, 1, 1), cell, 0);
        let oracle = FitnessOracle::synthetic(i as u64 + 1);
        let tau = Tau::Multiplier(1.5);
        let exact = brute_force_search(&f, &oracle, tau, &strategies, len, 5000).unwrap();
        let ev = Evaluator::new(f.skeleton(), &oracle);
        let cfg = SearchConfig { strategies, max_plan_length: len, tau, ..Default::default() };
        let mut hits = 0;
        let mut infeasible = 0;
        for seed in 0..100 {
            let r = evolve_with(&ev, &f, &SearchConfig { seed, ..cfg.clone() }).unwrap();
            hits += ((r.best_fitness - exact.best_fitness).abs() <= 0.01) as usize;
            infeasible += (r.flops_mask as f64 >= r.tau) as usize;
        }
        pass &= hits >= 95 && infeasible == 0;
        parts.push(format!("{name}: {hits}/100 of {} masks", exact.evaluations));
    }
    Outcome { pass, detail: parts.join(", ") }
}

fn criterion_7() -> Outcome {
    let f = net(backbone(Family::GenericDag, 2, 1, 1), nb101_cell(), 0);
    let oracle = FitnessOracle::synthetic(7);
    let cfg = SearchConfig { cycles: 300, seed: 11, ..Default::default() };
    let mut runs = Vec::new();
    for threads in ["1", "1", "4"] {
        std::env::set_var(THREADS_ENV, threads);
        let r = evolve(&f, &oracle, &cfg).unwrap();
        runs.push((r.to_json(), r.history_csv()));
    }
    std::env::remove_var(THREADS_ENV);
    let other = evolve(&f, &oracle, &SearchConfig { seed: 12, ..cfg.clone() }).unwrap();
    let same = runs.windows(2).all(|w| w[0] == w[1]);
    let differs = other.history_csv() != runs[0].1;
    Outcome {
        pass: same && differs,
        detail: format!("identical reports across reruns and thread counts: {same}, other seed differs: {differs}"),
    }
}

fn criterion_8(corpus: &[Applied]) -> Outcome {
    let same = corpus
        .iter()
        .filter(|a| canonical_hash(&a.before.architecture()).unwrap() == canonical_hash(&a.after.architecture()).unwrap())
        .count();
    Outcome {
        pass: same == 0,
        detail: format!("{} applications, {same} left the hash unchanged", corpus.len()),
    }
}

fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let t = Instant::now();
    let corpus = corpus(&mut rng);
    println!("corpus: {} applications in {:.1}s", corpus.len(), t.elapsed().as_secs_f64());

    let mut results = Vec::new();
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = f();
        report(n, t.elapsed(), &o);
        results.push((n, o.pass));
    };
    run(1, &mut || criterion_1(&corpus));
    run(2, &mut || criterion_2(&mut rng));
    run(3, &mut || criterion_3(&corpus));
    run(4, &mut criterion_4);
    run(5, &mut criterion_5);
    run(6, &mut criterion_6);
    run(7, &mut criterion_7);
    run(8, &mut || criterion_8(&corpus));
    let failed: Vec<usize> = results.iter().filter(|r| !r.1).map(|r| r.0).collect();
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
