//! Function-preserving rewrites. Each strategy changes the architecture and
//! fills the affected parameters so that the network computes exactly the
//! same logits as before.
//!
//! Node ids are stable: rewrites assign fresh ids and never reuse old ones,
//! so later applications in a plan can target nodes created by earlier ones.

mod fill;
mod plan;
mod rewrite;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::arch::{validate_architecture, Family, ValidationReport};
use crate::network::{
    compile, forward, ConcreteNetwork, LayerParams, NetworkError, Origin, Skeleton,
};
use crate::tensor::Tensor;

pub use plan::{
    parse_plan, parse_strategy_set, serialize_plan, ObfuscationPlan, StrategyApplication,
    StrategyKind, PLAN_SCHEMA,
};
pub use fill::undo_batchnorm;
pub use rewrite::candidates;

#[derive(Debug, Error)]
pub enum TransformError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("result leaves the {family:?} family: {report}")]
    Family {
        family: Family,
        report: ValidationReport,
    },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// The first application of a plan that could not be applied.
#[derive(Debug, Error)]
#[error("application {position} ({kind}): {source}")]
pub struct PlanError {
    /// 1-based index into the plan.
    pub position: usize,
    pub kind: StrategyKind,
    #[source]
    pub source: TransformError,
}

fn finish(skel: &Skeleton, rw: &rewrite::Rewrite) -> Result<Skeleton, TransformError> {
    let arch = crate::arch::Architecture::new(skel.backbone.clone(), rw.template.to_cell());
    let report = validate_architecture(&arch);
    if !report.ok {
        return Err(TransformError::Family {
            family: skel.backbone.family,
            report,
        });
    }
    Ok(compile(&skel.backbone, &rw.template)?)
}

/// The rewritten skeleton alone, without parameters. Agrees with
/// [`apply_application`] on structure.
pub fn apply_structure(skel: &Skeleton, app: &StrategyApplication) -> Result<Skeleton, TransformError> {
    let rw = rewrite::rewrite(skel, app, true)?;
    finish(skel, &rw)
}

pub fn apply_plan_structure(skel: &Skeleton, plan: &ObfuscationPlan) -> Result<Skeleton, PlanError> {
    let mut cur = skel.clone();
    for (i, app) in plan.applications.iter().enumerate() {
        cur = apply_structure(&cur, app).map_err(|source| PlanError {
            position: i + 1,
            kind: app.kind(),
            source,
        })?;
    }
    Ok(cur)
}

/// Applies one strategy. The input network is left untouched.
pub fn apply_application(
    net: &ConcreteNetwork,
    app: &StrategyApplication,
) -> Result<ConcreteNetwork, TransformError> {
    let old = net.skeleton();
    let gates_nonneg = old
        .layers
        .iter()
        .zip(net.params())
        .filter(|(l, _)| matches!(l.origin, Origin::Cell { .. }))
        .all(|(_, p)| p.gates.iter().all(|&g| g >= 0.0));
    let rw = rewrite::rewrite(old, app, gates_nonneg)?;
    let skel = finish(old, &rw)?;
    let index: HashMap<Origin, usize> = old.layers.iter().enumerate().map(|(i, l)| (l.origin, i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(app.seed());
    let mut params = Vec::with_capacity(skel.layers.len());
    for l in &skel.layers {
        let Origin::Cell { stack, cell, node } = l.origin else {
            params.push(net.params()[index[&l.origin]].clone());
            continue;
        };
        let src_node = rw.carry_from.get(&node).copied().unwrap_or(node);
        let old_i = index.get(&Origin::Cell { stack, cell, node: src_node }).copied();
        let old_p = old_i.map(|i| &net.params()[i]);
        let old_inputs = old.template.node(src_node).map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        let inputs = &rw.template.node(node).expect("compiled from the template").inputs;
        let gates = inputs
            .iter()
            .map(|&s| {
                if let Some(&g) = rw.new_gates.get(&(node, s)) {
                    return g;
                }
                let was = rw.renamed.get(&(node, s)).copied().unwrap_or(s);
                let slot = old_inputs.iter().position(|&x| x == was);
                match (old_p, slot) {
                    (Some(p), Some(k)) => p.gates[k],
                    _ => 1.0,
                }
            })
            .collect();
        let conv = match (rw.fill.get(&node), l.op) {
            (Some(&f), crate::network::LayerOp::Conv(_)) => Some(fill::fill_conv(
                f,
                l,
                old_p.and_then(|p| p.conv.as_ref()),
                &mut rng,
            )),
            _ => old_p.and_then(|p| p.conv.clone()),
        };
        params.push(LayerParams { gates, conv });
    }
    Ok(ConcreteNetwork::new(skel, params)?)
}

/// Left fold of [`apply_application`]; stops at the first failure.
pub fn apply_plan(net: &ConcreteNetwork, plan: &ObfuscationPlan) -> Result<ConcreteNetwork, PlanError> {
    let mut cur = net.clone();
    for (i, app) in plan.applications.iter().enumerate() {
        cur = apply_application(&cur, app).map_err(|source| PlanError {
            position: i + 1,
            kind: app.kind(),
            source,
        })?;
    }
    Ok(cur)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    pub max_abs_diff: f64,
    pub pass: bool,
    pub samples: usize,
}

/// Runs both networks on `n` seeded standard-normal inputs. Passes when
/// every logit differs by at most `tol`.
pub fn check_function_preserving(
    f: &ConcreteNetwork,
    g: &ConcreteNetwork,
    n: usize,
    seed: u64,
    tol: f64,
) -> Result<EquivalenceReport, NetworkError> {
    if f.input_shape() != g.input_shape() {
        return Err(NetworkError::InputShape {
            got: g.input_shape(),
            want: f.input_shape(),
        });
    }
    let [c, h, w] = f.input_shape();
    let x = Tensor::standard_normal([n, c, h, w], &mut ChaCha8Rng::seed_from_u64(seed));
    let (yf, yg) = (forward(f, &x)?, forward(g, &x)?);
    let max_abs_diff = yf
        .max_abs_diff(&yg)
        .map_err(|e| NetworkError::Tensor { layer: "classifier".into(), source: e })?;
    Ok(EquivalenceReport {
        max_abs_diff,
        pass: max_abs_diff <= tol,
        samples: n,
    })
}
