use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Evaluator, SearchError};
use crate::network::Skeleton;
use crate::transforms::{apply_structure, candidates, ObfuscationPlan, StrategyApplication, StrategyKind};

/// Retries before [`mutate`] gives up and returns the parent.
const MUTATION_ATTEMPTS: usize = 8;

/// A uniformly chosen kind, then a uniformly chosen valid application of it.
/// Kinds with no valid application are dropped and the draw repeats.
pub fn random_application(
    skel: &Skeleton,
    strategies: &[StrategyKind],
    rng: &mut ChaCha8Rng,
) -> Result<StrategyApplication, SearchError> {
    if strategies.is_empty() {
        return Err(SearchError::Config("strategy set is empty".into()));
    }
    let mut kinds = strategies.to_vec();
    while !kinds.is_empty() {
        let i = rng.random_range(0..kinds.len());
        let mut cands = candidates(skel, kinds[i]);
        cands.shuffle(rng);
        if let Some(app) = cands.into_iter().find(|a| apply_structure(skel, a).is_ok()) {
            return Ok(app.with_seed(rng.random()));
        }
        kinds.swap_remove(i);
    }
    Err(SearchError::Saturated {
        kinds: strategies.iter().map(|k| k.name()).collect::<Vec<_>>().join(","),
    })
}

/// Up to `max_len` applications drawn one after another; stops early when
/// the graph saturates.
pub fn random_plan(
    victim: &Skeleton,
    strategies: &[StrategyKind],
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ObfuscationPlan, SearchError> {
    let len = rng.random_range(0..=max_len);
    let mut skel = victim.clone();
    let mut apps = Vec::with_capacity(len);
    for _ in 0..len {
        let app = match random_application(&skel, strategies, rng) {
            Ok(a) => a,
            Err(SearchError::Saturated { .. }) => break,
            Err(e) => return Err(e),
        };
        skel = apply_structure(&skel, &app).expect("sampled applications are valid");
        apps.push(app);
    }
    Ok(ObfuscationPlan::new(apps))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Append,
    Delete,
    Resample,
}

/// Appends, deletes, or resamples one application (chosen uniformly among
/// the moves the plan allows). Invalid mutants are redrawn; after a bounded
/// number of failures the parent comes back unchanged.
pub fn mutate(
    plan: &ObfuscationPlan,
    evaluator: &Evaluator,
    strategies: &[StrategyKind],
    max_len: usize,
    rng: &mut ChaCha8Rng,
) -> ObfuscationPlan {
    let mut ops = Vec::with_capacity(3);
    if plan.len() < max_len {
        ops.push(Op::Append);
    }
    if !plan.is_empty() {
        ops.extend([Op::Delete, Op::Resample]);
    }
    for _ in 0..MUTATION_ATTEMPTS {
        let Some(&op) = ops.choose(rng) else {
            break;
        };
        let mut apps = plan.applications.clone();
        let ok = match op {
            Op::Append => prefix_skeleton(evaluator, &apps)
                .and_then(|s| random_application(&s, strategies, rng).ok())
                .map(|a| apps.push(a))
                .is_some(),
            Op::Delete => {
                apps.remove(rng.random_range(0..apps.len()));
                true
            }
            Op::Resample => {
                let i = rng.random_range(0..apps.len());
                prefix_skeleton(evaluator, &apps[..i])
                    .and_then(|s| random_application(&s, &[apps[i].kind()], rng).ok())
                    .map(|a| apps[i] = a)
                    .is_some()
            }
        };
        let child = ObfuscationPlan::new(apps);
        if ok && evaluator.evaluate(&child).is_some() {
            return child;
        }
    }
    plan.clone()
}

fn prefix_skeleton(evaluator: &Evaluator, apps: &[StrategyApplication]) -> Option<Skeleton> {
    evaluator
        .evaluate(&ObfuscationPlan::new(apps.to_vec()))
        .map(|e| e.skeleton.clone())
}
