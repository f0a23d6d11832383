use std::collections::HashSet;

use rayon::prelude::*;

use super::{thread_pool, verify_plan, SearchError, SearchReport, Tau, REPORT_SCHEMA};
use crate::arch::{canonical_hash, ArchHash};
use crate::flops::flops_of_skeleton;
use crate::network::{ConcreteNetwork, Skeleton};
use crate::oracle::{fitness_of, FitnessOracle};
use crate::transforms::{apply_structure, candidates, ObfuscationPlan, StrategyKind};

pub const DEFAULT_BUDGET: usize = 100_000;

/// Parents expanded between budget checks.
const PARENT_CHUNK: usize = 64;

fn expand(
    plan: &ObfuscationPlan,
    skel: &Skeleton,
    strategies: &[StrategyKind],
) -> Vec<(ObfuscationPlan, Skeleton, ArchHash)> {
    strategies
        .iter()
        .flat_map(|&k| candidates(skel, k))
        .filter_map(|app| {
            let s = apply_structure(skel, &app).ok()?;
            let h = canonical_hash(&s.architecture()).expect("rewrites keep validity");
            let mut p = plan.clone();
            p.applications.push(app);
            Some((p, s, h))
        })
        .collect()
}

/// Every distinct mask reachable within `max_plan_length` applications, in
/// breadth-first order, each with the first plan that reached it.
pub fn reachable_masks(
    victim: &Skeleton,
    strategies: &[StrategyKind],
    max_plan_length: usize,
    budget: usize,
) -> Result<Vec<(ObfuscationPlan, Skeleton)>, SearchError> {
    let root_hash = canonical_hash(&victim.architecture()).expect("victims are valid");
    let mut seen = HashSet::from([root_hash]);
    let mut out = vec![(ObfuscationPlan::default(), victim.clone())];
    let mut frontier = 0..1;
    let pool = thread_pool();
    for _ in 0..max_plan_length {
        let start = out.len();
        for chunk in frontier.clone().collect::<Vec<_>>().chunks(PARENT_CHUNK) {
            let parents = &out[chunk[0]..=chunk[chunk.len() - 1]];
            let children: Vec<Vec<(ObfuscationPlan, Skeleton, ArchHash)>> =
                pool.install(|| parents.par_iter().map(|(plan, skel)| expand(plan, skel, strategies)).collect());
            for (plan, skel, hash) in children.into_iter().flatten() {
                if seen.insert(hash) {
                    if seen.len() > budget {
                        return Err(SearchError::BudgetExceeded { count: seen.len(), budget });
                    }
                    out.push((plan, skel));
                }
            }
        }
        frontier = start..out.len();
    }
    Ok(out)
}

/// Exact constrained optimum over all distinct reachable masks. Ties go to
/// the mask found first (shortest plan).
pub fn brute_force_search(
    victim: &ConcreteNetwork,
    oracle: &FitnessOracle,
    tau: Tau,
    strategies: &[StrategyKind],
    max_plan_length: usize,
    budget: usize,
) -> Result<SearchReport, SearchError> {
    if strategies.is_empty() {
        return Err(SearchError::Config("strategy set is empty".into()));
    }
    let victim_accuracy = oracle.query(&victim.architecture())?;
    let flops_victim = flops_of_skeleton(victim.skeleton());
    let tau = tau.resolve(flops_victim);
    let masks = reachable_masks(victim.skeleton(), strategies, max_plan_length, budget)?;
    let mut best: Option<(usize, f64, u64)> = None;
    let mut min_flops: Option<u64> = None;
    for (i, (_, skel)) in masks.iter().enumerate() {
        let flops = flops_of_skeleton(skel).value();
        min_flops = Some(min_flops.map_or(flops, |m| m.min(flops)));
        if flops as f64 >= tau {
            continue;
        }
        let Ok(acc) = oracle.query(&skel.architecture()) else {
            continue;
        };
        if best.is_none_or(|(_, f, _)| fitness_of(acc) > f) {
            best = Some((i, fitness_of(acc), flops));
        }
    }
    let Some((i, best_fitness, flops_mask)) = best else {
        return Err(SearchError::Infeasible { tau, min_flops });
    };
    let (plan, skel) = &masks[i];
    let max_abs_diff = verify_plan(victim, plan, 100, 0)?;
    Ok(SearchReport {
        schema: REPORT_SCHEMA,
        seed: 0,
        best_plan: plan.clone(),
        best_arch_hash: canonical_hash(&skel.architecture()).expect("masks are valid"),
        best_fitness,
        victim_accuracy,
        mask_accuracy: -best_fitness,
        flops_victim: flops_victim.value(),
        flops_mask,
        tau,
        evaluations: masks.len(),
        max_abs_diff,
        history: Vec::new(),
    })
}
