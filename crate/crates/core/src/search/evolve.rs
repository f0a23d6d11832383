use std::collections::VecDeque;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{
    is_feasible, mutate, random_plan, thread_pool, verify_plan, Evaluator, HistoryRow,
    SearchConfig, SearchError, SearchReport, REPORT_SCHEMA,
};
use crate::network::ConcreteNetwork;
use crate::oracle::{fitness_of, FitnessOracle};
use crate::transforms::ObfuscationPlan;

/// Draws allowed per population slot while seeding.
const SEED_ATTEMPTS: usize = 64;
/// Child retries per cycle before the parent is re-inserted.
const CHILD_ATTEMPTS: usize = 16;
/// Samples per individual when `verify_masks` is set.
const DEBUG_SAMPLES: usize = 4;

struct Individual {
    plan: ObfuscationPlan,
    fitness: f64,
}

/// Regularized evolution. Deterministic for a given seed regardless of
/// thread count.
pub fn evolve(
    victim: &ConcreteNetwork,
    oracle: &FitnessOracle,
    config: &SearchConfig,
) -> Result<SearchReport, SearchError> {
    let evaluator = Evaluator::new(victim.skeleton(), oracle);
    evolve_with(&evaluator, victim, config)
}

/// [`evolve`] with a caller-owned memo, so repeated searches over the same
/// victim and oracle share evaluations.
pub fn evolve_with(
    evaluator: &Evaluator,
    victim: &ConcreteNetwork,
    config: &SearchConfig,
) -> Result<SearchReport, SearchError> {
    config.validate()?;
    let victim_eval = evaluator.evaluate(&ObfuscationPlan::default()).expect("empty plan is valid");
    let victim_accuracy = evaluator.oracle().query(&victim.architecture())?;
    let tau = config.tau.resolve(victim_eval.flops);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut evaluations = 0usize;
    let verify = |plan: &ObfuscationPlan| -> Result<(), SearchError> {
        if config.verify_masks {
            verify_plan(victim, plan, DEBUG_SAMPLES, config.seed)?;
        }
        Ok(())
    };

    let p = config.population_size;
    let mut population: VecDeque<Individual> = VecDeque::with_capacity(p);
    let mut min_flops: Option<u64> = None;
    let mut drawn = 0;
    let pool = thread_pool();
    while population.len() < p && drawn < p * SEED_ATTEMPTS {
        let want = (p - population.len()).min(p * SEED_ATTEMPTS - drawn);
        let plans = (0..want)
            .map(|_| random_plan(evaluator.victim(), &config.strategies, config.max_plan_length, &mut rng))
            .collect::<Result<Vec<_>, _>>()?;
        drawn += want;
        evaluations += want;
        let evals: Vec<_> = pool.install(|| plans.par_iter().map(|pl| evaluator.evaluate(pl)).collect());
        for (plan, e) in plans.into_iter().zip(evals) {
            let e = e.expect("sampled plans are valid");
            min_flops = Some(min_flops.map_or(e.flops.value(), |m| m.min(e.flops.value())));
            if is_feasible(&e, tau) && population.len() < p {
                verify(&plan)?;
                population.push_back(Individual { fitness: e.fitness().unwrap(), plan });
            }
        }
    }
    if population.len() < p {
        return Err(SearchError::Infeasible { tau, min_flops });
    }

    let mut best = population
        .iter()
        .fold(None::<&Individual>, |b, i| match b {
            Some(b) if b.fitness >= i.fitness => Some(b),
            _ => Some(i),
        })
        .map(|i| (i.plan.clone(), i.fitness))
        .expect("population is not empty");
    let mut history = Vec::with_capacity(config.cycles);
    for cycle in 1..=config.cycles {
        let picks = index::sample(&mut rng, p, config.tournament_size);
        let parent = picks
            .iter()
            .map(|i| &population[i])
            .fold(None::<&Individual>, |b, i| match b {
                Some(b) if b.fitness >= i.fitness => Some(b),
                _ => Some(i),
            })
            .expect("tournament is not empty")
            .plan
            .clone();
        let mut child = None;
        let mut tries = 0;
        while tries < CHILD_ATTEMPTS {
            tries += 1;
            let cand = mutate(&parent, evaluator, &config.strategies, config.max_plan_length, &mut rng);
            evaluations += 1;
            let e = evaluator.evaluate(&cand).expect("mutants are valid");
            if is_feasible(&e, tau) {
                child = Some(Individual { fitness: e.fitness().unwrap(), plan: cand });
                break;
            }
        }
        let feasible_fraction = if child.is_some() { 1.0 / tries as f64 } else { 0.0 };
        let next = match child {
            Some(c) => {
                verify(&c.plan)?;
                if c.fitness > best.1 {
                    best = (c.plan.clone(), c.fitness);
                }
                c
            }
            None => {
                let fitness = evaluator.evaluate(&parent).and_then(|e| e.fitness()).expect("parents are feasible");
                Individual { plan: parent, fitness }
            }
        };
        population.push_back(next);
        population.pop_front();
        history.push(HistoryRow {
            cycle,
            best_fitness: best.1,
            evaluations,
            feasible_fraction,
        });
    }

    let e = evaluator.evaluate(&best.0).expect("best plan is valid");
    let max_abs_diff = verify_plan(victim, &best.0, 100, config.seed)?;
    Ok(SearchReport {
        schema: REPORT_SCHEMA,
        seed: config.seed,
        best_arch_hash: e.hash,
        best_fitness: best.1,
        victim_accuracy,
        mask_accuracy: e.accuracy.expect("best mask is feasible"),
        flops_victim: victim_eval.flops.value(),
        flops_mask: e.flops.value(),
        tau,
        evaluations,
        max_abs_diff,
        history,
        best_plan: best.0,
    })
    .map(|r| {
        debug_assert_eq!(r.best_fitness, fitness_of(r.mask_accuracy));
        r
    })
}
