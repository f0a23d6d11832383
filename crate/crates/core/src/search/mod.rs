//! FLOPs-constrained search over obfuscation plans: aging-tournament
//! evolution plus an exhaustive reference searcher for small spaces.
//!
//! Plans are evaluated structurally (no weights), memoized by their unseeded
//! form. Only the reported best plan is instantiated with weights and checked
//! for function preservation.

mod brute;
mod evolve;
mod sampler;

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use serde::Serialize;
use thiserror::Error;

use crate::arch::{canonical_hash, ArchHash};
use crate::flops::{flops_of_skeleton, FlopsCount};
use crate::network::{ConcreteNetwork, NetworkError, Skeleton};
use crate::oracle::{FitnessOracle, OracleError};
use crate::transforms::{
    apply_plan, apply_structure, check_function_preserving, ObfuscationPlan, PlanError, StrategyKind,
};

pub use brute::{brute_force_search, reachable_masks, DEFAULT_BUDGET};
pub use evolve::{evolve, evolve_with};
pub use sampler::{mutate, random_application, random_plan};

pub const REPORT_SCHEMA: &str = "obfunas-search-report/v1";

/// Environment variable capping the evaluation thread count (0 = automatic).
pub const THREADS_ENV: &str = "OBFUNAS_THREADS";

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("invalid search configuration: {0}")]
    Config(String),
    #[error("no valid application of {kinds} exists")]
    Saturated { kinds: String },
    #[error("no feasible mask: tau = {tau} FLOPs, smallest observed = {}", min_flops.map_or("none".to_string(), |f| f.to_string()))]
    Infeasible { tau: f64, min_flops: Option<u64> },
    #[error("search space exceeds the budget of {budget} masks ({count} reached)")]
    BudgetExceeded { count: usize, budget: usize },
    #[error("mask is not function-preserving: max abs diff {max_abs_diff}")]
    NotPreserving { max_abs_diff: f64 },
    #[error("victim accuracy: {0}")]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// FLOPs bound; feasible masks have strictly fewer FLOPs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Tau {
    Absolute(u64),
    /// Multiple of the victim's FLOPs.
    Multiplier(f64),
}

impl Tau {
    pub fn resolve(self, victim: FlopsCount) -> f64 {
        match self {
            Tau::Absolute(v) => v as f64,
            Tau::Multiplier(m) => m * victim.value() as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub population_size: usize,
    pub cycles: usize,
    pub tournament_size: usize,
    pub seed: u64,
    pub tau: Tau,
    pub strategies: Vec<StrategyKind>,
    pub max_plan_length: usize,
    /// Check every feasible individual for function preservation.
    pub verify_masks: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            population_size: 32,
            cycles: 2000,
            tournament_size: 4,
            seed: 0,
            tau: Tau::Multiplier(1.15),
            strategies: StrategyKind::ALL.to_vec(),
            max_plan_length: 4,
            verify_masks: false,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        let bad = |m: &str| Err(SearchError::Config(m.to_string()));
        if self.population_size == 0 {
            return bad("population size must be positive");
        }
        if self.cycles == 0 {
            return bad("cycle count must be positive");
        }
        if self.tournament_size < 2 || self.tournament_size > self.population_size {
            return bad("tournament size must lie in [2, population size]");
        }
        if self.strategies.is_empty() {
            return bad("strategy set is empty");
        }
        if self.max_plan_length == 0 {
            return bad("maximum plan length must be positive");
        }
        if let Tau::Multiplier(m) = self.tau {
            if !m.is_finite() || m <= 0.0 {
                return bad("tau multiplier must be positive and finite");
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HistoryRow {
    pub cycle: usize,
    pub best_fitness: f64,
    /// Evaluations requested so far, memoized ones included.
    pub evaluations: usize,
    /// Share of this cycle's children that were feasible.
    pub feasible_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SearchReport {
    pub schema: &'static str,
    pub seed: u64,
    pub best_plan: ObfuscationPlan,
    pub best_arch_hash: ArchHash,
    pub best_fitness: f64,
    pub victim_accuracy: f64,
    pub mask_accuracy: f64,
    pub flops_victim: u64,
    pub flops_mask: u64,
    pub tau: f64,
    pub evaluations: usize,
    /// Largest logit difference between victim and mask on the final check.
    pub max_abs_diff: f64,
    #[serde(skip)]
    pub history: Vec<HistoryRow>,
}

impl SearchReport {
    /// Indented JSON with sorted keys.
    pub fn to_json(&self) -> String {
        let v = serde_json::to_value(self).expect("reports serialize");
        serde_json::to_string_pretty(&v).expect("json value serializes")
    }

    pub fn history_csv(&self) -> String {
        let mut out = String::from("cycle,best_fitness,evaluations,feasible_fraction\n");
        for r in &self.history {
            out.push_str(&format!("{},{},{},{}\n", r.cycle, r.best_fitness, r.evaluations, r.feasible_fraction));
        }
        out
    }
}

/// Structural outcome of a plan on the victim.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub skeleton: Skeleton,
    pub hash: ArchHash,
    pub flops: FlopsCount,
    /// `None` when the oracle does not know the mask.
    pub accuracy: Option<f64>,
}

impl Evaluation {
    pub fn fitness(&self) -> Option<f64> {
        self.accuracy.map(crate::oracle::fitness_of)
    }
}

/// Memoized plan evaluation against one victim and oracle. Plans are keyed
/// by their unseeded form; seeds only affect weights. Safe to share across
/// searches and threads.
pub struct Evaluator<'a> {
    victim: Skeleton,
    oracle: &'a FitnessOracle,
    memo: Mutex<HashMap<ObfuscationPlan, Option<Arc<Evaluation>>>>,
}

impl<'a> Evaluator<'a> {
    pub fn new(victim: &Skeleton, oracle: &'a FitnessOracle) -> Self {
        Evaluator {
            victim: victim.clone(),
            oracle,
            memo: Mutex::new(HashMap::new()),
        }
    }

    pub fn victim(&self) -> &Skeleton {
        &self.victim
    }

    pub fn oracle(&self) -> &FitnessOracle {
        self.oracle
    }

    fn measure(&self, skeleton: Skeleton) -> Evaluation {
        let arch = skeleton.architecture();
        let hash = canonical_hash(&arch).expect("rewrites keep architectures valid");
        let flops = flops_of_skeleton(&skeleton);
        let accuracy = self.oracle.query(&arch).ok();
        Evaluation { skeleton, hash, flops, accuracy }
    }

    /// `None` when some application of the plan is invalid.
    pub fn evaluate(&self, plan: &ObfuscationPlan) -> Option<Arc<Evaluation>> {
        let key = plan.unseeded();
        if let Some(hit) = self.memo.lock().expect("memo lock").get(&key) {
            return hit.clone();
        }
        let result = match key.applications.split_last() {
            None => Some(Arc::new(self.measure(self.victim.clone()))),
            Some((last, prefix)) => self
                .evaluate(&ObfuscationPlan::new(prefix.to_vec()))
                .and_then(|p| apply_structure(&p.skeleton, last).ok())
                .map(|s| Arc::new(self.measure(s))),
        };
        self.memo.lock().expect("memo lock").insert(key, result.clone());
        result
    }

    pub fn memo_len(&self) -> usize {
        self.memo.lock().expect("memo lock").len()
    }
}

/// Instantiates the plan on the victim's weights and compares logits
/// bit-exactly on `samples` inputs.
pub fn verify_plan(
    victim: &ConcreteNetwork,
    plan: &ObfuscationPlan,
    samples: usize,
    seed: u64,
) -> Result<f64, SearchError> {
    let mask = apply_plan(victim, plan)?;
    let r = check_function_preserving(victim, &mask, samples, seed, 0.0)?;
    if !r.pass {
        return Err(SearchError::NotPreserving { max_abs_diff: r.max_abs_diff });
    }
    Ok(r.max_abs_diff)
}

/// Thread pool honoring [`THREADS_ENV`].
pub fn thread_pool() -> rayon::ThreadPool {
    let n = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .unwrap_or(0);
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .expect("thread pool builds")
}

fn is_feasible(e: &Evaluation, tau: f64) -> bool {
    (e.flops.value() as f64) < tau && e.accuracy.is_some()
}
