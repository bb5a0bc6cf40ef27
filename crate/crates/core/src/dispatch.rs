//! Sequence dispatching across pipelines.
//!
//! Stage one of the two-stage assignment: spread a mini-batch's sequences
//! over a strategy's pipelines so the slowest pipeline's load bound is
//! minimized. Each pipeline's load is scored by the packing lower bound
//! `sum T(l_i, P) + T(max l_i, P) * (PP(P) - 1)`, which the within-pipeline
//! packing optimum can never beat.
//!
//! Two solvers share that objective: an exact minimax branch-and-bound for
//! small instances and oracle duty, and a multi-trial randomized greedy that
//! scales to production mini-batches. A sequence may only go to pipelines
//! whose `MaxLen` covers it (its feasibility horizon).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{CostError, CostProfile};
use crate::scheme::{ParallelScheme, Strategy};
use crate::seed;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("sequence {index} of length {length} exceeds every pipeline's MaxLen (largest is {largest})")]
    NoFeasiblePipeline { index: usize, length: u64, largest: u64 },
    #[error("strategy has no pipelines")]
    EmptyStrategy,
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}

/// An assignment of sequences to pipelines.
///
/// `assignment[i]` indexes the strategy's canonical pipeline expansion.
/// `per_pipeline_bound[j]` is the packing lower bound of pipeline j's
/// assigned set, recomputable from scratch; `objective` is their maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchPlan {
    pub assignment: Vec<usize>,
    pub per_pipeline_bound: Vec<f64>,
    pub objective: f64,
    /// False when the exact solver ran out of node budget and returned its
    /// incumbent, or when the plan came from the greedy solver.
    pub proved_optimal: bool,
}

impl DispatchPlan {
    pub fn assigned_lengths(&self, lengths: &[u64], pipeline: usize) -> Vec<u64> {
        self.assignment
            .iter()
            .zip(lengths)
            .filter(|(j, _)| **j == pipeline)
            .map(|(_, l)| *l)
            .collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DispatchOptions {
    /// Mini-batch size limit for the exact solver.
    pub exact_limit: usize,
    /// Branch-and-bound node budget before settling for the incumbent.
    pub node_budget: u64,
    pub trials: u32,
    pub seed: u64,
}

impl Default for DispatchOptions {
    fn default() -> Self {
        Self { exact_limit: 24, node_budget: 5_000_000, trials: 100, seed: 0 }
    }
}

/// Number of pipelines (prefix of the descending-MaxLen order) that can hold
/// a sequence of `length`: the largest J with `max_lens_desc[J-1] >= length`.
pub fn feasibility_horizon(length: u64, max_lens_desc: &[u64]) -> Option<usize> {
    let j = max_lens_desc.partition_point(|ml| *ml >= length);
    if j == 0 {
        None
    } else {
        Some(j)
    }
}

/// The Eq-shaped bound `sum + t_max * drain`, compiled exactly once so the
/// solvers, the plan finishers, and the validators agree bit-for-bit (the
/// toolchain is free to contract the multiply-add per call site otherwise).
#[inline(never)]
fn drain_bound(sum: f64, t_max: f64, drain: f64) -> f64 {
    sum + t_max * drain
}

/// Packing lower bound of one pipeline's assigned set:
/// `sum T(l_i) + T(max l_i) * (pp - 1)`; an empty set costs nothing.
pub fn lower_bound(
    assigned_lengths: &[u64],
    scheme: ParallelScheme,
    profile: &CostProfile,
) -> Result<f64, CostError> {
    if assigned_lengths.is_empty() {
        return Ok(0.0);
    }
    let mut sum = 0f64;
    let mut max_len = 0u64;
    for &l in assigned_lengths {
        sum += profile.latency(l, scheme)?;
        max_len = max_len.max(l);
    }
    Ok(drain_bound(
        sum,
        profile.latency(max_len, scheme)?,
        f64::from(scheme.pp) - 1.0,
    ))
}

/// Pipeline view used by both solvers: canonical index order preserved,
/// plus the descending-MaxLen permutation that feasibility horizons and
/// Alg-style placement loops run over.
struct Pipelines {
    schemes: Vec<ParallelScheme>,
    max_lens: Vec<u64>,
    /// canonical pipeline indices sorted by descending MaxLen
    by_capacity: Vec<usize>,
}

impl Pipelines {
    fn build(strategy: &Strategy, profile: &CostProfile) -> Result<Self, DispatchError> {
        let schemes = strategy.expand();
        if schemes.is_empty() {
            return Err(DispatchError::EmptyStrategy);
        }
        let mut max_lens = Vec::with_capacity(schemes.len());
        for s in &schemes {
            profile.coeffs(*s)?;
            max_lens.push(profile.max_len(*s).unwrap_or(0));
        }
        let mut by_capacity: Vec<usize> = (0..schemes.len()).collect();
        by_capacity.sort_by(|a, b| max_lens[*b].cmp(&max_lens[*a]).then(a.cmp(b)));
        Ok(Self { schemes, max_lens, by_capacity })
    }

    fn sorted_max_lens(&self) -> Vec<u64> {
        self.by_capacity.iter().map(|&j| self.max_lens[j]).collect()
    }

    /// Horizons in the sorted view for every sequence, or the infeasibility.
    fn horizons(&self, lengths: &[u64]) -> Result<Vec<usize>, DispatchError> {
        let sorted = self.sorted_max_lens();
        lengths
            .iter()
            .enumerate()
            .map(|(index, &length)| {
                feasibility_horizon(length, &sorted).ok_or(
                    DispatchError::NoFeasiblePipeline {
                        index,
                        length,
                        largest: sorted[0],
                    },
                )
            })
            .collect()
    }
}

/// Rebuild bounds canonically from an assignment in sorted-view indices and
/// produce the final plan in canonical pipeline indices.
fn finish_plan(
    lengths: &[u64],
    pipes: &Pipelines,
    sorted_assignment: &[usize],
    profile: &CostProfile,
    proved_optimal: bool,
) -> DispatchPlan {
    let d = pipes.schemes.len();
    let assignment: Vec<usize> =
        sorted_assignment.iter().map(|&sj| pipes.by_capacity[sj]).collect();
    let mut per_pipeline_bound = vec![0f64; d];
    for j in 0..d {
        let assigned: Vec<u64> = assignment
            .iter()
            .zip(lengths)
            .filter(|(p, _)| **p == j)
            .map(|(_, l)| *l)
            .collect();
        per_pipeline_bound[j] =
            lower_bound(&assigned, pipes.schemes[j], profile).expect("validated scheme");
    }
    let objective = per_pipeline_bound.iter().copied().fold(0.0, f64::max);
    DispatchPlan { assignment, per_pipeline_bound, objective, proved_optimal }
}

/// Exact minimax dispatch by branch-and-bound.
///
/// Branches sequences in descending length order over their feasible
/// pipelines, pruning on the incumbent objective (per-pipeline bounds only
/// grow as sequences are added) and collapsing empty pipelines of identical
/// schemes. The greedy solver's single deterministic pass seeds the
/// incumbent. If the node budget runs out the best incumbent is returned
/// with `proved_optimal` cleared.
pub fn dispatch_exact(
    lengths: &[u64],
    strategy: &Strategy,
    profile: &CostProfile,
    opts: &DispatchOptions,
) -> Result<DispatchPlan, DispatchError> {
    if lengths.is_empty() {
        return Err(DispatchError::InvalidParam("empty mini-batch".into()));
    }
    if lengths.len() > opts.exact_limit {
        return Err(DispatchError::InvalidParam(format!(
            "exact dispatch limited to {} sequences, got {}",
            opts.exact_limit,
            lengths.len()
        )));
    }
    let pipes = Pipelines::build(strategy, profile)?;
    let horizons = pipes.horizons(lengths)?;
    let d = pipes.schemes.len();

    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.sort_by(|a, b| lengths[*b].cmp(&lengths[*a]).then(a.cmp(b)));

    // T(l, P) per (sequence, sorted pipeline), plus pp-1 factors.
    let times: Vec<Vec<f64>> = (0..lengths.len())
        .map(|i| {
            (0..d)
                .map(|sj| {
                    profile
                        .latency(lengths[i], pipes.schemes[pipes.by_capacity[sj]])
                        .expect("validated scheme")
                })
                .collect()
        })
        .collect();
    let drain: Vec<f64> = (0..d)
        .map(|sj| f64::from(pipes.schemes[pipes.by_capacity[sj]].pp) - 1.0)
        .collect();

    // Greedy incumbent: single pass in descending length order.
    let seed_assignment = greedy_pass(&order, &horizons, &times, &drain, d);
    let mut best_assignment = seed_assignment.clone();
    let mut best_obj = objective_of(&seed_assignment, &times, &drain, d);

    struct Search<'a> {
        times: &'a [Vec<f64>],
        drain: &'a [f64],
        horizons: &'a [usize],
        order: &'a [usize],
        /// Equal-length sequences are interchangeable: a later duplicate may
        /// not take an earlier pipeline than its predecessor.
        duplicate_of_prev: Vec<bool>,
        /// Suffix sums of each remaining sequence's cheapest feasible
        /// placement cost: the final objective is at least the average
        /// pipeline load, so `(placed + remaining) / D` prunes balanced
        /// near-tie plateaus the current-max bound cannot cut.
        rem_min: Vec<f64>,
        d_inv: f64,
        schemes_sorted: Vec<ParallelScheme>,
        nodes_left: u64,
        exhausted: bool,
    }
    struct PipeState {
        cost: f64,
        max_time: f64, // T(longest length assigned)
        count: usize,
    }

    // Incremental sums along a path and the canonical ascending-index
    // resummation can drift by ulps; prune only past the margin and score
    // complete assignments canonically so the reported objective matches
    // independent recomputation bit-for-bit.
    const PRUNE_MARGIN: f64 = 1.0 + 1e-12;

    #[allow(clippy::too_many_arguments)]
    fn dfs(
        s: &mut Search,
        pos: usize,
        min_pipe: usize,
        states: &mut Vec<PipeState>,
        placed_cost: f64,
        cur_obj: f64,
        assignment: &mut Vec<usize>,
        best_obj: &mut f64,
        best_assignment: &mut Vec<usize>,
    ) {
        if cur_obj > *best_obj * PRUNE_MARGIN {
            return;
        }
        if pos == s.order.len() {
            let obj = objective_of(assignment, s.times, s.drain, s.drain.len());
            if obj < *best_obj {
                *best_obj = obj;
                *best_assignment = assignment.clone();
            }
            return;
        }
        if (placed_cost + s.rem_min[pos]) * s.d_inv > *best_obj * PRUNE_MARGIN {
            return;
        }
        if s.nodes_left == 0 {
            s.exhausted = true;
            return;
        }
        s.nodes_left -= 1;
        let i = s.order[pos];
        let start = if s.duplicate_of_prev[pos] { min_pipe } else { 0 };
        for sj in start..s.horizons[i] {
            // Identical empty pipelines are interchangeable.
            if states[sj].count == 0
                && (0..sj).any(|k| {
                    states[k].count == 0 && s.schemes_sorted[k] == s.schemes_sorted[sj]
                })
            {
                continue;
            }
            let t = s.times[i][sj];
            let new_max_time = states[sj].max_time.max(t);
            let new_bound = drain_bound(states[sj].cost + t, new_max_time, s.drain[sj]);
            let new_obj = cur_obj.max(new_bound);
            if new_obj > *best_obj * PRUNE_MARGIN {
                continue;
            }
            let saved = (states[sj].cost, states[sj].max_time, states[sj].count);
            states[sj].cost += t;
            states[sj].max_time = new_max_time;
            states[sj].count += 1;
            assignment[i] = sj;
            dfs(
                s,
                pos + 1,
                sj,
                states,
                placed_cost + t,
                new_obj,
                assignment,
                best_obj,
                best_assignment,
            );
            states[sj] = PipeState { cost: saved.0, max_time: saved.1, count: saved.2 };
            if s.exhausted {
                return;
            }
        }
    }

    let duplicate_of_prev: Vec<bool> = order
        .iter()
        .enumerate()
        .map(|(pos, &i)| pos > 0 && lengths[order[pos - 1]] == lengths[i])
        .collect();
    let mut rem_min = vec![0f64; order.len() + 1];
    for pos in (0..order.len()).rev() {
        let i = order[pos];
        let cheapest =
            (0..horizons[i]).map(|sj| times[i][sj]).fold(f64::INFINITY, f64::min);
        rem_min[pos] = rem_min[pos + 1] + cheapest;
    }
    let mut search = Search {
        times: &times,
        drain: &drain,
        horizons: &horizons,
        order: &order,
        duplicate_of_prev,
        rem_min,
        d_inv: 1.0 / d as f64,
        schemes_sorted: pipes.by_capacity.iter().map(|&j| pipes.schemes[j]).collect(),
        nodes_left: opts.node_budget,
        exhausted: false,
    };
    let mut states: Vec<PipeState> = (0..d)
        .map(|_| PipeState { cost: 0.0, max_time: 0.0, count: 0 })
        .collect();
    let mut assignment = seed_assignment;
    dfs(
        &mut search,
        0,
        0,
        &mut states,
        0.0,
        0.0,
        &mut assignment,
        &mut best_obj,
        &mut best_assignment,
    );

    Ok(finish_plan(lengths, &pipes, &best_assignment, profile, !search.exhausted))
}

/// One deterministic greedy placement pass over `order`; used to seed the
/// exact search and as the core of each randomized trial.
fn greedy_pass(
    order: &[usize],
    horizons: &[usize],
    times: &[Vec<f64>],
    drain: &[f64],
    d: usize,
) -> Vec<usize> {
    let mut cost = vec![0f64; d];
    let mut max_time = vec![0f64; d];
    let mut bound = vec![0f64; d];
    let mut assignment = vec![0usize; times.len()];
    for &i in order {
        // Track the two largest current bounds so the max over k != j is O(1).
        let (mut top, mut top_j, mut second) = (f64::NEG_INFINITY, usize::MAX, f64::NEG_INFINITY);
        for (j, b) in bound.iter().enumerate() {
            if *b > top {
                second = top;
                top = *b;
                top_j = j;
            } else if *b > second {
                second = *b;
            }
        }
        let mut best_j = 0usize;
        let mut best_omax = f64::INFINITY;
        for j in 0..horizons[i] {
            let t = times[i][j];
            let new_bound = drain_bound(cost[j] + t, max_time[j].max(t), drain[j]);
            let others = if j == top_j { second } else { top };
            let omax = new_bound.max(others.max(0.0));
            // Ties go to the later pipeline: smaller MaxLen, cheaper scheme,
            // preserving long-sequence capacity.
            if omax <= best_omax {
                best_omax = omax;
                best_j = j;
            }
        }
        assignment[i] = best_j;
        cost[best_j] += times[i][best_j];
        max_time[best_j] = max_time[best_j].max(times[i][best_j]);
        bound[best_j] = drain_bound(cost[best_j], max_time[best_j], drain[best_j]);
    }
    assignment
}

fn objective_of(assignment: &[usize], times: &[Vec<f64>], drain: &[f64], d: usize) -> f64 {
    let mut cost = vec![0f64; d];
    let mut max_time = vec![0f64; d];
    for (i, &j) in assignment.iter().enumerate() {
        cost[j] += times[i][j];
        max_time[j] = max_time[j].max(times[i][j]);
    }
    (0..d).map(|j| drain_bound(cost[j], max_time[j], drain[j])).fold(0.0, f64::max)
}

/// Multi-trial randomized greedy dispatch.
///
/// Each trial shuffles the sequences with an independent stream derived from
/// the master seed and trial index, places them one at a time on the feasible
/// pipeline minimizing the global bound maximum, and the best trial by
/// objective (ties to the lowest trial index) wins. Deterministic for fixed
/// inputs and seed regardless of trial execution order.
pub fn dispatch_greedy(
    lengths: &[u64],
    strategy: &Strategy,
    profile: &CostProfile,
    opts: &DispatchOptions,
) -> Result<DispatchPlan, DispatchError> {
    if lengths.is_empty() {
        return Err(DispatchError::InvalidParam("empty mini-batch".into()));
    }
    if opts.trials == 0 {
        return Err(DispatchError::InvalidParam("trials must be >= 1".into()));
    }
    let pipes = Pipelines::build(strategy, profile)?;
    let horizons = pipes.horizons(lengths)?;
    let d = pipes.schemes.len();
    let times: Vec<Vec<f64>> = (0..lengths.len())
        .map(|i| {
            (0..d)
                .map(|sj| {
                    profile
                        .latency(lengths[i], pipes.schemes[pipes.by_capacity[sj]])
                        .expect("validated scheme")
                })
                .collect()
        })
        .collect();
    let drain: Vec<f64> = (0..d)
        .map(|sj| f64::from(pipes.schemes[pipes.by_capacity[sj]].pp) - 1.0)
        .collect();

    let run_trial = |trial: u32| -> (f64, Vec<usize>) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed::derive(opts.seed, "dispatch-trial", u64::from(trial)));
        let mut order: Vec<usize> = (0..lengths.len()).collect();
        order.shuffle(&mut rng);
        let assignment = greedy_pass(&order, &horizons, &times, &drain, d);
        (objective_of(&assignment, &times, &drain, d), assignment)
    };

    // Trials are independent; reduce by (objective, trial index).
    let best = if lengths.len() * d >= 4096 {
        use rayon::prelude::*;
        (0..opts.trials)
            .into_par_iter()
            .map(|t| (t, run_trial(t)))
            .min_by(|(ta, (oa, _)), (tb, (ob, _))| {
                oa.partial_cmp(ob).unwrap().then(ta.cmp(tb))
            })
    } else {
        (0..opts.trials)
            .map(|t| (t, run_trial(t)))
            .min_by(|(ta, (oa, _)), (tb, (ob, _))| {
                oa.partial_cmp(ob).unwrap().then(ta.cmp(tb))
            })
    };
    let (_, (_, assignment)) = best.expect("at least one trial");
    let proved = d == 1; // with one pipeline there is nothing to choose
    Ok(finish_plan(lengths, &pipes, &assignment, profile, proved))
}

/// Audit a plan against the raw inputs: one-hot assignment within horizons,
/// bounds that match recomputation exactly, objective equal to the max.
pub fn validate_plan(
    plan: &DispatchPlan,
    lengths: &[u64],
    strategy: &Strategy,
    profile: &CostProfile,
) -> Result<(), String> {
    let pipes = Pipelines::build(strategy, profile).map_err(|e| e.to_string())?;
    let d = pipes.schemes.len();
    if plan.assignment.len() != lengths.len() {
        return Err("assignment length mismatch".into());
    }
    if plan.per_pipeline_bound.len() != d {
        return Err("bound vector length mismatch".into());
    }
    for (i, &j) in plan.assignment.iter().enumerate() {
        if j >= d {
            return Err(format!("sequence {i} assigned to pipeline {j} of {d}"));
        }
        if lengths[i] > pipes.max_lens[j] {
            return Err(format!(
                "sequence {i} (len {}) exceeds MaxLen of pipeline {j} ({})",
                lengths[i], pipes.max_lens[j]
            ));
        }
    }
    for j in 0..d {
        let assigned = plan.assigned_lengths(lengths, j);
        let fresh =
            lower_bound(&assigned, pipes.schemes[j], profile).map_err(|e| e.to_string())?;
        if fresh != plan.per_pipeline_bound[j] {
            return Err(format!(
                "pipeline {j} bound {} != recomputed {fresh}",
                plan.per_pipeline_bound[j]
            ));
        }
    }
    let objective = plan.per_pipeline_bound.iter().copied().fold(0.0, f64::max);
    if objective != plan.objective {
        return Err(format!("objective {} != recomputed {objective}", plan.objective));
    }
    Ok(())
}
