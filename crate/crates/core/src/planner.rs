//! Per-iteration strategy planning: dispatch, per-pipeline packing, latency
//! estimation, and selection over a candidate set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostProfile;
use crate::dispatch::{self, DispatchError, DispatchOptions, DispatchPlan};
use crate::packing::{self, PackError, PackingPlan};
use crate::scheme::{validate_strategy, Strategy};
use crate::workload::MiniBatch;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("strategy {strategy} cannot serve this mini-batch: {reason}")]
    Infeasible { strategy: String, reason: String },
    #[error("no candidate strategy can serve this mini-batch ({candidates} tried)")]
    AllInfeasible { candidates: usize },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlanOptions {
    pub seed: u64,
    pub trials: u32,
    /// Mini-batch size at or below which dispatch uses the exact solver.
    pub dispatch_exact_limit: usize,
    /// Pipeline count above which dispatch stays greedy regardless of size;
    /// the minimax search space grows as D^B.
    pub dispatch_exact_max_pipelines: usize,
    pub dispatch_node_budget: u64,
    /// Per-pipeline sequence count at or below which packing runs exact.
    pub pack_exact_cutover: usize,
    /// Score plans with idle pipelines as if their latency were spread over
    /// fewer GPUs, penalizing wasted hardware during selection.
    pub penalize_empty: bool,
}

impl Default for PlanOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 100,
            dispatch_exact_limit: 24,
            dispatch_exact_max_pipelines: 4,
            dispatch_node_budget: 5_000_000,
            pack_exact_cutover: packing::DEFAULT_EXACT_CUTOVER,
            penalize_empty: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PlanDiagnostics {
    pub per_pipeline_tokens: Vec<u64>,
    pub per_pipeline_sequences: Vec<usize>,
    pub per_pipeline_microbatches: Vec<usize>,
    pub empty_pipelines: Vec<usize>,
}

/// A fully planned (strategy, mini-batch) pairing: the dispatch, one packing
/// per nonempty pipeline, and the estimated propagation latency (max packing
/// objective across pipelines).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyPlan {
    pub strategy: Strategy,
    pub dispatch: DispatchPlan,
    /// Indexed like the strategy's pipeline expansion; `None` for pipelines
    /// that received no sequences.
    pub packings: Vec<Option<PackingPlan>>,
    pub estimated_latency: f64,
    pub diagnostics: PlanDiagnostics,
}

impl StrategyPlan {
    /// Selection score: estimated latency, optionally inflated for idle GPUs.
    pub fn score(&self, penalize_empty: bool) -> f64 {
        if !penalize_empty || self.diagnostics.empty_pipelines.is_empty() {
            return self.estimated_latency;
        }
        let schemes = self.strategy.expand();
        let total: u64 = schemes.iter().map(|s| s.gpus()).sum();
        let idle: u64 = self
            .diagnostics
            .empty_pipelines
            .iter()
            .map(|&j| schemes[j].gpus())
            .sum();
        self.estimated_latency * total as f64 / (total - idle).max(1) as f64
    }
}

/// Run the two-stage assignment for one candidate strategy.
///
/// Dispatch is exact at or below the size cutoff, greedy above it; each
/// nonempty pipeline's set is then packed (exact below the cutover). Fails
/// as infeasible when some sequence exceeds every pipeline's MaxLen, which
/// disqualifies the strategy for this mini-batch only.
pub fn plan_strategy(
    minibatch: &MiniBatch,
    strategy: &Strategy,
    profile: &CostProfile,
    opts: &PlanOptions,
) -> Result<StrategyPlan, PlanError> {
    let infeasible = |reason: String| PlanError::Infeasible {
        strategy: strategy.text(),
        reason,
    };
    let report = validate_strategy(strategy, profile.hardware.n_gpus);
    if !report.ok() {
        return Err(infeasible(report.violations.join("; ")));
    }
    let lengths = &minibatch.lengths;
    if lengths.is_empty() {
        return Err(PlanError::InvalidParam("empty mini-batch".into()));
    }

    let dopts = DispatchOptions {
        exact_limit: opts.dispatch_exact_limit,
        node_budget: opts.dispatch_node_budget,
        trials: opts.trials,
        seed: opts.seed,
    };
    let dispatch_result = if lengths.len() <= opts.dispatch_exact_limit
        && strategy.pipeline_count() <= opts.dispatch_exact_max_pipelines
    {
        dispatch::dispatch_exact(lengths, strategy, profile, &dopts)
    } else {
        dispatch::dispatch_greedy(lengths, strategy, profile, &dopts)
    };
    let dispatch = dispatch_result.map_err(|e| match e {
        DispatchError::NoFeasiblePipeline { .. } | DispatchError::EmptyStrategy => {
            infeasible(e.to_string())
        }
        other => PlanError::InvalidParam(other.to_string()),
    })?;

    let pipelines = strategy.expand();
    let mut packings = Vec::with_capacity(pipelines.len());
    let mut diagnostics = PlanDiagnostics::default();
    for (j, scheme) in pipelines.iter().enumerate() {
        let assigned = dispatch.assigned_lengths(lengths, j);
        diagnostics.per_pipeline_tokens.push(assigned.iter().sum());
        diagnostics.per_pipeline_sequences.push(assigned.len());
        if assigned.is_empty() {
            diagnostics.per_pipeline_microbatches.push(0);
            diagnostics.empty_pipelines.push(j);
            packings.push(None);
            continue;
        }
        let mode = packing::auto_mode(assigned.len(), opts.pack_exact_cutover);
        let plan = packing::pack(&assigned, *scheme, profile, mode).map_err(|e| match e {
            PackError::OversizedSequence { .. } | PackError::AllInfeasible { .. } => {
                infeasible(e.to_string())
            }
            other => PlanError::InvalidParam(other.to_string()),
        })?;
        diagnostics.per_pipeline_microbatches.push(plan.v);
        packings.push(Some(plan));
    }

    let estimated_latency = packings
        .iter()
        .flatten()
        .map(|p| p.objective)
        .fold(0.0, f64::max);
    debug_assert!(
        estimated_latency >= dispatch.objective - 1e-9 * dispatch.objective.abs(),
        "packing optimum {estimated_latency} fell below the dispatch bound {}",
        dispatch.objective
    );

    Ok(StrategyPlan {
        strategy: strategy.clone(),
        dispatch,
        packings,
        estimated_latency,
        diagnostics,
    })
}

/// Why a candidate was not selected, or its score if it was plannable.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateReport {
    pub strategy: Strategy,
    pub estimated_latency: Option<f64>,
    pub score: Option<f64>,
    pub infeasible_reason: Option<String>,
    pub empty_pipelines: usize,
}

/// Plan every candidate (in parallel) and select the feasible plan with the
/// lowest score; ties break toward fewer total GPUs, then strategy text.
pub fn select_strategy(
    minibatch: &MiniBatch,
    candidates: &[Strategy],
    profile: &CostProfile,
    opts: &PlanOptions,
) -> Result<(StrategyPlan, Vec<CandidateReport>), PlanError> {
    if candidates.is_empty() {
        return Err(PlanError::InvalidParam("no candidate strategies".into()));
    }
    let planned: Vec<(usize, Result<StrategyPlan, PlanError>)> = candidates
        .par_iter()
        .enumerate()
        .map(|(i, c)| (i, plan_strategy(minibatch, c, profile, opts)))
        .collect();

    let mut reports = Vec::with_capacity(candidates.len());
    let mut best: Option<(f64, u64, String, StrategyPlan)> = None;
    for (i, result) in planned {
        match result {
            Ok(plan) => {
                let score = plan.score(opts.penalize_empty);
                reports.push(CandidateReport {
                    strategy: candidates[i].clone(),
                    estimated_latency: Some(plan.estimated_latency),
                    score: Some(score),
                    infeasible_reason: None,
                    empty_pipelines: plan.diagnostics.empty_pipelines.len(),
                });
                let key = (score, candidates[i].total_gpus(), candidates[i].text());
                let better = match &best {
                    None => true,
                    Some((bs, bg, bt, _)) => {
                        (key.0, key.1, &key.2) < (*bs, *bg, bt)
                    }
                };
                if better {
                    best = Some((key.0, key.1, key.2, plan));
                }
            }
            Err(e) => reports.push(CandidateReport {
                strategy: candidates[i].clone(),
                estimated_latency: None,
                score: None,
                infeasible_reason: Some(e.to_string()),
                empty_pipelines: 0,
            }),
        }
    }
    match best {
        Some((_, _, _, plan)) => Ok((plan, reports)),
        None => Err(PlanError::AllInfeasible { candidates: candidates.len() }),
    }
}

/// Structural audit tying the whole plan together: conservation of the
/// mini-batch multiset, dispatch/packing consistency, and estimate ordering.
pub fn validate_strategy_plan(
    plan: &StrategyPlan,
    minibatch: &MiniBatch,
    profile: &CostProfile,
) -> Result<(), String> {
    dispatch::validate_plan(&plan.dispatch, &minibatch.lengths, &plan.strategy, profile)?;
    let pipelines = plan.strategy.expand();
    if plan.packings.len() != pipelines.len() {
        return Err("one packing slot per pipeline required".into());
    }
    let mut seen: Vec<u64> = Vec::new();
    for (j, packing) in plan.packings.iter().enumerate() {
        let assigned = plan.dispatch.assigned_lengths(&minibatch.lengths, j);
        match packing {
            Some(p) => {
                packing::validate_plan(p, &assigned, profile)?;
                if p.scheme != pipelines[j] {
                    return Err(format!("packing {j} built for the wrong scheme"));
                }
                seen.extend(&assigned);
            }
            None => {
                if !assigned.is_empty() {
                    return Err(format!("pipeline {j} has sequences but no packing"));
                }
            }
        }
    }
    let mut expected = minibatch.lengths.clone();
    expected.sort_unstable();
    seen.sort_unstable();
    if seen != expected {
        return Err("packed multiset differs from the mini-batch".into());
    }
    let recomputed = plan
        .packings
        .iter()
        .flatten()
        .map(|p| p.objective)
        .fold(0.0, f64::max);
    if recomputed != plan.estimated_latency {
        return Err(format!(
            "estimated latency {} != max packing objective {recomputed}",
            plan.estimated_latency
        ));
    }
    if plan.estimated_latency < plan.dispatch.objective - 1e-9 {
        return Err("estimate fell below the dispatch lower bound".into());
    }
    Ok(())
}
