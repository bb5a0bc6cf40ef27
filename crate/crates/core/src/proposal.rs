//! Data-distribution-aware strategy proposal.
//!
//! Runs once before training: a dynamic program over (GPU budget, length
//! ceiling) finds, for every ceiling `L` on the grid, the best strategy when
//! each scheme handles one contiguous length interval of the dataset. A
//! continuous relaxation lets intervals use fractional pipeline counts (on a
//! fixed decimal grid); rounding the fractional solutions both ways yields
//! the integer candidate set evaluated per iteration.
//!
//! States: `t[n][l]` = minimum achievable latency using up to `n` GPU units
//! for all dataset sequences of length <= `l`, with
//! `t[n][l] = min(t[n-1][l], min over schemes k, counts d, splits l' of
//! max(t[n - d*N(P_k)][l - l'], cost(l-l', l], P_k) / d))`,
//! requiring `MaxLen(P_k) >= l`. Interval costs come from histogram bins
//! evaluated at bin midpoints.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostProfile;
use crate::scheme::{ParallelScheme, Strategy};
use crate::workload::LengthHistogram;

#[derive(Debug, Error)]
pub enum ProposeError {
    #[error("grid mismatch: {0}")]
    GridMismatch(String),
    #[error("invalid steps: {0}")]
    BadSteps(String),
    #[error("no scheme supports sequences of length {l_max}; the largest MaxLen is {largest}")]
    NoSchemeSupportsLmax { l_max: u64, largest: u64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Grid steps for the DP. `n_step`/`d_step` must match so GPU-unit
/// bookkeeping stays integral; 1.0 selects the integer-only program.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DpSteps {
    pub n_step: f64,
    pub d_step: f64,
    pub l_step: u64,
}

impl DpSteps {
    pub fn fractional(l_step: u64) -> Self {
        Self { n_step: 0.1, d_step: 0.1, l_step }
    }

    pub fn integer(l_step: u64) -> Self {
        Self { n_step: 1.0, d_step: 1.0, l_step }
    }

    /// GPU-grid subdivisions per whole GPU.
    fn unit(&self) -> Result<u64, ProposeError> {
        if self.n_step != self.d_step {
            return Err(ProposeError::BadSteps(
                "n_step and d_step must be equal for exact grid indexing".into(),
            ));
        }
        if self.n_step <= 0.0 || self.n_step > 1.0 {
            return Err(ProposeError::BadSteps("steps must lie in (0, 1]".into()));
        }
        let unit = (1.0 / self.n_step).round();
        if (unit * self.n_step - 1.0).abs() > 1e-9 {
            return Err(ProposeError::BadSteps(format!(
                "1/n_step must be an integer, got n_step = {}",
                self.n_step
            )));
        }
        Ok(unit as u64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Choice {
    Unreachable,
    Done,
    /// Drop one GPU unit: inherit t[n-1][l].
    SkipGpu,
    /// Serve (l - l', l] with `d_units` of scheme `k`, recurse on the rest.
    Assign { k: usize, d_units: u64, l_prime: usize },
}

/// Solved DP table with backpointers for strategy reconstruction.
pub struct DpTable {
    pub l_step: u64,
    pub unit: u64,
    pub n_units: u64,
    pub grid_len: usize,
    schemes: Vec<ParallelScheme>,
    t: Vec<f64>,
    choice: Vec<Choice>,
}

impl DpTable {
    fn idx(&self, n: u64, l: usize) -> usize {
        n as usize * (self.grid_len + 1) + l
    }

    /// `t[n][l]` with `n` in GPU units and `l` a grid index.
    pub fn value(&self, n_units: u64, l_idx: usize) -> f64 {
        self.t[self.idx(n_units, l_idx)]
    }

    pub fn schemes(&self) -> &[ParallelScheme] {
        &self.schemes
    }

    /// Walk the backpointers from `(n_units, l_idx)` down to length zero.
    pub fn reconstruct(&self, n_units: u64, l_idx: usize) -> FractionalSolution {
        let mut segments = Vec::new();
        let (mut n, mut l) = (n_units, l_idx);
        loop {
            match self.choice[self.idx(n, l)] {
                Choice::Done | Choice::Unreachable => break,
                Choice::SkipGpu => n -= 1,
                Choice::Assign { k, d_units, l_prime } => {
                    segments.push(FractionalSegment {
                        scheme: self.schemes[k],
                        d_units,
                        lo_tokens: (l - l_prime) as u64 * self.l_step,
                        hi_tokens: l as u64 * self.l_step,
                    });
                    n -= d_units * self.schemes[k].gpus();
                    l -= l_prime;
                }
            }
        }
        segments.reverse();
        FractionalSolution { unit: self.unit, segments }
    }
}

/// One interval of the fractional solution: `d_units / unit` pipelines of
/// `scheme` serving lengths in `(lo_tokens, hi_tokens]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FractionalSegment {
    pub scheme: ParallelScheme,
    pub d_units: u64,
    pub lo_tokens: u64,
    pub hi_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionalSolution {
    pub unit: u64,
    pub segments: Vec<FractionalSegment>,
}

impl FractionalSolution {
    /// Merge segments by scheme into fractional pipeline counts.
    pub fn fractional_counts(&self) -> BTreeMap<ParallelScheme, f64> {
        let mut counts: BTreeMap<ParallelScheme, u64> = BTreeMap::new();
        for seg in &self.segments {
            *counts.entry(seg.scheme).or_insert(0) += seg.d_units;
        }
        counts
            .into_iter()
            .map(|(s, units)| (s, units as f64 / self.unit as f64))
            .collect()
    }
}

/// One histogram bin's contribution to an interval cost, compiled exactly
/// once so the DP, the re-scorer, and any independent oracle summing the
/// same bins agree bit-for-bit.
#[inline(never)]
pub fn bin_term(count: u64, latency_at_midpoint: f64) -> f64 {
    count as f64 * latency_at_midpoint
}

/// Per-scheme interval cost table over the length grid.
///
/// `cost(k, i, j)` sums `count_b * T(midpoint_b, P_k)` over histogram bins in
/// the grid interval `(i, j]`, accumulated in ascending bin order so any
/// independent ascending resummation reproduces it exactly.
struct IntervalCosts {
    grid_len: usize,
    table: Vec<f64>, // [k][i][j]
}

impl IntervalCosts {
    fn build(
        hist: &LengthHistogram,
        schemes: &[ParallelScheme],
        profile: &CostProfile,
        l_step: u64,
        grid_len: usize,
    ) -> Result<Self, ProposeError> {
        let bins_per_step = (l_step / hist.bin_width) as usize;
        let stride = grid_len + 1;
        let mut table = vec![0f64; schemes.len() * stride * stride];
        for (k, scheme) in schemes.iter().enumerate() {
            let bin_cost: Vec<f64> = (0..grid_len * bins_per_step)
                .map(|b| {
                    let count = hist.counts.get(b).copied().unwrap_or(0);
                    let t = profile
                        .latency_at(hist.bin_midpoint(b), *scheme)
                        .expect("scheme validated");
                    bin_term(count, t)
                })
                .collect();
            for i in 0..=grid_len {
                let base = k * stride * stride + i * stride;
                let mut acc = 0f64;
                for j in (i + 1)..=grid_len {
                    for b in (j - 1) * bins_per_step..j * bins_per_step {
                        acc += bin_cost[b];
                    }
                    table[base + j] = acc;
                }
            }
        }
        Ok(Self { grid_len, table })
    }

    fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        let stride = self.grid_len + 1;
        self.table[k * stride * stride + i * stride + j]
    }
}

/// Solve the dynamic program for `n_gpus` and ceilings up to `l_max`.
pub fn dp_solve(
    hist: &LengthHistogram,
    n_gpus: u64,
    l_max: u64,
    schemes: &[ParallelScheme],
    profile: &CostProfile,
    steps: DpSteps,
) -> Result<DpTable, ProposeError> {
    let unit = steps.unit()?;
    if l_max == 0 || l_max % steps.l_step != 0 {
        return Err(ProposeError::GridMismatch(format!(
            "l_max {l_max} must be a positive multiple of l_step {}",
            steps.l_step
        )));
    }
    if steps.l_step % hist.bin_width != 0 {
        return Err(ProposeError::GridMismatch(format!(
            "histogram bin width {} must divide l_step {}",
            hist.bin_width, steps.l_step
        )));
    }
    if schemes.is_empty() {
        return Err(ProposeError::InvalidParam("no schemes".into()));
    }
    for s in schemes {
        profile
            .coeffs(*s)
            .map_err(|e| ProposeError::InvalidParam(e.to_string()))?;
    }

    let grid_len = (l_max / steps.l_step) as usize;
    let n_units = n_gpus * unit;
    let costs = IntervalCosts::build(hist, schemes, profile, steps.l_step, grid_len)?;
    // MaxLen(P_k) in grid points, floored; a scheme can serve ceiling l only
    // if its capacity reaches the ceiling itself.
    let cap_grid: Vec<usize> = schemes
        .iter()
        .map(|s| {
            profile
                .max_len(*s)
                .map(|ml| ((ml / steps.l_step) as usize).min(grid_len))
                .unwrap_or(0)
        })
        .collect();

    let stride = grid_len + 1;
    let mut t = vec![f64::INFINITY; (n_units as usize + 1) * stride];
    let mut choice = vec![Choice::Unreachable; (n_units as usize + 1) * stride];
    for n in 0..=n_units as usize {
        t[n * stride] = 0.0;
        choice[n * stride] = Choice::Done;
    }

    for n in 1..=n_units {
        for l in 1..=grid_len {
            let idx = n as usize * stride + l;
            let mut best = t[(n - 1) as usize * stride + l];
            let mut best_choice =
                if best.is_finite() { Choice::SkipGpu } else { Choice::Unreachable };
            for (k, scheme) in schemes.iter().enumerate() {
                if cap_grid[k] < l {
                    continue;
                }
                let gpus = scheme.gpus();
                let d_max = n / gpus;
                for d_units in 1..=d_max {
                    let rest_n = (n - d_units * gpus) as usize;
                    for l_prime in 1..=l {
                        let rest = t[rest_n * stride + (l - l_prime)];
                        if !rest.is_finite() {
                            continue;
                        }
                        let interval =
                            costs.get(k, l - l_prime, l) * unit as f64 / d_units as f64;
                        let cand = rest.max(interval);
                        if cand < best {
                            best = cand;
                            best_choice = Choice::Assign { k, d_units, l_prime };
                        }
                    }
                }
            }
            t[idx] = best;
            choice[idx] = best_choice;
        }
    }

    Ok(DpTable {
        l_step: steps.l_step,
        unit,
        n_units,
        grid_len,
        schemes: schemes.to_vec(),
        t,
        choice,
    })
}

/// Re-score a reconstructed solution against the histogram: the max over
/// segments of interval cost divided by the fractional pipeline count.
/// Matches the DP value exactly in both modes.
pub fn rescore(
    solution: &FractionalSolution,
    hist: &LengthHistogram,
    profile: &CostProfile,
) -> f64 {
    let mut worst = 0f64;
    for seg in &solution.segments {
        let mut acc = 0f64;
        let lo_bin = (seg.lo_tokens / hist.bin_width) as usize;
        let hi_bin = (seg.hi_tokens / hist.bin_width) as usize;
        for b in lo_bin..hi_bin {
            let count = hist.counts.get(b).copied().unwrap_or(0);
            let t = profile
                .latency_at(hist.bin_midpoint(b), seg.scheme)
                .expect("scheme validated");
            acc += bin_term(count, t);
        }
        worst = worst.max(acc * solution.unit as f64 / seg.d_units as f64);
    }
    worst
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    /// Length ceiling whose fractional solution produced this candidate.
    pub l: u64,
    pub fractional: Vec<(ParallelScheme, f64)>,
    pub dp_objective: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub strategy: Strategy,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    pub n_gpus: u64,
    pub l_max: u64,
    pub strategies: Vec<Candidate>,
}

impl CandidateSet {
    pub fn strategy_list(&self) -> Vec<Strategy> {
        self.strategies.iter().map(|c| c.strategy.clone()).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ProposeOptions {
    pub steps: DpSteps,
    /// Cap on the emitted candidate count; overflow is pruned by ascending
    /// DP objective of each candidate's provenance.
    pub max_candidates: usize,
}

impl ProposeOptions {
    pub fn new(l_step: u64) -> Self {
        Self { steps: DpSteps::fractional(l_step), max_candidates: 16 }
    }
}

/// Build the candidate set: fractional DP, per-ceiling rounding (floor and
/// ceiling of every term, cross product), dedup, a homogeneous safety
/// strategy for the full context length, and the size cap.
pub fn propose(
    hist: &LengthHistogram,
    n_gpus: u64,
    l_max: u64,
    schemes: &[ParallelScheme],
    profile: &CostProfile,
    opts: &ProposeOptions,
) -> Result<CandidateSet, ProposeError> {
    let table = dp_solve(hist, n_gpus, l_max, schemes, profile, opts.steps)?;
    let safety = safety_candidate(hist, n_gpus, l_max, schemes, profile)?;

    // Dedup by text; a candidate produced by several ceilings keeps the
    // largest one (its strongest capacity claim).
    let mut seen: BTreeMap<String, (usize, Candidate)> = BTreeMap::new();
    let mut emit_order: Vec<String> = Vec::new();
    for l_idx in 1..=table.grid_len {
        let dp_objective = table.value(table.n_units, l_idx);
        if !dp_objective.is_finite() {
            continue;
        }
        let solution = table.reconstruct(table.n_units, l_idx);
        let fractional: Vec<(ParallelScheme, f64)> =
            solution.fractional_counts().into_iter().collect();
        let l = l_idx as u64 * table.l_step;
        for (rank, strategy) in roundings(&fractional, n_gpus).into_iter().enumerate() {
            // Every emitted candidate must support its provenance ceiling.
            let supports = strategy
                .terms()
                .iter()
                .any(|t| profile.max_len(t.scheme).map_or(false, |ml| ml >= l));
            if !supports {
                continue;
            }
            let text = strategy.text();
            let provenance =
                Provenance { l, fractional: fractional.clone(), dp_objective };
            if !seen.contains_key(&text) {
                emit_order.push(text.clone());
            }
            seen.insert(text, (rank, Candidate { strategy, provenance }));
        }
    }

    // Overflow pruning: the DP objective is monotone in the ceiling, so
    // the per-ceiling groups are ranked by dp-objective already; taking an
    // evenly-strided subsample across the ceiling spectrum (ends included)
    // keeps both long-capable and short-optimized strategies under the cap.
    let safety_text = safety.strategy.text();
    let mut groups: BTreeMap<u64, Vec<(usize, Candidate)>> = BTreeMap::new();
    for text in emit_order {
        let (rank, candidate) = seen.remove(&text).unwrap();
        if text != safety_text {
            groups.entry(candidate.provenance.l).or_default().push((rank, candidate));
        }
    }
    for group in groups.values_mut() {
        group.sort_by_key(|(rank, _)| *rank);
    }
    let cap = opts.max_candidates.saturating_sub(1).max(1);
    let group_list: Vec<&Vec<(usize, Candidate)>> = groups.values().rev().collect();
    let mut candidates: Vec<Candidate> = Vec::new();
    if !group_list.is_empty() {
        let mut visit: Vec<usize> = if group_list.len() <= cap {
            (0..group_list.len()).collect()
        } else {
            (0..cap)
                .map(|i| i * (group_list.len() - 1) / (cap - 1).max(1))
                .collect()
        };
        visit.dedup();
        let mut round = 0usize;
        while candidates.len() < cap {
            let mut any = false;
            for &g in &visit {
                if let Some((_, candidate)) = group_list[g].get(round) {
                    any = true;
                    candidates.push(candidate.clone());
                    if candidates.len() == cap {
                        break;
                    }
                }
            }
            if !any {
                break;
            }
            round += 1;
        }
    }
    candidates.sort_by(|a, b| {
        b.provenance
            .l
            .cmp(&a.provenance.l)
            .then_with(|| a.strategy.text().cmp(&b.strategy.text()))
    });
    candidates.push(safety);

    Ok(CandidateSet { n_gpus, l_max, strategies: candidates })
}

/// Floor/ceiling cross product over the fractional counts, dropping
/// over-budget and empty roundings.
fn roundings(fractional: &[(ParallelScheme, f64)], n_gpus: u64) -> Vec<Strategy> {
    let mut out = Vec::new();
    let k = fractional.len();
    if k == 0 || k > 16 {
        return out;
    }
    for mask in 0..(1u32 << k) {
        let mut terms = Vec::with_capacity(k);
        for (bit, (scheme, frac)) in fractional.iter().enumerate() {
            let count = if mask & (1 << bit) != 0 {
                frac.ceil() as u32
            } else {
                frac.floor() as u32
            };
            if count > 0 {
                terms.push((*scheme, count));
            }
        }
        if terms.is_empty() {
            continue;
        }
        let strategy = Strategy::new(terms);
        if strategy.total_gpus() <= n_gpus && !out.contains(&strategy) {
            out.push(strategy);
        }
    }
    out
}

/// Best homogeneous strategy able to serve the full context length, scored
/// by its whole-dataset DP cost. Ties break toward fewer GPUs, then text.
fn safety_candidate(
    hist: &LengthHistogram,
    n_gpus: u64,
    l_max: u64,
    schemes: &[ParallelScheme],
    profile: &CostProfile,
) -> Result<Candidate, ProposeError> {
    let mut best: Option<(f64, u64, String, Candidate)> = None;
    let mut largest = 0u64;
    for scheme in schemes {
        let Ok(max_len) = profile.max_len(*scheme) else { continue };
        largest = largest.max(max_len);
        if max_len < l_max || scheme.gpus() > n_gpus {
            continue;
        }
        let count = (n_gpus / scheme.gpus()) as u32;
        let strategy = Strategy::homogeneous(*scheme, count);
        let solution = FractionalSolution {
            unit: 1,
            segments: vec![FractionalSegment {
                scheme: *scheme,
                d_units: u64::from(count),
                lo_tokens: 0,
                hi_tokens: hist.max_binned_length().max(l_max),
            }],
        };
        let score = rescore(&solution, hist, profile);
        let key = (score, strategy.total_gpus(), strategy.text());
        if best
            .as_ref()
            .map_or(true, |(s, g, t, _)| (key.0, key.1, &key.2) < (*s, *g, t))
        {
            let candidate = Candidate {
                strategy: strategy.clone(),
                provenance: Provenance {
                    l: l_max,
                    fractional: vec![(*scheme, f64::from(count))],
                    dp_objective: score,
                },
            };
            best = Some((key.0, key.1, key.2, candidate));
        }
    }
    best.map(|(_, _, _, c)| c)
        .ok_or(ProposeError::NoSchemeSupportsLmax { l_max, largest })
}
