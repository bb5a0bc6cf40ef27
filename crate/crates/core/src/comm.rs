//! Pull/push communication plans between the fully-sharded optimization
//! layout and a strategy's propagation layout.
//!
//! The flat parameter space `[0, W)` is cut two ways: optimization rank `g`
//! owns `[g W/N, (g+1) W/N)`, while a propagation GPU at (stage, tp-rank) of
//! a pipeline needs the contiguous block `[(s*tp + t) W/(pp*tp), ...)`; cp
//! ranks replicate their cell's block. Plans move *mutual slices* — the space
//! divided into `LCM(N, TP_max)` segments for pull and
//! `LCM(N, D_cp * TP_max)` for push — with three primitives: send, receive,
//! and local movement. Plans are audit artifacts: nothing is executed, but
//! every slice flow is accounted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostProfile;
use crate::scheme::{validate_strategy, ParallelScheme, Strategy};

#[derive(Debug, Error)]
pub enum CommError {
    #[error("strategy {strategy}: {reason}")]
    InvalidStrategy { strategy: String, reason: String },
    #[error("scheme {scheme}: pp = {pp} does not divide the {layers} model layers")]
    Divisibility { scheme: ParallelScheme, pp: u32, layers: u32 },
}

pub fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

pub fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Mutual-slice count shared by two partition granularities.
pub fn mutual_granularity(a: u64, b: u64) -> u64 {
    lcm(a, b)
}

/// Half-open fraction `[num_lo/den, num_hi/den)` of the parameter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FracInterval {
    pub num_lo: u64,
    pub num_hi: u64,
    pub den: u64,
}

impl FracInterval {
    /// Mutual slices (granularity `g`) intersecting this interval.
    fn slices(&self, g: u64) -> std::ops::Range<u64> {
        let lo = self.num_lo * g / self.den;
        let hi = (self.num_hi * g).div_ceil(self.den);
        lo..hi
    }
}

/// Propagation role of one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropRole {
    pub pipeline: usize,
    pub scheme: ParallelScheme,
    pub stage: u32,
    pub tp_rank: u32,
    pub cp_rank: u32,
    pub needed: FracInterval,
}

/// Both phase layouts for one strategy on one cluster.
///
/// GPUs are numbered pipeline-major, then stage-major, then tp, then cp;
/// ranks beyond the strategy's GPU demand hold optimizer shards but no
/// propagation role.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlacementMap {
    pub n_gpus: u64,
    pub n_layers: u32,
    pub strategy: Strategy,
    pub roles: Vec<Option<PropRole>>,
}

impl PlacementMap {
    /// Optimization shard of rank `g` as a fraction of the space.
    pub fn owner_interval(&self, rank: u64) -> FracInterval {
        FracInterval { num_lo: rank, num_hi: rank + 1, den: self.n_gpus }
    }
}

pub fn build_placement(
    strategy: &Strategy,
    n_gpus: u64,
    n_layers: u32,
) -> Result<PlacementMap, CommError> {
    let report = validate_strategy(strategy, n_gpus);
    if !report.ok() {
        return Err(CommError::InvalidStrategy {
            strategy: strategy.text(),
            reason: report.violations.join("; "),
        });
    }
    for term in strategy.terms() {
        if n_layers % term.scheme.pp != 0 {
            return Err(CommError::Divisibility {
                scheme: term.scheme,
                pp: term.scheme.pp,
                layers: n_layers,
            });
        }
    }
    let mut roles: Vec<Option<PropRole>> = vec![None; n_gpus as usize];
    let mut rank = 0usize;
    for (pipeline, scheme) in strategy.expand().into_iter().enumerate() {
        for stage in 0..scheme.pp {
            for tp_rank in 0..scheme.tp {
                for cp_rank in 0..scheme.cp {
                    let cells = u64::from(scheme.pp) * u64::from(scheme.tp);
                    let cell = u64::from(stage) * u64::from(scheme.tp) + u64::from(tp_rank);
                    roles[rank] = Some(PropRole {
                        pipeline,
                        scheme,
                        stage,
                        tp_rank,
                        cp_rank,
                        needed: FracInterval { num_lo: cell, num_hi: cell + 1, den: cells },
                    });
                    rank += 1;
                }
            }
        }
    }
    Ok(PlacementMap { n_gpus, n_layers, strategy: strategy.clone(), roles })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Primitive {
    Send { src: u64, dst: u64, slice: u64 },
    Receive { dst: u64, src: u64, slice: u64 },
    LocalMove { gpu: u64, slice: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    Pull,
    Push,
}

/// One reduce-scatter group: `ranks` jointly reduce the mutual slices in
/// `[slice_lo, slice_hi)` and scatter the results.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RsGroup {
    pub ranks: Vec<u64>,
    pub slice_lo: u64,
    pub slice_hi: u64,
}

/// Per-GPU tallies in mutual-slice units. `sent`/`received` count network
/// primitives, `local` counts local movements.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuUnits {
    pub sent: u64,
    pub received: u64,
    pub local: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CommPlan {
    pub direction: Direction,
    pub strategy: Strategy,
    pub n_gpus: u64,
    pub granularity: u64,
    /// Canonical order: ascending (destination GPU, slice) for pull and
    /// ascending slice for push, sends immediately preceding their receives.
    pub primitives: Vec<Primitive>,
    pub reduce_scatter_groups: Vec<RsGroup>,
    pub per_gpu: Vec<GpuUnits>,
}

impl CommPlan {
    pub fn sends(&self) -> impl Iterator<Item = (u64, u64, u64)> + '_ {
        self.primitives.iter().filter_map(|p| match p {
            Primitive::Send { src, dst, slice } => Some((*src, *dst, *slice)),
            _ => None,
        })
    }

    pub fn has_network_traffic(&self) -> bool {
        self.sends().next().is_some()
    }
}

/// Slice owner under the fully-sharded layout; `n | granularity` always
/// holds because the granularity is an LCM with `n`.
fn owner_of(slice: u64, granularity: u64, n_gpus: u64) -> u64 {
    slice / (granularity / n_gpus)
}

/// Parameter retrieval: every propagation GPU obtains each mutual slice of
/// its needed block from the slice's optimizer owner — locally when it owns
/// the slice itself, otherwise by a send/receive pair.
pub fn pull_plan(placement: &PlacementMap) -> CommPlan {
    let n = placement.n_gpus;
    let granularity = lcm(n, u64::from(placement.strategy.tp_max()));
    let mut primitives = Vec::new();
    let mut per_gpu = vec![GpuUnits::default(); n as usize];
    for (rank, role) in placement.roles.iter().enumerate() {
        let Some(role) = role else { continue };
        let dst = rank as u64;
        for slice in role.needed.slices(granularity) {
            let src = owner_of(slice, granularity, n);
            if src == dst {
                primitives.push(Primitive::LocalMove { gpu: dst, slice });
                per_gpu[rank].local += 1;
            } else {
                primitives.push(Primitive::Send { src, dst, slice });
                primitives.push(Primitive::Receive { dst, src, slice });
                per_gpu[src as usize].sent += 1;
                per_gpu[rank].received += 1;
            }
        }
    }
    CommPlan {
        direction: Direction::Pull,
        strategy: placement.strategy.clone(),
        n_gpus: n,
        granularity,
        primitives,
        reduce_scatter_groups: Vec::new(),
        per_gpu,
    }
}

/// Gradient return: replicas of each mutual slice (the GPUs whose needed
/// block covers it, across pipelines and cp ranks) reduce-scatter first;
/// the reduced slice lands on its optimizer owner directly when the owner
/// participates, otherwise the group's first member forwards it.
pub fn push_plan(placement: &PlacementMap) -> CommPlan {
    let n = placement.n_gpus;
    let d_cp = placement.strategy.d_cp();
    let granularity = lcm(n, d_cp * u64::from(placement.strategy.tp_max()));
    let mut primitives = Vec::new();
    let mut per_gpu = vec![GpuUnits::default(); n as usize];
    let mut groups: Vec<RsGroup> = Vec::new();

    for slice in 0..granularity {
        let mut ranks: Vec<u64> = placement
            .roles
            .iter()
            .enumerate()
            .filter_map(|(rank, role)| {
                role.as_ref()
                    .filter(|r| r.needed.slices(granularity).contains(&slice))
                    .map(|_| rank as u64)
            })
            .collect();
        ranks.sort_unstable();
        debug_assert!(!ranks.is_empty(), "every slice has a gradient producer");

        match groups.last_mut() {
            Some(g) if g.ranks == ranks && g.slice_hi == slice => g.slice_hi = slice + 1,
            _ => groups.push(RsGroup { ranks: ranks.clone(), slice_lo: slice, slice_hi: slice + 1 }),
        }

        let owner = owner_of(slice, granularity, n);
        if ranks.binary_search(&owner).is_ok() {
            primitives.push(Primitive::LocalMove { gpu: owner, slice });
            per_gpu[owner as usize].local += 1;
        } else {
            let src = ranks[0];
            primitives.push(Primitive::Send { src, dst: owner, slice });
            primitives.push(Primitive::Receive { dst: owner, src, slice });
            per_gpu[src as usize].sent += 1;
            per_gpu[owner as usize].received += 1;
        }
    }
    CommPlan {
        direction: Direction::Push,
        strategy: placement.strategy.clone(),
        n_gpus: n,
        granularity,
        primitives,
        reduce_scatter_groups: groups,
        per_gpu,
    }
}

/// Per-GPU byte volumes at a given total parameter size.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GpuVolume {
    /// Network bytes sent / received over LNK primitives.
    pub sent: f64,
    pub received: f64,
    /// Bytes moved locally between the two layouts.
    pub local: f64,
    /// Everything this GPU obtains: received + local. Bounded by W.
    pub delivered: f64,
    /// Everything this GPU supplies: sent + local. Bounded by W.
    pub served: f64,
    /// Reduce-scatter traffic, (k-1)/k of the group's bytes per member.
    pub rs_reduce: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VolumeReport {
    pub param_bytes: u64,
    pub slice_bytes: f64,
    pub per_gpu: Vec<GpuVolume>,
}

impl VolumeReport {
    pub fn max_delivered(&self) -> f64 {
        self.per_gpu.iter().map(|g| g.delivered).fold(0.0, f64::max)
    }

    pub fn max_served(&self) -> f64 {
        self.per_gpu.iter().map(|g| g.served).fold(0.0, f64::max)
    }

    pub fn max_network(&self) -> f64 {
        self.per_gpu.iter().map(|g| g.sent.max(g.received)).fold(0.0, f64::max)
    }

    pub fn max_local(&self) -> f64 {
        self.per_gpu.iter().map(|g| g.local).fold(0.0, f64::max)
    }
}

/// Convert a plan's unit tallies to bytes for a parameter space of
/// `param_bytes` total.
pub fn volumes(plan: &CommPlan, param_bytes: u64) -> VolumeReport {
    let slice_bytes = param_bytes as f64 / plan.granularity as f64;
    let mut per_gpu: Vec<GpuVolume> = plan
        .per_gpu
        .iter()
        .map(|u| {
            let sent = u.sent as f64 * slice_bytes;
            let received = u.received as f64 * slice_bytes;
            let local = u.local as f64 * slice_bytes;
            GpuVolume {
                sent,
                received,
                local,
                delivered: received + local,
                served: sent + local,
                rs_reduce: 0.0,
            }
        })
        .collect();
    for group in &plan.reduce_scatter_groups {
        let k = group.ranks.len() as f64;
        let bytes = (group.slice_hi - group.slice_lo) as f64 * slice_bytes;
        for &rank in &group.ranks {
            per_gpu[rank as usize].rs_reduce += bytes * (k - 1.0) / k;
        }
    }
    VolumeReport { param_bytes, slice_bytes, per_gpu }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectivePattern {
    AllGather,
    ReduceScatterOnly,
    General,
}

/// Classify a plan against the standard sharded-training collectives.
///
/// A homogeneous strategy whose cell grid divides the optimizer sharding is
/// the conventional case: pull degenerates to all-gather, push to a bare
/// reduce-scatter. Everything else needs general resharding.
pub fn reduce_to_collectives(plan: &CommPlan) -> CollectivePattern {
    let homogeneous = plan.strategy.is_homogeneous();
    let divisible = plan.strategy.terms().first().map_or(false, |t| {
        let cells = u64::from(t.scheme.pp) * u64::from(t.scheme.tp);
        plan.n_gpus % cells == 0
    });
    match plan.direction {
        Direction::Pull if homogeneous && divisible => CollectivePattern::AllGather,
        Direction::Push if homogeneous && divisible => CollectivePattern::ReduceScatterOnly,
        _ => CollectivePattern::General,
    }
}

/// Can parameter traffic hide behind compute for this micro-batch size?
pub fn overlap_feasible(
    scheme: ParallelScheme,
    tokens_per_microbatch: u64,
    profile: &CostProfile,
) -> bool {
    tokens_per_microbatch >= profile.overlap_threshold(scheme)
}

/// Graphviz rendering of the primitive graph (sends as edges, local moves as
/// self-loops).
pub fn to_dot(plan: &CommPlan) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let dir = match plan.direction {
        Direction::Pull => "pull",
        Direction::Push => "push",
    };
    writeln!(out, "digraph {dir} {{").unwrap();
    writeln!(out, "  label=\"{} granularity={}\";", plan.strategy, plan.granularity).unwrap();
    for g in 0..plan.n_gpus {
        writeln!(out, "  gpu{g} [shape=box];").unwrap();
    }
    for p in &plan.primitives {
        match p {
            Primitive::Send { src, dst, slice } => {
                writeln!(out, "  gpu{src} -> gpu{dst} [label=\"{slice}\"];").unwrap()
            }
            Primitive::LocalMove { gpu, slice } => {
                writeln!(out, "  gpu{gpu} -> gpu{gpu} [label=\"{slice}\", style=dashed];")
                    .unwrap()
            }
            Primitive::Receive { .. } => {}
        }
    }
    writeln!(out, "}}").unwrap();
    out
}

/// Full structural audit of a plan against its placement: slice
/// conservation, send/receive pairing, owner-correct sourcing, and (push)
/// replica-group membership.
pub fn audit_plan(plan: &CommPlan, placement: &PlacementMap) -> Result<(), String> {
    use std::collections::BTreeMap;
    let g = plan.granularity;
    let n = plan.n_gpus;

    let mut sends: BTreeMap<(u64, u64, u64), u64> = BTreeMap::new();
    let mut receives: BTreeMap<(u64, u64, u64), u64> = BTreeMap::new();
    let mut delivered: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for p in &plan.primitives {
        match *p {
            Primitive::Send { src, dst, slice } => {
                *sends.entry((src, dst, slice)).or_insert(0) += 1;
            }
            Primitive::Receive { dst, src, slice } => {
                *receives.entry((src, dst, slice)).or_insert(0) += 1;
                delivered.entry(dst).or_default().push(slice);
            }
            Primitive::LocalMove { gpu, slice } => {
                if owner_of(slice, g, n) != gpu {
                    return Err(format!("local move of slice {slice} on non-owner {gpu}"));
                }
                delivered.entry(gpu).or_default().push(slice);
            }
        }
    }
    if sends != receives {
        return Err("send/receive primitives are not a perfect matching".into());
    }
    for ((src, dst, slice), count) in &sends {
        if *count != 1 {
            return Err(format!("slice {slice} sent {count} times from {src} to {dst}"));
        }
        if owner_of(*slice, g, n) != *src && plan.direction == Direction::Pull {
            return Err(format!("pull send of slice {slice} from non-owner {src}"));
        }
        if src == dst {
            return Err("send with src == dst should be a local move".into());
        }
    }

    match plan.direction {
        Direction::Pull => {
            for (rank, role) in placement.roles.iter().enumerate() {
                let mut got = delivered.remove(&(rank as u64)).unwrap_or_default();
                got.sort_unstable();
                let want: Vec<u64> = match role {
                    Some(r) => r.needed.slices(g).collect(),
                    None => Vec::new(),
                };
                if got != want {
                    return Err(format!(
                        "rank {rank}: delivered slices {got:?} != needed {want:?}"
                    ));
                }
            }
            if !delivered.is_empty() {
                return Err("deliveries to ranks outside the cluster".into());
            }
        }
        Direction::Push => {
            // Exactly one delivery of every slice to its optimizer owner.
            for slice in 0..g {
                let owner = owner_of(slice, g, n);
                let got = delivered
                    .get(&owner)
                    .map(|v| v.iter().filter(|s| **s == slice).count())
                    .unwrap_or(0);
                if got != 1 {
                    return Err(format!(
                        "slice {slice} delivered {got} times to owner {owner}"
                    ));
                }
            }
            // Replica groups must be exactly the producers of their slices.
            let mut covered = vec![false; g as usize];
            for group in &plan.reduce_scatter_groups {
                for slice in group.slice_lo..group.slice_hi {
                    if covered[slice as usize] {
                        return Err(format!("slice {slice} in two reduce-scatter groups"));
                    }
                    covered[slice as usize] = true;
                    let producers: Vec<u64> = placement
                        .roles
                        .iter()
                        .enumerate()
                        .filter_map(|(rank, role)| {
                            role.as_ref()
                                .filter(|r| r.needed.slices(g).contains(&slice))
                                .map(|_| rank as u64)
                        })
                        .collect();
                    if producers != group.ranks {
                        return Err(format!(
                            "slice {slice}: group {:?} != producers {producers:?}",
                            group.ranks
                        ));
                    }
                }
            }
            if covered.iter().any(|c| !c) {
                return Err("reduce-scatter groups do not cover every slice".into());
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strategy(txt: &str) -> Strategy {
        txt.parse().unwrap()
    }

    #[test]
    fn granularity_reference_geometry() {
        // Partition granularities 4 and 6 share mutual slices at 12.
        assert_eq!(mutual_granularity(4, 6), 12);
    }

    #[test]
    fn zero_one_like_worst_case_needs_everything() {
        let st = strategy("1x1x1*4");
        let placement = build_placement(&st, 4, 8).unwrap();
        for role in placement.roles.iter().flatten() {
            assert_eq!(role.needed, FracInterval { num_lo: 0, num_hi: 1, den: 1 });
        }
        let plan = pull_plan(&placement);
        assert_eq!(plan.granularity, 4);
        let report = volumes(&plan, 4096);
        for g in &report.per_gpu {
            // no locality discount: each GPU obtains the whole space and
            // serves its shard to all four requesters
            assert_eq!(g.delivered, 4096.0);
            assert_eq!(g.served, 4096.0);
        }
    }

    #[test]
    fn aligned_tensor_parallel_is_all_local() {
        let st = strategy("4x1x1*1");
        let placement = build_placement(&st, 4, 8).unwrap();
        let plan = pull_plan(&placement);
        assert!(!plan.has_network_traffic());
        let report = volumes(&plan, 4096);
        assert_eq!(report.max_network(), 0.0);
        for (rank, role) in placement.roles.iter().enumerate() {
            // each GPU needs exactly the slice it owns
            let needed = role.unwrap().needed;
            assert_eq!(
                needed.slices(plan.granularity).collect::<Vec<_>>(),
                vec![rank as u64]
            );
        }
        audit_plan(&plan, &placement).unwrap();
    }

    #[test]
    fn stage_split_covers_the_space_once() {
        let st = strategy("2x2x1*1");
        let placement = build_placement(&st, 4, 8).unwrap();
        // stage 0 GPUs need the first half split in two, stage 1 the second.
        let mut covered = vec![0u32; 4];
        for role in placement.roles.iter().flatten() {
            for s in role.needed.slices(4) {
                covered[s as usize] += 1;
            }
        }
        assert_eq!(covered, vec![1, 1, 1, 1]);
        let plan = pull_plan(&placement);
        audit_plan(&plan, &placement).unwrap();
    }

    #[test]
    fn pull_audit_across_enumerable_strategies() {
        for txt in [
            "2x1x1*2",
            "2x2x1*1",
            "4x1x1*1+1x1x1*4",
            "2x1x1*1+1x1x2*1",
            "1x2x1*2+2x1x1*2",
            "8x1x1*1",
        ] {
            let st = strategy(txt);
            let n = 8;
            let placement = build_placement(&st, n, 8).unwrap();
            let plan = pull_plan(&placement);
            assert_eq!(plan.granularity, lcm(n, u64::from(st.tp_max())), "{txt}");
            audit_plan(&plan, &placement).unwrap();
            let report = volumes(&plan, 1 << 20);
            assert!(report.max_delivered() <= (1u64 << 20) as f64 + 1e-6, "{txt}");
            assert!(report.max_served() <= (1u64 << 20) as f64 + 1e-6, "{txt}");
        }
    }

    #[test]
    fn push_conservation_on_heterogeneous_mix() {
        let st = strategy("2x1x1*1+1x1x1*2");
        let placement = build_placement(&st, 4, 8).unwrap();
        let plan = push_plan(&placement);
        // D_cp = 3, TP_max = 2: granularity lcm(4, 6) = 12
        assert_eq!(plan.granularity, 12);
        audit_plan(&plan, &placement).unwrap();
    }

    #[test]
    fn homogeneous_plans_classify_as_sharded_collectives() {
        for txt in ["2x1x1*4", "1x1x1*8", "2x2x1*2", "8x1x1*1", "2x2x2*1"] {
            let st = strategy(txt);
            let placement = build_placement(&st, 8, 8).unwrap();
            assert_eq!(
                reduce_to_collectives(&pull_plan(&placement)),
                CollectivePattern::AllGather,
                "{txt}"
            );
            assert_eq!(
                reduce_to_collectives(&push_plan(&placement)),
                CollectivePattern::ReduceScatterOnly,
                "{txt}"
            );
        }
    }

    #[test]
    fn mixed_tp_classifies_general() {
        let st = strategy("4x1x1*1+1x1x1*4");
        let placement = build_placement(&st, 8, 8).unwrap();
        assert_eq!(
            reduce_to_collectives(&pull_plan(&placement)),
            CollectivePattern::General
        );
        assert_eq!(
            reduce_to_collectives(&push_plan(&placement)),
            CollectivePattern::General
        );
    }

    #[test]
    fn single_pipeline_full_tp_push_has_singleton_groups() {
        let st = strategy("4x1x1*1");
        let placement = build_placement(&st, 4, 8).unwrap();
        let plan = push_plan(&placement);
        for group in &plan.reduce_scatter_groups {
            assert_eq!(group.ranks.len(), 1);
        }
        audit_plan(&plan, &placement).unwrap();
    }

    #[test]
    fn divisibility_is_checked() {
        let st = strategy("1x3x1*1");
        assert!(matches!(
            build_placement(&st, 4, 8),
            Err(CommError::Divisibility { .. })
        ));
    }

    #[test]
    fn dot_export_mentions_every_send() {
        let st = strategy("2x1x1*1+1x1x1*2");
        let placement = build_placement(&st, 4, 8).unwrap();
        let plan = pull_plan(&placement);
        let dot = to_dot(&plan);
        assert!(dot.starts_with("digraph pull {"));
        assert_eq!(
            dot.matches(" -> ").count(),
            plan.sends().count() + plan.primitives.iter().filter(|p| matches!(p, Primitive::LocalMove { .. })).count()
        );
    }
}
