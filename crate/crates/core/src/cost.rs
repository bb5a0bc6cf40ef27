//! Profiling-based cost models: the quadratic latency model `T(l, P)`, the
//! linear memory model behind `MaxLen(P)`, the efficiency threshold
//! `UtilLen(P)`, and the compute/communication overlap threshold.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheme::ParallelScheme;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("no latency coefficients for scheme {0}")]
    UnknownScheme(ParallelScheme),
    #[error("latency fit needs at least 3 distinct sequence lengths, got {0}")]
    RankDeficient(usize),
    #[error("scheme {scheme} is infeasible: fixed state {state_bytes:.3e} B exceeds the {budget_bytes:.3e} B budget")]
    Infeasible { scheme: ParallelScheme, state_bytes: f64, budget_bytes: f64 },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// Transformer shape as seen by the memory model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub hidden: u64,
    pub layers: u32,
    pub vocab: u64,
}

/// Cluster description. `flops` is the per-GPU half-precision capability,
/// `bandwidth` the slowest interconnect in bytes/sec.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareSpec {
    pub n_gpus: u64,
    pub gpu_memory: u64,
    pub flops: f64,
    pub bandwidth: f64,
    pub safety_margin: u64,
}

/// Memory-model constants.
///
/// `alpha` is the fraction of state bytes held in the fully-sharded 32-bit
/// side (3/4 for 32-bit optimizer states + parameters vs 16-bit parameters +
/// gradients). `embed_factor` is the per-entry embedding cost in bytes; the
/// unit is configurable because profiling pins it, not first principles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryConstants {
    pub act_const: f64,
    pub state_const: f64,
    pub alpha: f64,
    pub embed_factor: f64,
}

impl MemoryConstants {
    pub fn validate(&self) -> Result<(), CostError> {
        if self.act_const <= 0.0 || self.state_const <= 0.0 {
            return Err(CostError::InvalidParam(
                "act_const and state_const must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CostError::InvalidParam("alpha must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Coefficients of `T(l) = a*l^2 + b*l + c` for one scheme, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl LatencyCoeffs {
    /// Compiled exactly once: the toolchain may contract `mul + add` into
    /// fused multiply-adds per call site, and plan audits compare stored
    /// against recomputed values bit-for-bit, so every caller must go
    /// through the same machine code.
    #[inline(never)]
    pub fn eval(&self, l: f64) -> f64 {
        (self.a * l + self.b) * l + self.c
    }
}

/// Residual summary returned with every latency fit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FitResidual {
    pub rmse: f64,
    pub max_abs: f64,
    /// Largest |predicted - observed| / observed over samples with t > 0.
    pub max_rel: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyFit {
    pub coeffs: LatencyCoeffs,
    pub residual: FitResidual,
}

/// Non-negative least squares on the quadratic basis.
///
/// With only three coefficients the active-set method degenerates to trying
/// all 2^3 sign-constraint supports and keeping the feasible solution with
/// the smallest residual, which is exact.
pub fn fit_latency(samples: &[(u64, f64)]) -> Result<LatencyFit, CostError> {
    let mut distinct: Vec<u64> = samples.iter().map(|(l, _)| *l).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(CostError::RankDeficient(distinct.len()));
    }

    // Scale lengths to [0, 1] so the normal equations stay well conditioned,
    // and weight residuals by 1/t: profiling noise is multiplicative, so the
    // fit should be accurate in relative terms across the whole range.
    let l_scale = samples.iter().map(|(l, _)| *l).max().unwrap() as f64;
    let pts: Vec<(f64, f64, f64)> = samples
        .iter()
        .map(|(l, t)| {
            let w = if *t > 0.0 { 1.0 / t } else { 1.0 };
            (*l as f64 / l_scale, *t, w)
        })
        .collect();

    // Normal matrix for the basis [x^2, x, 1].
    let mut m = [[0f64; 3]; 3];
    let mut rhs = [0f64; 3];
    for (x, t, w) in &pts {
        let basis = [x * x, *x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += w * w * basis[i] * basis[j];
            }
            rhs[i] += w * w * basis[i] * t;
        }
    }

    let sse = |coef: &[f64; 3]| -> f64 {
        pts.iter()
            .map(|(x, t, w)| {
                let p = coef[0] * x * x + coef[1] * x + coef[2];
                let r = w * (p - t);
                r * r
            })
            .sum()
    };

    // Enumerate supports: bit i set means coefficient i is free, else pinned
    // at zero. Keep the feasible (all-nonnegative) solution with minimum SSE.
    let mut best: Option<([f64; 3], f64)> = None;
    for mask in 0..8u32 {
        let free: Vec<usize> = (0..3).filter(|i| mask & (1 << i) != 0).collect();
        let k = free.len();
        let mut sub = vec![vec![0f64; k + 1]; k];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                sub[r][c] = m[i][j];
            }
            sub[r][k] = rhs[i];
        }
        let Some(sol) = gauss_solve(&mut sub) else { continue };
        let mut coef = [0f64; 3];
        for (r, &i) in free.iter().enumerate() {
            coef[i] = sol[r];
        }
        if coef.iter().any(|v| *v < 0.0) {
            continue;
        }
        let err = sse(&coef);
        if best.map_or(true, |(_, e)| err < e) {
            best = Some((coef, err));
        }
    }
    let (coef, err) = best.expect("the all-zero support is always feasible");

    let coeffs = LatencyCoeffs {
        a: coef[0] / (l_scale * l_scale),
        b: coef[1] / l_scale,
        c: coef[2],
    };
    let mut max_abs = 0f64;
    let mut max_rel = 0f64;
    for (l, t) in samples {
        let d = (coeffs.eval(*l as f64) - t).abs();
        max_abs = max_abs.max(d);
        if *t > 0.0 {
            max_rel = max_rel.max(d / t);
        }
    }
    let rmse = (err / samples.len() as f64).sqrt();
    Ok(LatencyFit { coeffs, residual: FitResidual { rmse, max_abs, max_rel } })
}

/// Gaussian elimination with partial pivoting on an augmented matrix.
/// Returns `None` on (numerical) singularity.
fn gauss_solve(m: &mut [Vec<f64>]) -> Option<Vec<f64>> {
    let n = m.len();
    if n == 0 {
        return Some(vec![]);
    }
    for col in 0..n {
        let pivot = (col..n).max_by(|a, b| {
            m[*a][col].abs().partial_cmp(&m[*b][col].abs()).unwrap()
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        for row in 0..n {
            if row == col {
                continue;
            }
            let f = m[row][col] / m[col][col];
            for k in col..=n {
                m[row][k] -= f * m[col][k];
            }
        }
    }
    Some((0..n).map(|i| m[i][n] / m[i][i]).collect())
}

/// Per-scheme capacity and efficiency caches plus everything needed to
/// recompute them. Immutable after construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostProfile {
    pub shape: ModelShape,
    pub hardware: HardwareSpec,
    pub memory: MemoryConstants,
    pub util_threshold: f64,
    coeffs: BTreeMap<ParallelScheme, LatencyCoeffs>,
    /// `None` marks schemes whose fixed state alone exceeds the memory budget.
    max_len_cache: BTreeMap<ParallelScheme, Option<u64>>,
    util_len_cache: BTreeMap<ParallelScheme, Option<u64>>,
}

pub const DEFAULT_UTIL_THRESHOLD: f64 = 0.85;

impl CostProfile {
    pub fn build(
        shape: ModelShape,
        hardware: HardwareSpec,
        memory: MemoryConstants,
        coeffs: BTreeMap<ParallelScheme, LatencyCoeffs>,
        util_threshold: f64,
    ) -> Result<Self, CostError> {
        memory.validate()?;
        if !(0.0..=1.0).contains(&util_threshold) || util_threshold <= 0.0 {
            return Err(CostError::InvalidParam("util threshold must lie in (0, 1]".into()));
        }
        if hardware.safety_margin >= hardware.gpu_memory {
            return Err(CostError::InvalidParam(
                "safety margin must be below GPU memory".into(),
            ));
        }
        let mut profile = Self {
            shape,
            hardware,
            memory,
            util_threshold,
            coeffs,
            max_len_cache: BTreeMap::new(),
            util_len_cache: BTreeMap::new(),
        };
        for scheme in profile.coeffs.keys().copied().collect::<Vec<_>>() {
            let ml = profile.compute_max_len(scheme).ok();
            profile.max_len_cache.insert(scheme, ml);
            let ul = match ml {
                Some(_) => Some(profile.compute_util_len(scheme, util_threshold)?),
                None => None,
            };
            profile.util_len_cache.insert(scheme, ul);
        }
        Ok(profile)
    }

    pub fn schemes(&self) -> impl Iterator<Item = ParallelScheme> + '_ {
        self.coeffs.keys().copied()
    }

    /// Schemes that fit in memory at all (MaxLen >= 1).
    pub fn feasible_schemes(&self) -> Vec<ParallelScheme> {
        self.schemes().filter(|s| self.max_len(*s).is_ok()).collect()
    }

    pub fn coeffs(&self, scheme: ParallelScheme) -> Result<LatencyCoeffs, CostError> {
        self.coeffs.get(&scheme).copied().ok_or(CostError::UnknownScheme(scheme))
    }

    pub fn coeff_map(&self) -> &BTreeMap<ParallelScheme, LatencyCoeffs> {
        &self.coeffs
    }

    /// `T(l, P)` in seconds for an integer token count.
    pub fn latency(&self, l: u64, scheme: ParallelScheme) -> Result<f64, CostError> {
        Ok(self.coeffs(scheme)?.eval(l as f64))
    }

    /// `T(l, P)` at a real-valued length (histogram midpoints).
    pub fn latency_at(&self, l: f64, scheme: ParallelScheme) -> Result<f64, CostError> {
        Ok(self.coeffs(scheme)?.eval(l))
    }

    /// Cached `MaxLen(P)`.
    pub fn max_len(&self, scheme: ParallelScheme) -> Result<u64, CostError> {
        match self.max_len_cache.get(&scheme) {
            Some(Some(v)) => Ok(*v),
            Some(None) => Err(self.infeasible_error(scheme)),
            None => self.compute_max_len(scheme),
        }
    }

    /// Cached `UtilLen(P)`.
    pub fn util_len(&self, scheme: ParallelScheme) -> Result<u64, CostError> {
        match self.util_len_cache.get(&scheme) {
            Some(Some(v)) => Ok(*v),
            Some(None) => Err(self.infeasible_error(scheme)),
            None => self.compute_util_len(scheme, self.util_threshold),
        }
    }

    fn infeasible_error(&self, scheme: ParallelScheme) -> CostError {
        let budget = (self.hardware.gpu_memory - self.hardware.safety_margin) as f64;
        CostError::Infeasible {
            scheme,
            state_bytes: self.state_bytes(scheme),
            budget_bytes: budget,
        }
    }

    /// Fixed per-GPU model-state cost (bytes), independent of sequence length.
    pub fn state_bytes(&self, scheme: ParallelScheme) -> f64 {
        let ModelShape { hidden, layers, vocab } = self.shape;
        let MemoryConstants { state_const, alpha, embed_factor, .. } = self.memory;
        let h = hidden as f64;
        let layers = f64::from(layers);
        let n = self.hardware.n_gpus as f64;
        let tp = f64::from(scheme.tp);
        let pp = f64::from(scheme.pp);
        let sharded = layers * h * h / n * state_const * alpha;
        let replicated = layers / pp * (h * h / tp) * state_const * (1.0 - alpha);
        let embed_sharded = h * vocab as f64 / n * embed_factor * alpha;
        let embed_replicated = h * vocab as f64 / tp * embed_factor * (1.0 - alpha);
        sharded + replicated + embed_sharded + embed_replicated
    }

    /// Peak activation bytes per token of packed sequence: the first stage
    /// accumulates all in-flight micro-batches, so the per-micro-batch cost
    /// times PP collapses to `layers * H / (tp*cp) * A` per token.
    pub fn activation_bytes_per_token(&self, scheme: ParallelScheme) -> f64 {
        let h = self.shape.hidden as f64;
        let layers = f64::from(self.shape.layers);
        layers * h / (f64::from(scheme.tp) * f64::from(scheme.cp)) * self.memory.act_const
    }

    /// Solve the linear memory inequality for the largest supportable packed
    /// length. Errors when the fixed state alone busts the budget.
    pub fn compute_max_len(&self, scheme: ParallelScheme) -> Result<u64, CostError> {
        let budget = (self.hardware.gpu_memory - self.hardware.safety_margin) as f64;
        let state = self.state_bytes(scheme);
        let per_token = self.activation_bytes_per_token(scheme);
        if state >= budget {
            return Err(self.infeasible_error(scheme));
        }
        let l = ((budget - state) / per_token).floor();
        if l < 1.0 {
            return Err(self.infeasible_error(scheme));
        }
        Ok(l as u64)
    }

    /// Smallest length whose token throughput `l / T(l)` reaches
    /// `threshold x` the peak throughput over `[1, MaxLen]`.
    pub fn compute_util_len(
        &self,
        scheme: ParallelScheme,
        threshold: f64,
    ) -> Result<u64, CostError> {
        let coeffs = self.coeffs(scheme)?;
        let max_len = self.compute_max_len(scheme)?;
        let eff = |l: u64| -> f64 {
            let t = coeffs.eval(l as f64);
            if t <= 0.0 {
                f64::INFINITY
            } else {
                l as f64 / t
            }
        };

        // l/T is unimodal for a,c >= 0: increasing up to sqrt(c/a), then
        // decreasing. Find the integer peak, then binary-search the rising
        // flank for the threshold crossing.
        let peak = if coeffs.a > 0.0 && coeffs.c > 0.0 {
            let p = (coeffs.c / coeffs.a).sqrt();
            let lo = (p.floor() as u64).clamp(1, max_len);
            let hi = (p.ceil() as u64).clamp(1, max_len);
            if eff(lo) >= eff(hi) {
                lo
            } else {
                hi
            }
        } else if coeffs.a == 0.0 && coeffs.c > 0.0 {
            max_len // efficiency keeps rising
        } else {
            1 // constant or strictly falling efficiency
        };
        let target = threshold * eff(peak);

        let (mut lo, mut hi) = (1u64, peak);
        while lo < hi {
            let mid = lo + (hi - lo) / 2;
            if eff(mid) >= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        if eff(lo) >= target {
            return Ok(lo);
        }
        // Fallback scan for a non-unimodal curve (degenerate coefficients).
        for l in 1..=max_len {
            if eff(l) >= target {
                return Ok(l);
            }
        }
        Ok(max_len)
    }

    /// Total bytes of 16-bit propagation state (parameters at tp = 1): the
    /// parameter volume the pull/push plans reshard.
    pub fn propagation_param_bytes(&self) -> u64 {
        let h = self.shape.hidden as f64;
        let layers = f64::from(self.shape.layers);
        let replicated_frac = 1.0 - self.memory.alpha;
        let body = layers * h * h * self.memory.state_const * replicated_frac;
        let embed = h * self.shape.vocab as f64 * self.memory.embed_factor * replicated_frac;
        (body + embed).round() as u64
    }

    /// Token count a micro-batch must reach before parameter-pull traffic can
    /// hide behind the matching matrix multiply: `ceil(tp * cp * F / B)`.
    pub fn overlap_threshold(&self, scheme: ParallelScheme) -> u64 {
        let t = f64::from(scheme.tp) * f64::from(scheme.cp) * self.hardware.flops
            / self.hardware.bandwidth;
        t.ceil().max(1.0) as u64
    }

    /// Audit helper: do the caches agree with fresh recomputation?
    pub fn audit_caches(&self) -> Result<(), String> {
        for scheme in self.schemes() {
            let fresh = self.compute_max_len(scheme).ok();
            let cached = self.max_len_cache.get(&scheme).copied().flatten();
            if fresh != cached {
                return Err(format!(
                    "max_len cache for {scheme}: cached {cached:?}, recomputed {fresh:?}"
                ));
            }
            let fresh_util = match fresh {
                Some(_) => self.compute_util_len(scheme, self.util_threshold).ok(),
                None => None,
            };
            let cached_util = self.util_len_cache.get(&scheme).copied().flatten();
            if fresh_util != cached_util {
                return Err(format!(
                    "util_len cache for {scheme}: cached {cached_util:?}, recomputed {fresh_util:?}"
                ));
            }
        }
        Ok(())
    }
}

/// Deterministic synthetic profiling: log-spaced lengths per scheme over
/// `[128, MaxLen]` (at least 12 points) with bounded multiplicative noise.
/// Stands in for GPU profiling at desk scale.
pub fn synth_profile(
    shape: ModelShape,
    hardware: HardwareSpec,
    memory: MemoryConstants,
    ground_truth: &BTreeMap<ParallelScheme, LatencyCoeffs>,
    noise: f64,
    seed: u64,
) -> Result<BTreeMap<ParallelScheme, Vec<(u64, f64)>>, CostError> {
    let shell = CostProfile::build(
        shape,
        hardware,
        memory,
        ground_truth.clone(),
        DEFAULT_UTIL_THRESHOLD,
    )?;
    let mut out = BTreeMap::new();
    for (idx, (scheme, coeffs)) in ground_truth.iter().enumerate() {
        let Ok(max_len) = shell.max_len(*scheme) else { continue };
        let grid = log_grid(128.min(max_len), max_len, 16);
        let mut rng =
            ChaCha8Rng::seed_from_u64(crate::seed::derive(seed, "synth-profile", idx as u64));
        let samples: Vec<(u64, f64)> = grid
            .iter()
            .map(|l| {
                let noisy = coeffs.eval(*l as f64)
                    * (1.0 + noise * (rng.random::<f64>() * 2.0 - 1.0));
                (*l, noisy)
            })
            .collect();
        out.insert(*scheme, samples);
    }
    Ok(out)
}

fn log_grid(lo: u64, hi: u64, points: usize) -> Vec<u64> {
    if hi <= lo {
        return vec![lo.max(1)];
    }
    let lo = lo.max(1);
    let ratio = hi as f64 / lo as f64;
    let mut grid: Vec<u64> = (0..points)
        .map(|i| {
            let f = i as f64 / (points - 1) as f64;
            (lo as f64 * ratio.powf(f)).round() as u64
        })
        .collect();
    grid.sort_unstable();
    grid.dedup();
    // A tight range can collapse log-spaced points; fall back to linear fill.
    if grid.len() < 12 && hi - lo >= 12 {
        grid = (0..points as u64)
            .map(|i| lo + (hi - lo) * i / (points as u64 - 1))
            .collect();
        grid.dedup();
    }
    grid
}

/// Plausible ground-truth coefficients for desk-scale experiments.
///
/// The quadratic term tracks attention flops per stage shard, the linear term
/// the matmul flops with an intra-op efficiency penalty, and the constant
/// term kernel-launch overhead per stage.
pub fn demo_coefficients(
    shape: &ModelShape,
    schemes: &[ParallelScheme],
) -> BTreeMap<ParallelScheme, LatencyCoeffs> {
    let h = shape.hidden as f64;
    let layers = f64::from(shape.layers);
    let eff_flops = 2.0e14;
    schemes
        .iter()
        .map(|p| {
            let tp = f64::from(p.tp);
            let pp = f64::from(p.pp);
            let cp = f64::from(p.cp);
            let shard = tp * cp * pp;
            // Intra-op parallelism pays in activation collectives: context
            // parallelism worst (ring attention exchanges per layer), tensor
            // parallelism next, and a steep surcharge once the intra-op group
            // tp*cp spills past the 8-GPU node boundary; pipeline stages
            // communicate little.
            let intra_pen = 1.0
                + 0.22 * tp.log2()
                + 0.35 * cp.log2()
                + (tp * cp / 8.0).log2().max(0.0);
            let a = 12.0 * h * layers / (shard * eff_flops) * (1.0 + 0.10 * (tp * cp).log2());
            let b = 72.0 * h * h * layers / (shard * eff_flops) * intra_pen;
            let c = layers / pp * 1.5e-4 + 2.0e-4 * (1.0 + 0.1 * tp.log2());
            (*p, LatencyCoeffs { a, b, c })
        })
        .collect()
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    /// A profile whose activation cost is exactly one byte per token for
    /// `tp = cp = 1`, so `MaxLen(<t,p,c>) ~ base_max_len * t * c`. Handy for
    /// packing/dispatch tests that need specific capacities.
    pub fn unit_profile(
        schemes: &[(ParallelScheme, LatencyCoeffs)],
        base_max_len: u64,
    ) -> CostProfile {
        let shape = ModelShape { hidden: 1, layers: 1, vocab: 1 };
        let coeffs: BTreeMap<_, _> = schemes.iter().copied().collect();
        // State cost lands in (0, 1) for every scheme, so the +1 byte of
        // headroom makes MaxLen come out exactly at base_max_len * tp * cp
        // for tp = cp = 1 schemes.
        let hardware = HardwareSpec {
            n_gpus: 64,
            gpu_memory: base_max_len + 1,
            flops: 1.0,
            bandwidth: 1.0,
            safety_margin: 0,
        };
        let memory = MemoryConstants {
            act_const: 1.0,
            state_const: 1.0,
            alpha: 0.5,
            embed_factor: 0.0,
        };
        CostProfile::build(shape, hardware, memory, coeffs, DEFAULT_UTIL_THRESHOLD).unwrap()
    }
}
