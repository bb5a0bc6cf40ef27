//! On-disk artifact schemas.
//!
//! Every artifact embeds `schema_version` and the `RunConfig` that produced
//! it, so a run is reproducible from its own outputs and identical
//! invocations are byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use hydra_core::artifact::{self, SCHEMA_VERSION};
use hydra_core::cost::{
    CostProfile, FitResidual, HardwareSpec, LatencyCoeffs, MemoryConstants, ModelShape,
};
use hydra_core::planner::{CandidateReport, StrategyPlan};
use hydra_core::proposal::{Candidate, CandidateSet, Provenance};
use hydra_core::scheme::ParallelScheme;
use hydra_core::sim::SimReport;
use hydra_core::workload::MiniBatch;

/// Everything needed to reproduce a command, embedded in its outputs.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub candidates: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token_budget: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_length: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<u32>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trials: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dispatch_exact_limit: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pack_exact_cutover: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub overlap: Option<String>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub penalize_empty: bool,
}

/// Ground-truth or fitted per-scheme coefficients plus the model/hardware
/// context they belong to.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFile {
    pub schema_version: u32,
    pub model: ModelShape,
    pub hardware: HardwareSpec,
    pub memory: MemoryConstants,
    pub coeffs: BTreeMap<String, LatencyCoeffs>,
}

/// Raw profiling samples per scheme: `(tokens, seconds)` pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplesFile {
    pub schema_version: u32,
    pub model: ModelShape,
    pub hardware: HardwareSpec,
    pub memory: MemoryConstants,
    pub samples: BTreeMap<String, Vec<(u64, f64)>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CacheEntry {
    pub max_len: Option<u64>,
    pub util_len: Option<u64>,
}

/// The cost profile artifact: coefficients keyed by scheme text plus the
/// derived capacity caches, re-audited on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileFile {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub model: ModelShape,
    pub hardware: HardwareSpec,
    pub memory: MemoryConstants,
    pub util_threshold: f64,
    pub coeffs: BTreeMap<String, LatencyCoeffs>,
    pub caches: BTreeMap<String, CacheEntry>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub fit_residuals: BTreeMap<String, FitResidual>,
}

impl ProfileFile {
    pub fn from_profile(
        profile: &CostProfile,
        run_config: RunConfig,
        fit_residuals: BTreeMap<String, FitResidual>,
    ) -> Self {
        let coeffs = profile
            .coeff_map()
            .iter()
            .map(|(s, c)| (s.to_string(), *c))
            .collect();
        let caches = profile
            .schemes()
            .map(|s| {
                (
                    s.to_string(),
                    CacheEntry {
                        max_len: profile.max_len(s).ok(),
                        util_len: profile.util_len(s).ok(),
                    },
                )
            })
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            run_config,
            model: profile.shape,
            hardware: profile.hardware,
            memory: profile.memory,
            util_threshold: profile.util_threshold,
            coeffs,
            caches,
            fit_residuals,
        }
    }

    /// Rebuild the profile and verify the stored caches against fresh
    /// recomputation.
    pub fn to_profile(&self, path: &Path) -> Result<CostProfile> {
        artifact::check_schema(path, self.schema_version)?;
        let coeffs = parse_scheme_map(&self.coeffs)?;
        let profile = CostProfile::build(
            self.model,
            self.hardware,
            self.memory,
            coeffs,
            self.util_threshold,
        )?;
        for (text, entry) in &self.caches {
            let scheme: ParallelScheme = text
                .parse()
                .with_context(|| format!("bad scheme key {text:?} in {}", path.display()))?;
            let fresh = CacheEntry {
                max_len: profile.max_len(scheme).ok(),
                util_len: profile.util_len(scheme).ok(),
            };
            if fresh.max_len != entry.max_len || fresh.util_len != entry.util_len {
                bail!(
                    "audit failure: cache for {text} in {} is stale (stored {:?}/{:?}, recomputed {:?}/{:?})",
                    path.display(),
                    entry.max_len,
                    entry.util_len,
                    fresh.max_len,
                    fresh.util_len
                );
            }
        }
        profile.audit_caches().map_err(|e| anyhow::anyhow!("audit failure: {e}"))?;
        Ok(profile)
    }
}

pub fn parse_scheme_map(
    map: &BTreeMap<String, LatencyCoeffs>,
) -> Result<BTreeMap<ParallelScheme, LatencyCoeffs>> {
    map.iter()
        .map(|(k, v)| {
            let scheme: ParallelScheme =
                k.parse().with_context(|| format!("bad scheme key {k:?}"))?;
            Ok((scheme, *v))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub strategy: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidatesFile {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub n_gpus: u64,
    pub l_max: u64,
    pub strategies: Vec<CandidateEntry>,
}

impl CandidatesFile {
    pub fn from_set(set: &CandidateSet, run_config: RunConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            run_config,
            n_gpus: set.n_gpus,
            l_max: set.l_max,
            strategies: set
                .strategies
                .iter()
                .map(|c| CandidateEntry {
                    strategy: c.strategy.text(),
                    provenance: c.provenance.clone(),
                })
                .collect(),
        }
    }

    /// Parse and re-validate every candidate against the cluster size.
    pub fn to_set(&self, path: &Path) -> Result<CandidateSet> {
        artifact::check_schema(path, self.schema_version)?;
        let mut strategies = Vec::with_capacity(self.strategies.len());
        for entry in &self.strategies {
            let strategy: hydra_core::Strategy = entry
                .strategy
                .parse()
                .with_context(|| format!("bad strategy {:?}", entry.strategy))?;
            let report = hydra_core::scheme::validate_strategy(&strategy, self.n_gpus);
            if !report.ok() {
                bail!(
                    "audit failure: candidate {} in {} is invalid: {}",
                    entry.strategy,
                    path.display(),
                    report.violations.join("; ")
                );
            }
            strategies.push(Candidate { strategy, provenance: entry.provenance.clone() });
        }
        Ok(CandidateSet { n_gpus: self.n_gpus, l_max: self.l_max, strategies })
    }
}

/// One planned iteration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanFile {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub iteration: u32,
    pub minibatch: MiniBatch,
    pub selected: StrategyPlan,
    pub reports: Vec<CandidateReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub iteration: u32,
    pub strategy: String,
    pub estimated_latency: f64,
    pub sequences: usize,
    pub tokens: u64,
    pub empty_pipelines: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSummaryFile {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub iterations: u32,
    pub selections: Vec<SelectionSummary>,
    /// How often each strategy won, summing to `iterations`.
    pub strategy_frequencies: BTreeMap<String, u32>,
    pub mean_estimated_latency: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimFile {
    pub schema_version: u32,
    pub run_config: RunConfig,
    pub iteration: u32,
    pub report: SimReport,
}

pub fn write<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    artifact::write_json(path, value)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    artifact::read_json(path).with_context(|| format!("reading {}", path.display()))
}
