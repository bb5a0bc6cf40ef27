//! Parallel schemes `<TP,PP,CP>` and heterogeneous strategies.
//!
//! A *scheme* configures one training pipeline; a *strategy* is a linear
//! combination of schemes, one term per distinct scheme with a pipeline
//! count. The text form `"2x4x1*2+1x1x1*8"` is the canonical serialization
//! used in configs, plan files, and reports.

use std::fmt;
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("invalid scheme text {0:?}: expected TPxPPxCP with positive integers")]
    BadSchemeText(String),
    #[error("invalid strategy text {0:?}: {1}")]
    BadStrategyText(String, String),
    #[error("no valid scheme: every combination violates the GPU or layer-divisibility bound")]
    EmptySchemeSpace,
}

/// Parallel configuration of one pipeline: tensor, pipeline, and context
/// parallel degrees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParallelScheme {
    pub tp: u32,
    pub pp: u32,
    pub cp: u32,
}

impl ParallelScheme {
    pub fn new(tp: u32, pp: u32, cp: u32) -> Self {
        assert!(tp >= 1 && pp >= 1 && cp >= 1, "parallel degrees must be >= 1");
        Self { tp, pp, cp }
    }

    /// GPUs a single pipeline with this scheme occupies.
    pub fn gpus(&self) -> u64 {
        u64::from(self.tp) * u64::from(self.pp) * u64::from(self.cp)
    }
}

impl fmt::Display for ParallelScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.tp, self.pp, self.cp)
    }
}

impl FromStr for ParallelScheme {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || SchemeError::BadSchemeText(s.to_string());
        let mut it = s.split('x');
        let mut next = || -> Result<u32, SchemeError> {
            it.next()
                .and_then(|p| p.trim().parse::<u32>().ok())
                .filter(|v| *v >= 1)
                .ok_or_else(bad)
        };
        let (tp, pp, cp) = (next()?, next()?, next()?);
        if it.next().is_some() {
            return Err(bad());
        }
        Ok(ParallelScheme { tp, pp, cp })
    }
}

impl Serialize for ParallelScheme {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ParallelScheme {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Domains the scheme space is enumerated over.
#[derive(Debug, Clone)]
pub struct SchemeDomains {
    pub tp: Vec<u32>,
    pub pp: Vec<u32>,
    pub cp: Vec<u32>,
}

impl SchemeDomains {
    /// Hardware-realistic default: powers of two for TP and CP, all divisors
    /// of the layer count for PP. The full `{1..N}` domains are allowed but
    /// explode the space.
    pub fn default_for(n_gpus: u64, n_layers: u32) -> Self {
        let pows: Vec<u32> = (0..)
            .map(|e| 1u32 << e)
            .take_while(|v| u64::from(*v) <= n_gpus)
            .collect();
        let divisors: Vec<u32> = (1..=n_layers)
            .filter(|d| n_layers % d == 0 && u64::from(*d) <= n_gpus)
            .collect();
        Self { tp: pows.clone(), pp: divisors, cp: pows }
    }
}

/// Enumerate every scheme with `tp*pp*cp <= n_gpus` and `pp` dividing the
/// layer count, deduplicated, in deterministic tp-major order.
pub fn enumerate_schemes(
    n_gpus: u64,
    n_layers: u32,
    domains: &SchemeDomains,
) -> Result<Vec<ParallelScheme>, SchemeError> {
    let mut tp_dom = domains.tp.clone();
    let mut pp_dom: Vec<u32> =
        domains.pp.iter().copied().filter(|p| n_layers % p == 0).collect();
    let mut cp_dom = domains.cp.clone();
    for d in [&mut tp_dom, &mut pp_dom, &mut cp_dom] {
        d.sort_unstable();
        d.dedup();
    }

    let mut out = Vec::new();
    for &tp in &tp_dom {
        for &pp in &pp_dom {
            for &cp in &cp_dom {
                if tp >= 1
                    && pp >= 1
                    && cp >= 1
                    && u64::from(tp) * u64::from(pp) * u64::from(cp) <= n_gpus
                {
                    out.push(ParallelScheme { tp, pp, cp });
                }
            }
        }
    }
    if out.is_empty() {
        return Err(SchemeError::EmptySchemeSpace);
    }
    Ok(out)
}

/// One term of a strategy: `count` pipelines deployed with `scheme`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyTerm {
    pub scheme: ParallelScheme,
    pub count: u32,
}

/// A heterogeneous parallel strategy: a multiset of schemes across pipelines.
///
/// Terms are kept in a canonical order (descending GPUs per pipeline, then
/// descending tp, pp, cp) with duplicates merged, so equal strategies have
/// equal text forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Strategy {
    terms: Vec<StrategyTerm>,
}

impl Strategy {
    pub fn new(terms: Vec<(ParallelScheme, u32)>) -> Self {
        let mut merged: Vec<StrategyTerm> = Vec::new();
        for (scheme, count) in terms {
            if count == 0 {
                continue;
            }
            match merged.iter_mut().find(|t| t.scheme == scheme) {
                Some(t) => t.count += count,
                None => merged.push(StrategyTerm { scheme, count }),
            }
        }
        merged.sort_by(|a, b| {
            (b.scheme.gpus(), b.scheme.tp, b.scheme.pp, b.scheme.cp)
                .cmp(&(a.scheme.gpus(), a.scheme.tp, a.scheme.pp, a.scheme.cp))
        });
        Self { terms: merged }
    }

    pub fn homogeneous(scheme: ParallelScheme, count: u32) -> Self {
        Self::new(vec![(scheme, count)])
    }

    pub fn terms(&self) -> &[StrategyTerm] {
        &self.terms
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// True when every pipeline uses the same scheme.
    pub fn is_homogeneous(&self) -> bool {
        self.terms.len() == 1
    }

    pub fn total_gpus(&self) -> u64 {
        self.terms.iter().map(|t| t.scheme.gpus() * u64::from(t.count)).sum()
    }

    /// Number of pipelines (the D in dispatching).
    pub fn pipeline_count(&self) -> usize {
        self.terms.iter().map(|t| t.count as usize).sum()
    }

    /// Gradient-scatter replica factor: sum of count * CP over all terms.
    pub fn d_cp(&self) -> u64 {
        self.terms
            .iter()
            .map(|t| u64::from(t.count) * u64::from(t.scheme.cp))
            .sum()
    }

    pub fn tp_max(&self) -> u32 {
        self.terms.iter().map(|t| t.scheme.tp).max().unwrap_or(1)
    }

    /// Flat pipeline list in canonical term order.
    pub fn expand(&self) -> Vec<ParallelScheme> {
        let mut out = Vec::with_capacity(self.pipeline_count());
        for t in &self.terms {
            for _ in 0..t.count {
                out.push(t.scheme);
            }
        }
        out
    }

    pub fn text(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "empty");
        }
        let parts: Vec<String> =
            self.terms.iter().map(|t| format!("{}*{}", t.scheme, t.count)).collect();
        write!(f, "{}", parts.join("+"))
    }
}

impl FromStr for Strategy {
    type Err = SchemeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = |m: &str| SchemeError::BadStrategyText(s.to_string(), m.to_string());
        let mut terms = Vec::new();
        for part in s.split('+') {
            let part = part.trim();
            if part.is_empty() {
                return Err(bad("empty term"));
            }
            let (scheme_txt, count) = match part.split_once('*') {
                Some((sch, cnt)) => {
                    let count: u32 = cnt
                        .trim()
                        .parse()
                        .map_err(|_| bad("count is not an integer"))?;
                    (sch, count)
                }
                None => (part, 1),
            };
            if count == 0 {
                return Err(bad("zero pipeline count"));
            }
            let scheme: ParallelScheme = scheme_txt.trim().parse()?;
            terms.push((scheme, count));
        }
        if terms.is_empty() {
            return Err(bad("no terms"));
        }
        Ok(Strategy::new(terms))
    }
}

impl Serialize for Strategy {
    fn serialize<S: Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        ser.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Strategy {
    fn deserialize<D: Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(de::Error::custom)
    }
}

/// Result of validating a strategy against a cluster. Reports every
/// violation, not just the first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<String>,
}

impl ValidationReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check the GPU budget and per-scheme invariants of `strategy` on a cluster
/// of `n_gpus`.
pub fn validate_strategy(strategy: &Strategy, n_gpus: u64) -> ValidationReport {
    let mut violations = Vec::new();
    if strategy.is_empty() {
        violations.push("strategy has no pipelines".to_string());
    }
    let total = strategy.total_gpus();
    if total > n_gpus {
        violations.push(format!("strategy needs {total} GPUs but the cluster has {n_gpus}"));
    }
    for term in strategy.terms() {
        let g = term.scheme.gpus();
        if g > n_gpus {
            violations.push(format!(
                "scheme {} needs {g} GPUs per pipeline, exceeding the cluster size {n_gpus}",
                term.scheme
            ));
        }
    }
    ValidationReport { violations }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(txt: &str) -> ParallelScheme {
        txt.parse().unwrap()
    }

    #[test]
    fn gpus_is_the_product() {
        assert_eq!(s("2x4x1").gpus(), 8);
        assert_eq!(s("1x1x1").gpus(), 1);
        assert_eq!(s("16x1x1").gpus(), 16);
    }

    #[test]
    fn enumeration_respects_both_constraints() {
        let domains = SchemeDomains::default_for(8, 32);
        let schemes = enumerate_schemes(8, 32, &domains).unwrap();
        assert!(schemes.contains(&s("2x4x1")));
        assert!(schemes.contains(&s("8x1x1")));
        assert!(!schemes.contains(&s("8x2x1"))); // product 16 > 8
        for p in &schemes {
            assert!(p.gpus() <= 8);
            assert!(32 % p.pp == 0);
        }
    }

    #[test]
    fn enumeration_on_one_gpu() {
        let domains = SchemeDomains::default_for(1, 4);
        let schemes = enumerate_schemes(1, 4, &domains).unwrap();
        assert_eq!(schemes, vec![s("1x1x1")]);
    }

    #[test]
    fn pp_must_divide_layers() {
        let domains = SchemeDomains {
            tp: vec![1],
            pp: vec![1, 2, 3, 4, 5, 6],
            cp: vec![1],
        };
        let schemes = enumerate_schemes(16, 30, &domains).unwrap();
        let pps: Vec<u32> = schemes.iter().map(|p| p.pp).collect();
        assert!(pps.contains(&5));
        assert!(!pps.contains(&4)); // 4 does not divide 30
    }

    #[test]
    fn enumeration_is_tp_major_and_deduplicated() {
        let domains = SchemeDomains { tp: vec![2, 1, 1], pp: vec![1], cp: vec![1, 2] };
        let schemes = enumerate_schemes(4, 8, &domains).unwrap();
        assert_eq!(schemes, vec![s("1x1x1"), s("1x1x2"), s("2x1x1"), s("2x1x2")]);
    }

    #[test]
    fn strategy_text_round_trip() {
        let st = Strategy::new(vec![(s("1x1x1"), 4), (s("2x4x1"), 2), (s("1x1x1"), 4)]);
        assert_eq!(st.text(), "2x4x1*2+1x1x1*8");
        let back: Strategy = st.text().parse().unwrap();
        assert_eq!(back, st);
        assert_eq!(back.pipeline_count(), 10);
        assert_eq!(back.total_gpus(), 24);
    }

    #[test]
    fn strategy_parse_accepts_implicit_count() {
        let st: Strategy = "8x1x1+2x1x1*2".parse().unwrap();
        assert_eq!(st.total_gpus(), 12);
        assert_eq!(st.pipeline_count(), 3);
    }

    #[test]
    fn validation_reports_budget_violations() {
        let ok = Strategy::new(vec![(s("2x1x1"), 4)]);
        assert!(validate_strategy(&ok, 8).ok());

        let over = Strategy::new(vec![(s("8x1x1"), 1), (s("2x1x1"), 1)]);
        let report = validate_strategy(&over, 8);
        assert!(!report.ok());
        assert_eq!(report.violations.len(), 1);

        let two = Strategy::new(vec![(s("2x4x1"), 2)]);
        assert!(validate_strategy(&two, 16).ok());
    }

    #[test]
    fn enumerated_schemes_validate_as_homogeneous_strategies() {
        let domains = SchemeDomains::default_for(8, 32);
        for scheme in enumerate_schemes(8, 32, &domains).unwrap() {
            if 8 % scheme.gpus() == 0 {
                let st = Strategy::homogeneous(scheme, (8 / scheme.gpus()) as u32);
                assert!(validate_strategy(&st, 8).ok(), "{st}");
            }
        }
    }

    #[test]
    fn d_cp_counts_context_replicas() {
        let st: Strategy = "2x1x2*2+1x1x1*3".parse().unwrap();
        assert_eq!(st.d_cp(), 2 * 2 + 3);
        assert_eq!(st.tp_max(), 2);
    }
}
