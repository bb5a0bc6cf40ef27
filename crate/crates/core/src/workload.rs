//! Sequence-length corpora: file ingestion, long-tail synthesis, mini-batch
//! sampling, and histograms.
//!
//! Lengths count tokens per original sequence. Mini-batches are sampled
//! uniformly with replacement under a token budget: each draw is truncated to
//! the context length first, and the first draw that reaches the budget is
//! kept, so `budget <= sum(lengths) < budget + context_length`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Pareto};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at record {record} of {path}: {message}")]
    Parse { path: String, record: usize, message: String },
    #[error("{path} contains no sequence lengths")]
    EmptyFile { path: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
}

/// On-disk formats for length corpora.
///
/// CSV is one integer per line; JSONL is `{"len": <int>}` per line; binary is
/// little-endian unsigned 32-bit integers with no header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LengthFormat {
    Csv,
    Jsonl,
    BinaryU32,
}

impl LengthFormat {
    /// Infer a format from a file extension (`csv`, `jsonl`, anything else
    /// is treated as binary).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => LengthFormat::Csv,
            Some("jsonl") => LengthFormat::Jsonl,
            _ => LengthFormat::BinaryU32,
        }
    }
}

/// A corpus of per-sequence token counts. Nonempty, every length >= 1.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthSample {
    lengths: Vec<u64>,
}

impl LengthSample {
    pub fn new(lengths: Vec<u64>) -> Result<Self, WorkloadError> {
        if lengths.is_empty() {
            return Err(WorkloadError::InvalidParam("length sample is empty".into()));
        }
        if let Some(i) = lengths.iter().position(|l| *l == 0) {
            return Err(WorkloadError::InvalidParam(format!("length at index {i} is zero")));
        }
        Ok(Self { lengths })
    }

    pub fn lengths(&self) -> &[u64] {
        &self.lengths
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn total_tokens(&self) -> u64 {
        self.lengths.iter().sum()
    }

    pub fn max_length(&self) -> u64 {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LengthDistribution {
    Lognormal { mu: f64, sigma: f64 },
    Pareto { alpha: f64, xmin: f64 },
}

/// Load a length corpus from disk. Lengths are returned in file order with no
/// filtering; a zero or malformed record is a parse error naming the record.
pub fn load_lengths(path: &Path, format: LengthFormat) -> Result<LengthSample, WorkloadError> {
    let path_str = path.display().to_string();
    let io_err = |source| WorkloadError::Io { path: path_str.clone(), source };
    let file = File::open(path).map_err(io_err)?;

    let mut lengths: Vec<u64> = Vec::new();
    match format {
        LengthFormat::Csv => {
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| WorkloadError::Io {
                    path: path_str.clone(),
                    source,
                })?;
                let trimmed = line.trim();
                if trimmed.is_empty() {
                    continue;
                }
                let value: u64 = trimmed.parse().map_err(|_| WorkloadError::Parse {
                    path: path_str.clone(),
                    record: idx + 1,
                    message: format!("{trimmed:?} is not a positive integer"),
                })?;
                if value == 0 {
                    return Err(WorkloadError::Parse {
                        path: path_str.clone(),
                        record: idx + 1,
                        message: "length must be >= 1".into(),
                    });
                }
                lengths.push(value);
            }
        }
        LengthFormat::Jsonl => {
            #[derive(Deserialize)]
            struct Record {
                len: u64,
            }
            for (idx, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|source| WorkloadError::Io {
                    path: path_str.clone(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: Record =
                    serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
                        path: path_str.clone(),
                        record: idx + 1,
                        message: e.to_string(),
                    })?;
                if rec.len == 0 {
                    return Err(WorkloadError::Parse {
                        path: path_str.clone(),
                        record: idx + 1,
                        message: "length must be >= 1".into(),
                    });
                }
                lengths.push(rec.len);
            }
        }
        LengthFormat::BinaryU32 => {
            let mut reader = BufReader::new(file);
            let mut buf = Vec::new();
            reader.read_to_end(&mut buf).map_err(io_err)?;
            if buf.len() % 4 != 0 {
                return Err(WorkloadError::Parse {
                    path: path_str.clone(),
                    record: buf.len() / 4 + 1,
                    message: format!("file size {} is not a multiple of 4 bytes", buf.len()),
                });
            }
            for (idx, chunk) in buf.chunks_exact(4).enumerate() {
                let value = u32::from_le_bytes(chunk.try_into().unwrap());
                if value == 0 {
                    return Err(WorkloadError::Parse {
                        path: path_str.clone(),
                        record: idx + 1,
                        message: "length must be >= 1".into(),
                    });
                }
                lengths.push(u64::from(value));
            }
        }
    }

    if lengths.is_empty() {
        return Err(WorkloadError::EmptyFile { path: path_str });
    }
    LengthSample::new(lengths)
}

/// Write a corpus in the given format (inverse of [`load_lengths`]).
pub fn save_lengths(
    path: &Path,
    format: LengthFormat,
    sample: &LengthSample,
) -> Result<(), WorkloadError> {
    let path_str = path.display().to_string();
    let io_err = |source| WorkloadError::Io { path: path_str.clone(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let result: std::io::Result<()> = (|| {
        match format {
            LengthFormat::Csv => {
                for l in sample.lengths() {
                    writeln!(w, "{l}")?;
                }
            }
            LengthFormat::Jsonl => {
                for l in sample.lengths() {
                    writeln!(w, "{{\"len\": {l}}}")?;
                }
            }
            LengthFormat::BinaryU32 => {
                for l in sample.lengths() {
                    let v = u32::try_from(*l).map_err(|_| {
                        std::io::Error::new(
                            std::io::ErrorKind::InvalidData,
                            format!("length {l} does not fit in u32"),
                        )
                    })?;
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.flush()
    })();
    result.map_err(io_err)
}

/// Synthesize a long-tail corpus of `n` lengths, each clamped to
/// `[1, context_length]`. Deterministic for a fixed seed.
pub fn synth_longtail(
    distribution: LengthDistribution,
    n: usize,
    context_length: u64,
    seed: u64,
) -> Result<LengthSample, WorkloadError> {
    if n == 0 {
        return Err(WorkloadError::InvalidParam("n must be >= 1".into()));
    }
    if context_length == 0 {
        return Err(WorkloadError::InvalidParam("context_length must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clamp = |x: f64| -> u64 { (x.round().max(1.0) as u64).min(context_length) };
    let lengths: Vec<u64> = match distribution {
        LengthDistribution::Lognormal { mu, sigma } => {
            let dist = LogNormal::new(mu, sigma)
                .map_err(|e| WorkloadError::InvalidParam(format!("lognormal: {e}")))?;
            (0..n).map(|_| clamp(dist.sample(&mut rng))).collect()
        }
        LengthDistribution::Pareto { alpha, xmin } => {
            if xmin < 1.0 {
                return Err(WorkloadError::InvalidParam("pareto xmin must be >= 1".into()));
            }
            let dist = Pareto::new(xmin, alpha)
                .map_err(|e| WorkloadError::InvalidParam(format!("pareto: {e}")))?;
            (0..n).map(|_| clamp(dist.sample(&mut rng))).collect()
        }
    };
    LengthSample::new(lengths)
}

/// One iteration's worth of sequences, sampled under a token budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MiniBatch {
    pub lengths: Vec<u64>,
    pub token_budget: u64,
    pub seed: u64,
}

impl MiniBatch {
    pub fn total_tokens(&self) -> u64 {
        self.lengths.iter().sum()
    }

    pub fn max_length(&self) -> u64 {
        self.lengths.iter().copied().max().unwrap_or(0)
    }
}

/// Draw a mini-batch: uniform with replacement, truncating each draw to
/// `context_length`, stopping at the first draw that brings the cumulative
/// token count to `token_budget` or beyond.
pub fn sample_minibatch(
    sample: &LengthSample,
    token_budget: u64,
    context_length: u64,
    seed: u64,
) -> Result<MiniBatch, WorkloadError> {
    if token_budget == 0 {
        return Err(WorkloadError::InvalidParam("token_budget must be >= 1".into()));
    }
    if context_length == 0 {
        return Err(WorkloadError::InvalidParam("context_length must be >= 1".into()));
    }
    if sample.is_empty() {
        return Err(WorkloadError::InvalidParam("length sample is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool = sample.lengths();
    let mut lengths = Vec::new();
    let mut total = 0u64;
    while total < token_budget {
        let drawn = pool[rng.random_range(0..pool.len())].min(context_length);
        lengths.push(drawn);
        total += drawn;
    }
    Ok(MiniBatch { lengths, token_budget, seed })
}

/// How a histogram's totals were computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HistogramMode {
    /// Built from raw lengths; `total_tokens` is the exact sum.
    Exact,
    /// Built from bin counts only; `total_tokens` uses bin midpoints.
    Midpoint,
}

/// Binned view of a corpus: bin k counts lengths in `(k*w, (k+1)*w]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub bin_width: u64,
    pub counts: Vec<u64>,
    pub total_sequences: u64,
    pub total_tokens: u64,
    pub mode: HistogramMode,
}

impl LengthHistogram {
    /// Midpoint of bin `k` as a real length, e.g. bin 0 of width 128 covers
    /// integer lengths 1..=128 and has midpoint 64.5.
    pub fn bin_midpoint(&self, k: usize) -> f64 {
        k as f64 * self.bin_width as f64 + (self.bin_width as f64 + 1.0) / 2.0
    }

    /// Upper edge (inclusive) of bin `k` in tokens.
    pub fn bin_upper(&self, k: usize) -> u64 {
        (k as u64 + 1) * self.bin_width
    }

    /// Largest length representable by the populated bins.
    pub fn max_binned_length(&self) -> u64 {
        self.counts.len() as u64 * self.bin_width
    }

    pub fn from_counts(bin_width: u64, counts: Vec<u64>) -> Result<Self, WorkloadError> {
        if bin_width == 0 {
            return Err(WorkloadError::InvalidParam("bin_width must be >= 1".into()));
        }
        let total_sequences: u64 = counts.iter().sum();
        let mut total_tokens = 0f64;
        for (k, c) in counts.iter().enumerate() {
            total_tokens +=
                *c as f64 * (k as f64 * bin_width as f64 + (bin_width as f64 + 1.0) / 2.0);
        }
        Ok(Self {
            bin_width,
            counts,
            total_sequences,
            total_tokens: total_tokens.round() as u64,
            mode: HistogramMode::Midpoint,
        })
    }
}

/// Bin a corpus. Conservation: the counts always sum to the corpus size.
pub fn build_histogram(
    sample: &LengthSample,
    bin_width: u64,
) -> Result<LengthHistogram, WorkloadError> {
    if bin_width == 0 {
        return Err(WorkloadError::InvalidParam("bin_width must be >= 1".into()));
    }
    let max_bin = sample.lengths().iter().map(|l| (l - 1) / bin_width).max().unwrap_or(0);
    let mut counts = vec![0u64; (max_bin + 1) as usize];
    for l in sample.lengths() {
        counts[((l - 1) / bin_width) as usize] += 1;
    }
    Ok(LengthHistogram {
        bin_width,
        counts,
        total_sequences: sample.len() as u64,
        total_tokens: sample.total_tokens(),
        mode: HistogramMode::Exact,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_parses_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.csv");
        std::fs::write(&path, "3\n5\n7\n").unwrap();
        let sample = load_lengths(&path, LengthFormat::Csv).unwrap();
        assert_eq!(sample.lengths(), &[3, 5, 7]);
    }

    #[test]
    fn jsonl_single_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.jsonl");
        std::fs::write(&path, "{\"len\": 1}\n").unwrap();
        let sample = load_lengths(&path, LengthFormat::Jsonl).unwrap();
        assert_eq!(sample.lengths(), &[1]);
    }

    #[test]
    fn parse_error_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.csv");
        std::fs::write(&path, "3\nfive\n7\n").unwrap();
        match load_lengths(&path, LengthFormat::Csv) {
            Err(WorkloadError::Parse { record, .. }) => assert_eq!(record, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_binary_record_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.bin");
        std::fs::write(&path, [1u8, 0, 0, 0, 2, 0]).unwrap(); // 6 bytes
        match load_lengths(&path, LengthFormat::BinaryU32) {
            Err(WorkloadError::Parse { record, .. }) => assert_eq!(record, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        std::fs::write(&path, b"").unwrap();
        assert!(matches!(
            load_lengths(&path, LengthFormat::BinaryU32),
            Err(WorkloadError::EmptyFile { .. })
        ));
    }

    #[test]
    fn binary_round_trip_preserves_large_corpus() {
        let sample = synth_longtail(
            LengthDistribution::Lognormal { mu: 6.0, sigma: 1.0 },
            50_000,
            32_768,
            11,
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lens.bin");
        save_lengths(&path, LengthFormat::BinaryU32, &sample).unwrap();
        let back = load_lengths(&path, LengthFormat::BinaryU32).unwrap();
        assert_eq!(back, sample);
        assert_eq!(back.total_tokens(), sample.total_tokens());
    }

    #[test]
    fn synth_is_deterministic() {
        let d = LengthDistribution::Lognormal { mu: 6.9, sigma: 1.2 };
        let a = synth_longtail(d, 10_000, 32_768, 7).unwrap();
        let b = synth_longtail(d, 10_000, 32_768, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pareto_at_context_saturates() {
        let d = LengthDistribution::Pareto { alpha: 2.0, xmin: 32_768.0 };
        let sample = synth_longtail(d, 100, 32_768, 3).unwrap();
        assert!(sample.lengths().iter().all(|l| *l == 32_768));
    }

    #[test]
    fn lognormal_median_close_to_closed_form() {
        // Median of lognormal(mu, sigma) is exp(mu); clamping barely moves it
        // for these parameters.
        let mu = 6.9;
        let sample = synth_longtail(
            LengthDistribution::Lognormal { mu, sigma: 1.2 },
            100_000,
            32_768,
            42,
        )
        .unwrap();
        let mut sorted = sample.lengths().to_vec();
        sorted.sort_unstable();
        let median = sorted[sorted.len() / 2] as f64;
        let expected = mu.exp();
        assert!(
            (median - expected).abs() / expected < 0.05,
            "median {median} vs exp(mu) {expected}"
        );
    }

    #[test]
    fn forced_truncation_fills_the_budget() {
        let sample = LengthSample::new(vec![50_000]).unwrap();
        let mb = sample_minibatch(&sample, 100_000, 32_768, 9).unwrap();
        assert_eq!(mb.lengths, vec![32_768, 32_768, 32_768, 32_768]);
    }

    #[test]
    fn unit_budget_draws_exactly_one() {
        let sample = LengthSample::new(vec![5, 9, 2]).unwrap();
        let mb = sample_minibatch(&sample, 1, 100, 0).unwrap();
        assert_eq!(mb.lengths.len(), 1);
    }

    #[test]
    fn histogram_bins_are_right_closed() {
        let sample = LengthSample::new(vec![1, 128, 129]).unwrap();
        let hist = build_histogram(&sample, 128).unwrap();
        assert_eq!(hist.counts, vec![2, 1]);
        assert_eq!(hist.total_sequences, 3);
        assert_eq!(hist.total_tokens, 258);
    }

    #[test]
    fn histogram_totals_match_direct_sums() {
        let sample = synth_longtail(
            LengthDistribution::Lognormal { mu: 5.5, sigma: 1.3 },
            10_000,
            16_384,
            21,
        )
        .unwrap();
        let hist = build_histogram(&sample, 256).unwrap();
        let direct_count = sample.len() as u64;
        let direct_tokens: u64 = sample.lengths().iter().sum();
        assert_eq!(hist.counts.iter().sum::<u64>(), direct_count);
        assert_eq!(hist.total_tokens, direct_tokens);
    }

    proptest! {
        #[test]
        fn budget_bracketing_holds(seed in 0u64..1000) {
            let sample = synth_longtail(
                LengthDistribution::Lognormal { mu: 6.9, sigma: 1.2 },
                2_000,
                32_768,
                1234,
            ).unwrap();
            let budget = 100_000;
            let context = 32_768;
            let mb = sample_minibatch(&sample, budget, context, seed).unwrap();
            let total = mb.total_tokens();
            prop_assert!(total >= budget);
            prop_assert!(total < budget + context);
            prop_assert!(total - mb.lengths.last().unwrap() < budget);
            prop_assert!(mb.max_length() <= context);
            // determinism
            let again = sample_minibatch(&sample, budget, context, seed).unwrap();
            prop_assert_eq!(again, mb);
        }

        #[test]
        fn histogram_conserves_counts(bin_width in 1u64..512, seed in 0u64..50) {
            let sample = synth_longtail(
                LengthDistribution::Lognormal { mu: 5.0, sigma: 1.0 },
                500,
                8192,
                seed,
            ).unwrap();
            let hist = build_histogram(&sample, bin_width).unwrap();
            prop_assert_eq!(hist.counts.iter().sum::<u64>(), sample.len() as u64);
        }
    }
}
