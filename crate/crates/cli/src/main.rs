//! `hydra-planner`: plan and simulate heterogeneous parallel training for
//! variable-length-sequence Transformer workloads, entirely on CPU.
//!
//! Typical pipeline:
//!
//! ```text
//! hydra-planner synth    -> dataset file (sequence lengths)
//! hydra-planner fit      -> cost profile (latency coefficients + capacities)
//! hydra-planner propose  -> candidate strategy set
//! hydra-planner plan     -> per-iteration strategy plans
//! hydra-planner simulate -> simulated latencies, comm plans, ablation
//! hydra-planner report   -> aggregate tables
//! ```
//!
//! Exit codes: 0 success, 1 infeasibility or audit failure, 2 usage error.
//! `HYDRA_PLANNER_THREADS` caps worker parallelism.

mod files;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hydra_core::artifact::SCHEMA_VERSION;
use hydra_core::comm;
use hydra_core::cost::{
    self, CostProfile, HardwareSpec, MemoryConstants, ModelShape, DEFAULT_UTIL_THRESHOLD,
};
use hydra_core::planner::{self, PlanOptions};
use hydra_core::proposal::{self, DpSteps, ProposeOptions};
use hydra_core::scheme::{enumerate_schemes, SchemeDomains};
use hydra_core::seed;
use hydra_core::sim::{self, OverlapMode, SimConfig};
use hydra_core::workload::{
    self, LengthDistribution, LengthFormat, LengthSample, MiniBatch,
};

use files::{
    CandidatesFile, PlanFile, PlanSummaryFile, ProfileFile, RunConfig, SamplesFile,
    SelectionSummary, SimFile, TruthFile,
};

#[derive(Parser)]
#[command(name = "hydra-planner", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a long-tail sequence-length corpus.
    Synth(SynthArgs),
    /// Summarize a corpus: totals and a length histogram.
    Stats(StatsArgs),
    /// Fit latency coefficients and build a cost profile.
    Fit(FitArgs),
    /// Propose candidate strategies from the dataset distribution.
    Propose(ProposeArgs),
    /// Select a strategy per iteration via the two-stage assignment.
    Plan(PlanArgs),
    /// Replay plans through the pipeline simulator, with optional
    /// communication-plan export and the ablation ladder.
    Simulate(SimulateArgs),
    /// Aggregate simulation outputs into tables.
    Report(ReportArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DistKind {
    Lognormal,
    Pareto,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, value_enum, default_value = "lognormal")]
    dist: DistKind,
    /// Log-mean of the lognormal distribution.
    #[arg(long, default_value_t = 6.9)]
    mu: f64,
    /// Log-stddev of the lognormal distribution.
    #[arg(long, default_value_t = 1.2)]
    sigma: f64,
    /// Shape parameter of the Pareto distribution.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    /// Scale (minimum) of the Pareto distribution.
    #[arg(long, default_value_t = 1.0)]
    xmin: f64,
    /// Number of sequences to draw.
    #[arg(long)]
    n: usize,
    /// Context length; draws are clamped to [1, context].
    #[arg(long)]
    context: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; format inferred from the extension (.csv, .jsonl,
    /// anything else is binary little-endian u32).
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 128)]
    bin_width: u64,
    /// Write the JSON summary here instead of stdout.
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Profiling samples file (JSON).
    #[arg(long, conflicts_with_all = ["truth", "demo"])]
    samples: Option<PathBuf>,
    /// Ground-truth coefficients file (JSON); samples are synthesized.
    #[arg(long, conflicts_with = "demo")]
    truth: Option<PathBuf>,
    /// Use built-in demonstration coefficients for the given cluster.
    #[arg(long)]
    demo: bool,
    /// Multiplicative sampling noise fraction.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_UTIL_THRESHOLD)]
    util_threshold: f64,
    // Cluster/model description, used by --demo (files carry their own).
    #[arg(long, default_value_t = 16)]
    n_gpus: u64,
    #[arg(long, default_value_t = 4096)]
    hidden: u64,
    #[arg(long, default_value_t = 32)]
    layers: u32,
    #[arg(long, default_value_t = 32000)]
    vocab: u64,
    #[arg(long, default_value_t = 80.0)]
    gpu_memory_gib: f64,
    #[arg(long, default_value_t = 1.95e13)]
    flops: f64,
    #[arg(long, default_value_t = 2.0e11)]
    bandwidth: f64,
    #[arg(long, default_value_t = 6.0)]
    safety_margin_gib: f64,
    #[arg(long, default_value_t = 34.0)]
    act_const: f64,
    #[arg(long, default_value_t = 384.0)]
    state_const: f64,
    #[arg(long, default_value_t = 0.75)]
    alpha: f64,
    #[arg(long, default_value_t = 2.0)]
    embed_factor: f64,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct ProposeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    /// Maximum sequence length to support (the context length).
    #[arg(long)]
    l_max: u64,
    #[arg(long, default_value_t = 128)]
    l_step: u64,
    /// GPU grid step for the continuous relaxation (1.0 = integer only).
    #[arg(long, default_value_t = 0.1)]
    n_step: f64,
    #[arg(long, default_value_t = 16)]
    max_candidates: usize,
    #[arg(short, long)]
    output: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long)]
    candidates: PathBuf,
    /// Tokens sampled per iteration.
    #[arg(long, default_value_t = 100_000)]
    budget: u64,
    #[arg(long)]
    context: u64,
    #[arg(long, default_value_t = 100)]
    iterations: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Greedy dispatch trials per (iteration, candidate).
    #[arg(long, default_value_t = 100)]
    trials: u32,
    #[arg(long, default_value_t = 24)]
    dispatch_exact_limit: usize,
    #[arg(long, default_value_t = 12)]
    pack_exact_cutover: usize,
    /// Penalize plans that leave pipelines idle during selection.
    #[arg(long)]
    penalize_empty: bool,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum OverlapArg {
    None,
    Full,
}

impl From<OverlapArg> for OverlapMode {
    fn from(v: OverlapArg) -> Self {
        match v {
            OverlapArg::None => OverlapMode::None,
            OverlapArg::Full => OverlapMode::Full,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    /// Directory produced by `plan`.
    #[arg(long)]
    plans: PathBuf,
    #[arg(long)]
    profile: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    overlap: OverlapArg,
    #[arg(long, default_value_t = 1.0 / 3.0)]
    forward_fraction: f64,
    /// Seconds per byte of non-overlappable local movement.
    #[arg(long, default_value_t = 0.0)]
    local_epsilon: f64,
    /// Also emit pull/push communication plans, volume tables, and dot
    /// graphs for every selected strategy.
    #[arg(long)]
    commplan: bool,
    /// Also run the four-policy ablation ladder over the planned run.
    #[arg(long)]
    ablation: bool,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Directory produced by `simulate`.
    #[arg(long)]
    sims: PathBuf,
    /// CSV output path (defaults to <sims>/report.csv).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn main() {
    init_threads();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Propose(a) => cmd_propose(a),
        Command::Plan(a) => cmd_plan(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn init_threads() {
    if let Ok(v) = std::env::var("HYDRA_PLANNER_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
        }
    }
}

fn load_sample(path: &Path) -> Result<LengthSample> {
    let format = LengthFormat::from_path(path);
    workload::load_lengths(path, format)
        .with_context(|| format!("loading {}", path.display()))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dist = match args.dist {
        DistKind::Lognormal => LengthDistribution::Lognormal { mu: args.mu, sigma: args.sigma },
        DistKind::Pareto => LengthDistribution::Pareto { alpha: args.alpha, xmin: args.xmin },
    };
    let sample = workload::synth_longtail(dist, args.n, args.context, args.seed)?;
    let format = LengthFormat::from_path(&args.output);
    workload::save_lengths(&args.output, format, &sample)?;
    eprintln!(
        "wrote {} lengths ({} tokens) to {}",
        sample.len(),
        sample.total_tokens(),
        args.output.display()
    );
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let sample = load_sample(&args.data)?;
    let hist = workload::build_histogram(&sample, args.bin_width)?;
    let summary = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "dataset": args.data.display().to_string(),
        "total_sequences": hist.total_sequences,
        "total_tokens": hist.total_tokens,
        "max_length": sample.max_length(),
        "bin_width": hist.bin_width,
        "counts": hist.counts,
    });
    match &args.output {
        Some(path) => files::write(path, &summary)?,
        None => println!("{}", serde_json::to_string_pretty(&summary)?),
    }
    Ok(())
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let run_config = RunConfig {
        command: "fit".into(),
        seed: args.seed,
        ..Default::default()
    };

    let (model, hardware, memory, sample_map) = if let Some(path) = &args.samples {
        let file: SamplesFile = files::read(path)?;
        hydra_core::artifact::check_schema(path, file.schema_version)?;
        let samples = file
            .samples
            .iter()
            .map(|(k, v)| Ok((k.parse().map_err(|e| anyhow!("{e}"))?, v.clone())))
            .collect::<Result<BTreeMap<_, _>>>()?;
        (file.model, file.hardware, file.memory, samples)
    } else {
        let (model, hardware, memory, truth) = if let Some(path) = &args.truth {
            let file: TruthFile = files::read(path)?;
            hydra_core::artifact::check_schema(path, file.schema_version)?;
            let truth = files::parse_scheme_map(&file.coeffs)?;
            (file.model, file.hardware, file.memory, truth)
        } else if args.demo {
            let model =
                ModelShape { hidden: args.hidden, layers: args.layers, vocab: args.vocab };
            let hardware = HardwareSpec {
                n_gpus: args.n_gpus,
                gpu_memory: (args.gpu_memory_gib * (1u64 << 30) as f64) as u64,
                flops: args.flops,
                bandwidth: args.bandwidth,
                safety_margin: (args.safety_margin_gib * (1u64 << 30) as f64) as u64,
            };
            let memory = MemoryConstants {
                act_const: args.act_const,
                state_const: args.state_const,
                alpha: args.alpha,
                embed_factor: args.embed_factor,
            };
            let domains = SchemeDomains::default_for(args.n_gpus, args.layers);
            let schemes = enumerate_schemes(args.n_gpus, args.layers, &domains)?;
            let truth = cost::demo_coefficients(&model, &schemes);
            (model, hardware, memory, truth)
        } else {
            bail!("one of --samples, --truth, or --demo is required");
        };
        let samples =
            cost::synth_profile(model, hardware, memory, &truth, args.noise, args.seed)?;
        (model, hardware, memory, samples)
    };

    let mut coeffs = BTreeMap::new();
    let mut residuals = BTreeMap::new();
    for (scheme, samples) in &sample_map {
        let fit = cost::fit_latency(samples)
            .with_context(|| format!("fitting scheme {scheme}"))?;
        coeffs.insert(*scheme, fit.coeffs);
        residuals.insert(scheme.to_string(), fit.residual);
    }
    let profile =
        CostProfile::build(model, hardware, memory, coeffs, args.util_threshold)?;
    let file = ProfileFile::from_profile(&profile, run_config, residuals);
    files::write(&args.output, &file)?;
    eprintln!(
        "fitted {} schemes ({} feasible) -> {}",
        file.coeffs.len(),
        profile.feasible_schemes().len(),
        args.output.display()
    );
    Ok(())
}

fn load_profile(path: &Path) -> Result<CostProfile> {
    let file: ProfileFile = files::read(path)?;
    file.to_profile(path)
}

fn cmd_propose(args: ProposeArgs) -> Result<()> {
    let sample = load_sample(&args.data)?;
    let profile = load_profile(&args.profile)?;
    let hist = workload::build_histogram(&sample, args.l_step)?;
    let schemes = profile.feasible_schemes();
    let opts = ProposeOptions {
        steps: DpSteps { n_step: args.n_step, d_step: args.n_step, l_step: args.l_step },
        max_candidates: args.max_candidates,
    };
    let set = proposal::propose(
        &hist,
        profile.hardware.n_gpus,
        args.l_max,
        &schemes,
        &profile,
        &opts,
    )?;
    let run_config = RunConfig {
        command: "propose".into(),
        dataset: Some(args.data.display().to_string()),
        profile: Some(args.profile.display().to_string()),
        context_length: Some(args.l_max),
        seed: 0,
        ..Default::default()
    };
    let file = CandidatesFile::from_set(&set, run_config);
    files::write(&args.output, &file)?;
    eprintln!("proposed {} candidate strategies:", set.strategies.len());
    for c in &set.strategies {
        eprintln!("  {} (ceiling {} tokens)", c.strategy, c.provenance.l);
    }
    Ok(())
}

fn plan_options(run: &RunConfig, iteration: u32) -> PlanOptions {
    let mut opts = PlanOptions::default();
    opts.seed = seed::derive(run.seed, "plan", u64::from(iteration));
    opts.trials = run.trials.unwrap_or(opts.trials);
    opts.dispatch_exact_limit = run.dispatch_exact_limit.unwrap_or(opts.dispatch_exact_limit);
    opts.pack_exact_cutover = run.pack_exact_cutover.unwrap_or(opts.pack_exact_cutover);
    opts.penalize_empty = run.penalize_empty;
    opts
}

fn minibatch_for(run: &RunConfig, sample: &LengthSample, iteration: u32) -> Result<MiniBatch> {
    let budget = run.token_budget.context("run config lacks token_budget")?;
    let context = run.context_length.context("run config lacks context_length")?;
    let mb_seed = seed::derive(run.seed, "minibatch", u64::from(iteration));
    Ok(workload::sample_minibatch(sample, budget, context, mb_seed)?)
}

fn cmd_plan(args: PlanArgs) -> Result<()> {
    let sample = load_sample(&args.data)?;
    let profile = load_profile(&args.profile)?;
    let cand_file: CandidatesFile = files::read(&args.candidates)?;
    let set = cand_file.to_set(&args.candidates)?;
    if set.n_gpus != profile.hardware.n_gpus {
        bail!(
            "candidates were proposed for {} GPUs but the profile describes {}",
            set.n_gpus,
            profile.hardware.n_gpus
        );
    }
    let candidates = set.strategy_list();
    std::fs::create_dir_all(&args.outdir)
        .with_context(|| format!("creating {}", args.outdir.display()))?;

    let run_config = RunConfig {
        command: "plan".into(),
        dataset: Some(args.data.display().to_string()),
        profile: Some(args.profile.display().to_string()),
        candidates: Some(args.candidates.display().to_string()),
        token_budget: Some(args.budget),
        context_length: Some(args.context),
        iterations: Some(args.iterations),
        seed: args.seed,
        trials: Some(args.trials),
        dispatch_exact_limit: Some(args.dispatch_exact_limit),
        pack_exact_cutover: Some(args.pack_exact_cutover),
        penalize_empty: args.penalize_empty,
        ..Default::default()
    };

    let mut selections = Vec::with_capacity(args.iterations as usize);
    let mut frequencies: BTreeMap<String, u32> = BTreeMap::new();
    let mut latency_sum = 0f64;
    for iteration in 0..args.iterations {
        let mb = minibatch_for(&run_config, &sample, iteration)?;
        let opts = plan_options(&run_config, iteration);
        let (selected, reports) =
            planner::select_strategy(&mb, &candidates, &profile, &opts)
                .with_context(|| format!("iteration {iteration}"))?;
        let text = selected.strategy.text();
        *frequencies.entry(text.clone()).or_insert(0) += 1;
        latency_sum += selected.estimated_latency;
        if !selected.diagnostics.empty_pipelines.is_empty() {
            eprintln!(
                "iteration {iteration}: {} leaves pipelines {:?} idle",
                text, selected.diagnostics.empty_pipelines
            );
        }
        selections.push(SelectionSummary {
            iteration,
            strategy: text,
            estimated_latency: selected.estimated_latency,
            sequences: mb.lengths.len(),
            tokens: mb.total_tokens(),
            empty_pipelines: selected.diagnostics.empty_pipelines.len(),
        });
        let plan_file = PlanFile {
            schema_version: SCHEMA_VERSION,
            run_config: run_config.clone(),
            iteration,
            minibatch: mb,
            selected,
            reports,
        };
        files::write(&args.outdir.join(format!("plan_{iteration:04}.json")), &plan_file)?;
    }
    let summary = PlanSummaryFile {
        schema_version: SCHEMA_VERSION,
        run_config,
        iterations: args.iterations,
        selections,
        strategy_frequencies: frequencies,
        mean_estimated_latency: latency_sum / f64::from(args.iterations.max(1)),
    };
    files::write(&args.outdir.join("summary.json"), &summary)?;
    eprintln!("planned {} iterations -> {}", args.iterations, args.outdir.display());
    for (strategy, count) in &summary.strategy_frequencies {
        eprintln!("  {count:>4}x {strategy}");
    }
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let profile = load_profile(&args.profile)?;
    let summary: PlanSummaryFile = files::read(&args.plans.join("summary.json"))?;
    hydra_core::artifact::check_schema(&args.plans.join("summary.json"), summary.schema_version)?;
    std::fs::create_dir_all(&args.outdir)
        .with_context(|| format!("creating {}", args.outdir.display()))?;
    let config = SimConfig {
        forward_fraction: args.forward_fraction,
        overlap: args.overlap.into(),
        local_epsilon_per_byte: args.local_epsilon,
    };
    let param_bytes = profile.propagation_param_bytes();
    let n_layers = profile.shape.layers;

    let run_config = RunConfig {
        command: "simulate".into(),
        profile: Some(args.profile.display().to_string()),
        overlap: Some(match config.overlap {
            OverlapMode::None => "none".into(),
            OverlapMode::Full => "full".into(),
        }),
        seed: summary.run_config.seed,
        ..summary.run_config.clone()
    };

    // Comm plans depend only on the strategy; build each once.
    let mut comm_cache: BTreeMap<String, (comm::CommPlan, comm::CommPlan)> = BTreeMap::new();
    let mut iteration_latencies = Vec::new();
    for selection in &summary.selections {
        let path = args.plans.join(format!("plan_{:04}.json", selection.iteration));
        let plan_file: PlanFile = files::read(&path)?;
        hydra_core::artifact::check_schema(&path, plan_file.schema_version)?;

        // Audit the plan before trusting it.
        planner::validate_strategy_plan(&plan_file.selected, &plan_file.minibatch, &profile)
            .map_err(|v| anyhow!("audit failure in {}: {v}", path.display()))?;

        let text = plan_file.selected.strategy.text();
        if !comm_cache.contains_key(&text) {
            let placement = comm::build_placement(
                &plan_file.selected.strategy,
                profile.hardware.n_gpus,
                n_layers,
            )?;
            let pull = comm::pull_plan(&placement);
            let push = comm::push_plan(&placement);
            comm::audit_plan(&pull, &placement)
                .map_err(|v| anyhow!("audit failure in pull plan for {text}: {v}"))?;
            comm::audit_plan(&push, &placement)
                .map_err(|v| anyhow!("audit failure in push plan for {text}: {v}"))?;
            comm_cache.insert(text.clone(), (pull, push));
        }
        let (pull, push) = &comm_cache[&text];
        let report = sim::simulate_strategy(
            &plan_file.selected,
            pull,
            push,
            param_bytes,
            &profile,
            &config,
        )?;
        iteration_latencies.push(report.iteration_latency);
        let sim_file = SimFile {
            schema_version: SCHEMA_VERSION,
            run_config: run_config.clone(),
            iteration: selection.iteration,
            report,
        };
        files::write(
            &args.outdir.join(format!("sim_{:04}.json", selection.iteration)),
            &sim_file,
        )?;
    }

    if args.commplan {
        let dir = args.outdir.join("commplans");
        std::fs::create_dir_all(&dir)?;
        let mut index = Vec::new();
        for (i, (text, (pull, push))) in comm_cache.iter().enumerate() {
            index.push(serde_json::json!({ "id": i, "strategy": text }));
            files::write(&dir.join(format!("pull_{i}.json")), pull)?;
            files::write(&dir.join(format!("push_{i}.json")), push)?;
            files::write(
                &dir.join(format!("volumes_{i}.json")),
                &serde_json::json!({
                    "schema_version": SCHEMA_VERSION,
                    "strategy": text,
                    "param_bytes": param_bytes,
                    "pull": comm::volumes(pull, param_bytes),
                    "push": comm::volumes(push, param_bytes),
                    "pull_pattern": comm::reduce_to_collectives(pull),
                    "push_pattern": comm::reduce_to_collectives(push),
                }),
            )?;
            std::fs::write(dir.join(format!("pull_{i}.dot")), comm::to_dot(pull))?;
            std::fs::write(dir.join(format!("push_{i}.dot")), comm::to_dot(push))?;
        }
        files::write(
            &dir.join("index.json"),
            &serde_json::json!({ "schema_version": SCHEMA_VERSION, "plans": index }),
        )?;
    }

    if args.ablation {
        let run = &summary.run_config;
        let dataset = run
            .dataset
            .as_deref()
            .context("plan summary lacks the dataset path needed for --ablation")?;
        let cand_path = run
            .candidates
            .as_deref()
            .context("plan summary lacks the candidates path needed for --ablation")?;
        let sample = load_sample(Path::new(dataset))?;
        let cand_file: CandidatesFile = files::read(Path::new(cand_path))?;
        let set = cand_file.to_set(Path::new(cand_path))?;
        let minibatches: Vec<MiniBatch> = (0..summary.iterations)
            .map(|i| minibatch_for(run, &sample, i))
            .collect::<Result<_>>()?;
        let table = sim::compare_policies(
            &minibatches,
            &set.strategy_list(),
            &profile,
            n_layers,
            param_bytes,
            &config,
            &plan_options(run, 0),
        )?;
        std::fs::write(args.outdir.join("ablation.csv"), table.to_csv())?;
        files::write(&args.outdir.join("ablation.json"), &table)?;
        files::write(&args.outdir.join("ablation_series.json"), &table.to_series_json())?;
        eprintln!("ablation ladder (mean seconds/iteration):");
        for row in &table.rows {
            eprintln!(
                "  {:<36} {:>9.4} +- {:.4}  [{}]",
                row.policy.label(),
                row.mean,
                row.stddev,
                row.strategy.as_deref().unwrap_or("per-iteration")
            );
        }
    }

    let n = iteration_latencies.len().max(1) as f64;
    let mean = iteration_latencies.iter().sum::<f64>() / n;
    files::write(
        &args.outdir.join("summary_sim.json"),
        &serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "run_config": run_config,
            "iterations": iteration_latencies.len(),
            "mean_iteration_latency": mean,
            "iteration_latencies": iteration_latencies,
        }),
    )?;
    eprintln!(
        "simulated {} iterations, mean latency {mean:.4}s -> {}",
        iteration_latencies.len(),
        args.outdir.display()
    );
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let mut sims: Vec<SimFile> = Vec::new();
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&args.sims)
        .with_context(|| format!("reading {}", args.sims.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("sim_") && n.ends_with(".json"))
        })
        .collect();
    entries.sort();
    for path in &entries {
        sims.push(files::read(path)?);
    }
    if sims.is_empty() {
        bail!("no sim_*.json files under {}", args.sims.display());
    }

    let mut csv = String::from(
        "iteration,strategy,estimated_s,propagation_s,pull_s,push_s,iteration_s,max_bubble,worst_delta\n",
    );
    let mut total = 0f64;
    println!(
        "{:>5}  {:<28} {:>10} {:>10} {:>9} {:>8}",
        "iter", "strategy", "estimate", "simulated", "bubble", "delta"
    );
    for sim in &sims {
        let r = &sim.report;
        let bubble = r
            .per_pipeline
            .iter()
            .map(|p| p.bubble_fraction)
            .fold(0.0, f64::max);
        let delta = r
            .per_pipeline
            .iter()
            .filter_map(|p| p.estimate_delta)
            .fold(0.0f64, |acc, d| if d.abs() > acc.abs() { d } else { acc });
        total += r.iteration_latency;
        println!(
            "{:>5}  {:<28} {:>10.4} {:>10.4} {:>8.1}% {:>+7.2}%",
            sim.iteration,
            r.strategy.text(),
            r.estimated_latency,
            r.iteration_latency,
            bubble * 100.0,
            delta * 100.0
        );
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            sim.iteration,
            r.strategy.text(),
            r.estimated_latency,
            r.propagation,
            r.pull_seconds,
            r.push_seconds,
            r.iteration_latency,
            bubble,
            delta
        ));
    }
    println!("mean iteration latency: {:.4}s", total / sims.len() as f64);

    let ablation_csv = args.sims.join("ablation.csv");
    if ablation_csv.exists() {
        println!("\nablation ladder:\n{}", std::fs::read_to_string(&ablation_csv)?);
    }
    let out = args.output.unwrap_or_else(|| args.sims.join("report.csv"));
    std::fs::write(&out, csv).with_context(|| format!("writing {}", out.display()))?;
    // Plot-friendly companion series next to the CSV.
    let series = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "series": [
            {
                "name": "estimated",
                "values": sims.iter().map(|s| s.report.estimated_latency).collect::<Vec<_>>(),
            },
            {
                "name": "simulated",
                "values": sims.iter().map(|s| s.report.iteration_latency).collect::<Vec<_>>(),
            },
        ],
    });
    let series_path = out.with_extension("series.json");
    files::write(&series_path, &series)?;
    eprintln!("wrote {} and {}", out.display(), series_path.display());
    Ok(())
}
