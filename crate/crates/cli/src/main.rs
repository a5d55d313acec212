//! `expertsim` command-line front end.
//!
//! Exit status is 0 on success, 1 when inputs cannot be read or fail
//! validation, and 2 for malformed command lines.

mod config;

use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

use expertsim::perfmodel::{
    roofline, roofline_csv, select_k, AcceptanceModel, GovernorConfig, HardwareProfile,
};
use expertsim::scheduler::{CapacityMode, Policy};
use expertsim::sim::{compare_policies, run_simulation_with_plans, KPolicy};
use expertsim::trace::{
    classify_fidelity, classify_match, generate_synthetic_trace, layer_entropy, parse_trace,
    write_trace, FidelityStats, MatchKind, ModelShape, Trace,
};

use config::{Capacity, RunConfig};

#[derive(Parser, Debug)]
#[command(
    name = "expertsim",
    version,
    about = "Trace-driven simulator for speculative MoE expert prefetching"
)]
struct Cli {
    /// JSON run config; command-line flags override its fields.
    #[arg(long, global = true, env = "MOESPEQ_CONFIG")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic activation trace with calibrated draft fidelity.
    GenTrace(GenTraceArgs),
    /// Per-layer routing entropy and draft/target fidelity of a trace.
    Analyze(AnalyzeArgs),
    /// Replay a trace under one policy.
    Simulate(SimulateArgs),
    /// Replay a trace under every policy and capacity in a grid.
    Compare(CompareArgs),
    /// Emit roofline operating points over a range of draft lengths.
    Roofline(RooflineArgs),
}

#[derive(Args, Debug)]
struct GenTraceArgs {
    /// `L,N,top_k[,shared[,expert_bytes]]`
    #[arg(long, value_parser = parse_shape)]
    shape: Option<ModelShape>,
    #[arg(long)]
    tokens: Option<usize>,
    /// Hard, soft and mismatch rates, `h,s,m`.
    #[arg(long, value_parser = parse_fidelity)]
    fidelity: Option<FidelityStats>,
    #[arg(long, value_parser = parse_unit)]
    accept_rate: Option<f64>,
    #[arg(long)]
    skew: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Table,
    Csv,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Table)]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Simulation knobs shared by `simulate` and `compare`.
#[derive(Args, Debug)]
struct SimArgs {
    #[arg(long)]
    trace: PathBuf,
    /// Fixed draft length or `governor`.
    #[arg(long, value_parser = parse_k)]
    k: Option<KPolicy>,
    /// Hardware profile JSON; replaces the config's `profile`.
    #[arg(long)]
    profile: Option<PathBuf>,
    #[arg(long, value_enum)]
    capacity_mode: Option<ModeArg>,
    /// Split per-layer capacity by routing entropy.
    #[arg(long)]
    entropy_weighting: bool,
    /// Phase-2 transfers per draft token.
    #[arg(long)]
    prefetch_budget: Option<usize>,
    /// Seconds charged after a partially rejected draft.
    #[arg(long)]
    rollback: Option<f64>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    PerLayer,
    Global,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_parser = parse_policy)]
    policy: Option<Policy>,
    /// Experts per layer (or in total with `--capacity-mode global`), or `inf`.
    #[arg(long)]
    capacity: Option<Capacity>,
    /// Report JSON.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-cycle CSV.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Per-segment CSV for Gantt plots.
    #[arg(long)]
    timeline: Option<PathBuf>,
    /// Per-cycle prefetch and execution plans as JSON.
    #[arg(long)]
    dump_plans: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CompareArgs {
    #[command(flatten)]
    sim: SimArgs,
    #[arg(long, value_delimiter = ',', value_parser = parse_policy)]
    policies: Option<Vec<Policy>>,
    #[arg(long, value_delimiter = ',')]
    capacities: Option<Vec<Capacity>>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RooflineArgs {
    /// Hardware profile JSON; replaces the config's `profile`.
    #[arg(long)]
    profile: Option<PathBuf>,
    /// Inclusive draft-length range, `a..b`.
    #[arg(long, value_parser = parse_k_range)]
    k_range: Option<[usize; 2]>,
    /// Constant per-position acceptance probability.
    #[arg(long, value_parser = parse_unit)]
    acceptance: Option<f64>,
    /// New experts fetched per verified token.
    #[arg(long)]
    new_experts_per_token: Option<f64>,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

// ---------------------------------------------------------------------------
// Flag parsers. Failures here surface as usage errors.

fn parse_shape(s: &str) -> Result<ModelShape, String> {
    let parts: Vec<u64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<u64>()
                .map_err(|_| format!("`{p}` is not a non-negative integer"))
        })
        .collect::<Result<_, _>>()?;
    let [l, n, top_k, rest @ ..] = parts.as_slice() else {
        return Err("expected L,N,top_k[,shared[,expert_bytes]]".into());
    };
    if rest.len() > 2 {
        return Err("expected at most five fields".into());
    }
    let shared = rest.first().copied().unwrap_or(0);
    let bytes = rest.get(1).copied().unwrap_or(4_300_000);
    ModelShape::new(
        *l as usize,
        *n as usize,
        *top_k as usize,
        shared as usize,
        bytes,
    )
    .map_err(|e| e.to_string())
}

fn parse_fidelity(s: &str) -> Result<FidelityStats, String> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| format!("`{p}` is not a number"))
        })
        .collect::<Result<_, _>>()?;
    let [h, soft, m] = v.as_slice() else {
        return Err("expected three rates h,s,m".into());
    };
    FidelityStats::new(*h, *soft, *m).map_err(|e| e.to_string())
}

fn parse_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} outside [0, 1]"))
    }
}

fn parse_k(s: &str) -> Result<KPolicy, String> {
    if s.eq_ignore_ascii_case("governor") {
        return Ok(KPolicy::Governor);
    }
    match s.parse::<usize>() {
        Ok(k) if k >= 1 => Ok(KPolicy::Fixed(k)),
        _ => Err(format!(
            "expected a draft length >= 1 or `governor`, got `{s}`"
        )),
    }
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse()
        .map_err(|e: expertsim::scheduler::SchedError| e.to_string())
}

fn parse_k_range(s: &str) -> Result<[usize; 2], String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected a..b, got `{s}`"))?;
    let b = b.strip_prefix('=').unwrap_or(b);
    let parse = |x: &str| {
        x.trim()
            .parse::<usize>()
            .map_err(|_| format!("`{x}` is not an integer"))
    };
    let (a, b) = (parse(a)?, parse(b)?);
    if a == 0 || a > b {
        return Err(format!("need 1 <= a <= b, got {a}..{b}"));
    }
    Ok([a, b])
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(message: impl std::fmt::Display) -> ! {
    Cli::command()
        .error(ErrorKind::ValueValidation, message)
        .exit()
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::GenTrace(args) => gen_trace(&mut cfg, args),
        Command::Analyze(args) => analyze(args),
        Command::Simulate(args) => simulate(&mut cfg, args),
        Command::Compare(args) => compare(&mut cfg, args),
        Command::Roofline(args) => cmd_roofline(&mut cfg, args),
    }
}

fn read_trace(path: &Path) -> Result<Trace> {
    let file = File::open(path).with_context(|| format!("opening trace {}", path.display()))?;
    parse_trace(BufReader::new(file)).with_context(|| format!("trace {}", path.display()))
}

fn read_profile(path: &Path) -> Result<HardwareProfile> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading profile {}", path.display()))?;
    let profile: HardwareProfile =
        serde_json::from_str(&text).with_context(|| format!("profile {}", path.display()))?;
    profile
        .validate()
        .with_context(|| format!("profile {}", path.display()))?;
    Ok(profile)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

/// Writes to `path`, or to stdout when no path is given.
fn emit(path: Option<&Path>, contents: &str) -> Result<()> {
    match path {
        Some(p) => write_file(p, contents),
        None => io::stdout()
            .write_all(contents.as_bytes())
            .context("writing stdout"),
    }
}

fn mean_entropy(trace: &Trace) -> Result<f64> {
    let layers = trace.shape.num_moe_layers;
    let mut sum = 0.0;
    for l in 0..layers {
        sum += layer_entropy(trace, l)?;
    }
    Ok(sum / layers as f64)
}

fn gen_trace(cfg: &mut RunConfig, args: GenTraceArgs) -> Result<()> {
    if let Some(shape) = args.shape {
        cfg.shape = shape;
    }
    if let Some(t) = args.tokens {
        cfg.tokens = t;
    }
    if let Some(f) = args.fidelity {
        cfg.fidelity = [f.hard_rate, f.soft_rate, f.mismatch_rate];
    }
    if let Some(a) = args.accept_rate {
        cfg.accept_rate = a;
    }
    if let Some(s) = args.skew {
        cfg.skew = s;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let trace = generate_synthetic_trace(&cfg.generator_params()?)?;
    let file =
        File::create(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut w = io::BufWriter::new(file);
    write_trace(&trace, &mut w)
        .and_then(|()| w.flush())
        .with_context(|| format!("writing {}", args.out.display()))?;

    let f = classify_fidelity(&trace)?;
    println!(
        "wrote {} tokens to {}: hard={:.3} soft={:.3} mismatch={:.3} mean_entropy={:.3} bits (max {:.3})",
        trace.len(),
        args.out.display(),
        f.hard_rate,
        f.soft_rate,
        f.mismatch_rate,
        mean_entropy(&trace)?,
        (trace.shape.experts_per_layer as f64).log2()
    );
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> Result<()> {
    let trace = read_trace(&args.trace)?;
    let layers = trace.shape.num_moe_layers;
    let max_bits = (trace.shape.experts_per_layer as f64).log2();
    let mut rows = Vec::with_capacity(layers);
    for l in 0..layers {
        let mut counts = [0usize; 3];
        for tok in &trace.tokens {
            let idx = match classify_match(&tok.draft_sets[l], &tok.target_sets[l]) {
                MatchKind::Hard => 0,
                MatchKind::Soft => 1,
                MatchKind::Mismatch => 2,
            };
            counts[idx] += 1;
        }
        let n = trace.len() as f64;
        rows.push((
            l.to_string(),
            layer_entropy(&trace, l)?,
            counts.map(|c| c as f64 / n),
        ));
    }
    let overall = classify_fidelity(&trace)?;
    rows.push((
        "all".to_string(),
        mean_entropy(&trace)?,
        [overall.hard_rate, overall.soft_rate, overall.mismatch_rate],
    ));

    let text = match args.format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["layer", "entropy_bits", "hard", "soft", "mismatch"])?;
            for (layer, h, [hard, soft, mis]) in &rows {
                w.write_record([
                    layer.clone(),
                    h.to_string(),
                    hard.to_string(),
                    soft.to_string(),
                    mis.to_string(),
                ])?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        Format::Table => {
            let mut out = format!(
                "{} tokens, {layers} layers, {} experts/layer (max entropy {max_bits:.3} bits)\n",
                trace.len(),
                trace.shape.experts_per_layer
            );
            out.push_str(&format!(
                "{:>5}  {:>12}  {:>6}  {:>6}  {:>8}\n",
                "layer", "entropy_bits", "hard", "soft", "mismatch"
            ));
            for (layer, h, [hard, soft, mis]) in &rows {
                out.push_str(&format!(
                    "{layer:>5}  {h:>12.4}  {hard:>6.3}  {soft:>6.3}  {mis:>8.3}\n"
                ));
            }
            out
        }
    };
    emit(args.out.as_deref(), &text)
}

fn apply_sim_args(cfg: &mut RunConfig, args: &SimArgs) -> Result<()> {
    if let Some(k) = args.k {
        cfg.k = k;
    }
    if let Some(p) = &args.profile {
        cfg.profile = read_profile(p)?;
    }
    if let Some(mode) = args.capacity_mode {
        cfg.capacity_mode = match mode {
            ModeArg::PerLayer => CapacityMode::PerLayer,
            ModeArg::Global => CapacityMode::Global,
        };
    }
    if args.entropy_weighting {
        cfg.entropy_weighting = true;
    }
    if let Some(b) = args.prefetch_budget {
        cfg.prefetch_budget = Some(b);
    }
    if let Some(r) = args.rollback {
        cfg.rollback_time = r;
    }
    Ok(())
}

fn simulate(cfg: &mut RunConfig, args: SimulateArgs) -> Result<()> {
    apply_sim_args(cfg, &args.sim)?;
    if let Some(p) = args.policy {
        cfg.policy = p;
    }
    if let Some(c) = args.capacity {
        cfg.cache_capacity = c;
    }
    let trace = read_trace(&args.sim.trace)?;
    let sim_cfg = cfg.sim_config(&trace.shape, cfg.policy, cfg.cache_capacity)?;
    let (report, plans) = run_simulation_with_plans(&trace, &sim_cfg)?;

    if let Some(p) = &args.out {
        write_file(p, &report.to_json())?;
    }
    if let Some(p) = &args.out_csv {
        write_file(p, &report.cycles_csv())?;
    }
    if let Some(p) = &args.timeline {
        write_file(p, &report.timeline_csv())?;
    }
    if let Some(p) = &args.dump_plans {
        write_file(p, &serde_json::to_string_pretty(&plans)?)?;
    }
    println!(
        "policy={} capacity={} cycles={} tpot_ms={:.4} mean_coverage={:.4} stall_fraction={:.4} ttft_ms={:.4}",
        report.policy,
        report.cache_capacity,
        report.cycles.len(),
        report.tpot * 1e3,
        report.mean_coverage,
        report.stall_time / report.total_time,
        report.ttft * 1e3
    );
    Ok(())
}

fn compare(cfg: &mut RunConfig, args: CompareArgs) -> Result<()> {
    apply_sim_args(cfg, &args.sim)?;
    if let Some(p) = args.policies {
        cfg.policies = p;
    }
    if let Some(c) = args.capacities {
        cfg.capacities = c;
    }
    if cfg.policies.is_empty() || cfg.capacities.is_empty() {
        usage_error("compare needs at least one policy and one capacity");
    }
    let trace = read_trace(&args.sim.trace)?;
    let base = cfg.sim_config(&trace.shape, cfg.policies[0], cfg.capacities[0])?;
    let capacities: Vec<usize> = cfg
        .capacities
        .iter()
        .map(|c| c.resolve(&trace.shape, cfg.capacity_mode))
        .collect();
    let mut rows = compare_policies(&trace, &base, &cfg.policies, &capacities)?;
    rows.sort_by_key(|r| (r.policy, r.capacity));
    rows.dedup_by_key(|r| (r.policy, r.capacity));

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["policy", "capacity", "coverage", "tpot"])?;
    for r in &rows {
        w.write_record([
            r.policy.to_string(),
            r.capacity.to_string(),
            r.mean_coverage.to_string(),
            r.tpot.to_string(),
        ])?;
    }
    emit(args.out.as_deref(), &String::from_utf8(w.into_inner()?)?)
}

fn cmd_roofline(cfg: &mut RunConfig, args: RooflineArgs) -> Result<()> {
    if let Some(p) = &args.profile {
        cfg.profile = read_profile(p)?;
    }
    if let Some(r) = args.k_range {
        cfg.k_range = r;
    }
    if let Some(a) = args.acceptance {
        cfg.acceptance = a;
    }
    if let Some(n) = args.new_experts_per_token {
        cfg.new_experts_per_token = Some(n);
    }
    cfg.profile.validate().context("field `profile`")?;
    let [k_min, k_max] = cfg.k_range;
    let rate = cfg
        .new_experts_per_token
        .unwrap_or((cfg.shape.num_moe_layers * cfg.shape.top_k) as f64);
    if !(rate.is_finite() && rate >= 0.0) {
        usage_error(format!(
            "new experts per token must be non-negative, got {rate}"
        ));
    }
    // The verified window holds k drafted tokens plus the bonus token.
    let estimate = |k: usize| (rate * (k + 1) as f64).round() as usize;
    let model = AcceptanceModel::constant(cfg.acceptance, k_max).context("field `acceptance`")?;
    let points = roofline(&cfg.profile, &model, k_min..=k_max, estimate)?;
    let governor = GovernorConfig::new(k_min, k_max, k_max)?;
    let k_star = select_k(&cfg.profile, &model, &governor, estimate)?;
    emit(args.out.as_deref(), &roofline_csv(&points))?;
    eprintln!("k*={k_star}");
    Ok(())
}
