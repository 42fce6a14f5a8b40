use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dpgne::privacy::PrivacyAccountant;
use dpgne::schedules::SequenceFamily;
use dpgne_experiment::config::{ArmKind, ExperimentConfig, NoiseMode};
use dpgne_experiment::error::{ExperimentError, Result};
use dpgne_experiment::export::{
    INSTANCE_FILE, RESOLVED_CONFIG_FILE, write_arm, write_combined_aggregate, write_study_files, write_text,
    write_tracking_csv,
};
use dpgne_experiment::runner::{
    Study, ground_truth, load_instance, run_consensus, run_study, truth_cache_path, truth_to_text,
};
use log::{LevelFilter, info};

#[derive(Parser, Debug)]
#[command(name = "dpgne", version, about = "Private distributed Nash equilibrium seeking experiments")]
struct Cli {
    /// TOML experiment configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Dynamic average consensus with drifting references; writes consensus.csv.
    Consensus(ConsensusArgs),
    /// Monte Carlo runs of the equilibrium-seeking arms.
    Gne(GneArgs),
    /// Generates a Cournot instance and compares the dp, constant and geometric arms.
    Cournot(CournotArgs),
    /// Privacy budget spent after T0 rounds and its infinite-horizon limit.
    Budget(BudgetArgs),
    /// Solves an instance for its variational equilibrium.
    GroundTruth(GroundTruthArgs),
}

#[derive(Args, Debug)]
struct ConsensusArgs {
    /// Edge-list file; otherwise a random graph from the config.
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    players: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    /// Preset name or inline `alpha=...;gamma=...` schedule.
    #[arg(long)]
    schedule: Option<String>,
    /// `on`, `off` or `calibrated:<epsilon>`.
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    /// Drift constant override.
    #[arg(long)]
    sensitivity: Option<f64>,
}

#[derive(Args, Debug)]
struct InstanceArgs {
    /// Instance file.
    #[arg(long, conflicts_with = "generate")]
    instance: Option<PathBuf>,
    /// `firms,markets,seed`.
    #[arg(long)]
    generate: Option<String>,
}

#[derive(Args, Debug)]
struct GneArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    /// Comma-separated arms: dp, full, constant, geometric.
    #[arg(long, value_delimiter = ',')]
    algo: Vec<String>,
    #[arg(long)]
    schedule: Option<String>,
    /// Budget to calibrate the noise to, or `off`; the raw schedule noise otherwise.
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    /// Sensitivity constant; skips the pilot run.
    #[arg(long)]
    sensitivity: Option<f64>,
    /// Debug only: the uncorrected dual and dual-estimate updates.
    #[arg(long)]
    faithful_typos: bool,
}

#[derive(Args, Debug)]
struct CournotArgs {
    #[arg(long)]
    firms: Option<usize>,
    #[arg(long)]
    markets: Option<usize>,
    #[arg(long)]
    instance_seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    eps: Option<String>,
    #[arg(long)]
    sensitivity: Option<f64>,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    #[arg(long)]
    gamma: SequenceFamily,
    #[arg(long)]
    nu: SequenceFamily,
    #[arg(long = "C")]
    sensitivity: f64,
    #[arg(long = "T0")]
    rounds: u64,
    /// Width allowed for the limit enclosure.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Also write `budget.csv` with the running total.
    #[arg(long)]
    csv: bool,
}

#[derive(Args, Debug)]
struct GroundTruthArgs {
    #[command(flatten)]
    instance: InstanceArgs,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    max_iters: Option<usize>,
}

fn config_error(msg: impl Into<String>) -> ExperimentError {
    ExperimentError::Config(msg.into())
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(jobs) = cli.jobs {
        cfg.jobs = jobs;
    }
    Ok(cfg)
}

fn apply_instance(cfg: &mut ExperimentConfig, args: &InstanceArgs) -> Result<()> {
    if let Some(path) = &args.instance {
        cfg.instance.path = Some(path.clone());
    }
    if let Some(spec) = &args.generate {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let bad = || config_error(format!("--generate expects firms,markets,seed; got `{spec}`"));
        let [firms, markets, seed] = parts.as_slice() else { return Err(bad()) };
        cfg.instance.path = None;
        cfg.instance.firms = firms.parse().map_err(|_| bad())?;
        cfg.instance.markets = markets.parse().map_err(|_| bad())?;
        cfg.instance.seed = seed.parse().map_err(|_| bad())?;
    }
    Ok(())
}

fn apply_eps(cfg: &mut ExperimentConfig, eps: Option<&str>) -> Result<()> {
    match eps {
        None => {}
        Some("off") => cfg.noise.mode = NoiseMode::Off,
        Some(value) => {
            let eps: f64 = value.parse().map_err(|_| config_error(format!("--eps expects a number or off, got `{value}`")))?;
            cfg.noise.mode = NoiseMode::Calibrated;
            cfg.noise.epsilon = Some(eps);
        }
    }
    Ok(())
}

fn apply_noise_flag(cfg: &mut ExperimentConfig, flag: &str) -> Result<()> {
    match flag {
        "on" => cfg.noise.mode = NoiseMode::Raw,
        "off" => cfg.noise.mode = NoiseMode::Off,
        other => match other.strip_prefix("calibrated:") {
            Some(eps) => apply_eps(cfg, Some(eps))?,
            None => return Err(config_error(format!("--noise expects on, off or calibrated:<eps>, got `{other}`"))),
        },
    }
    Ok(())
}

fn create_out(cfg: &ExperimentConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| ExperimentError::io(&cfg.out, e))?;
    Ok(cfg.out.clone())
}

fn run_arms(cfg: ExperimentConfig) -> Result<()> {
    let out = create_out(&cfg)?;
    let study = Study::prepare(cfg)?;
    write_study_files(&out, &study)?;
    let results = run_study(&study, Some(&out))?;
    for r in &results {
        write_arm(&out.join(r.kind.name()), r)?;
    }
    write_combined_aggregate(&out.join("aggregate.csv"), &results)?;
    for r in &results {
        println!(
            "{:<10} final mean error {:e}  variance {:e}  failed trials {}",
            r.kind.name(),
            r.aggregate.mean.last().copied().unwrap_or(f64::NAN),
            r.aggregate.variance.last().copied().unwrap_or(f64::NAN),
            r.failures()
        );
    }
    let failed: usize = results.iter().map(|r| r.failures()).sum();
    if failed > 0 {
        return Err(dpgne::error::Error::NumericalFailure {
            iteration: 0,
            what: format!("{failed} trial(s) failed; see summary.csv"),
        }
        .into());
    }
    Ok(())
}

fn cmd_consensus(mut cfg: ExperimentConfig, args: &ConsensusArgs) -> Result<()> {
    if let Some(graph) = &args.graph {
        cfg.graph.path = Some(graph.clone());
    }
    if let Some(p) = args.players {
        cfg.consensus.players = p;
    }
    if let Some(d) = args.dim {
        cfg.consensus.dimension = d;
    }
    if let Some(s) = &args.schedule {
        cfg.schedule = s.clone();
    }
    if let Some(n) = &args.noise {
        apply_noise_flag(&mut cfg, n)?;
    }
    if let Some(i) = args.iters {
        cfg.horizon = i;
    }
    if let Some(c) = args.sensitivity {
        cfg.noise.sensitivity = Some(c);
    }
    let out = create_out(&cfg)?;
    let run = run_consensus(&cfg)?;
    cfg.noise.sensitivity = Some(run.sensitivity);
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;
    write_tracking_csv(&out.join("consensus.csv"), &run.trace.records)?;
    if let Some(last) = run.trace.records.last() {
        println!(
            "k={} sum_sq_err={:e} max_err={:e} mean_vs_target={:e} eps_spent={}",
            last.k, last.sum_sq_err, last.max_err, last.mean_vs_target, last.eps_spent
        );
    }
    println!(
        "worst conservation error {:e}; drift violations {}",
        run.trace.worst_conservation_error, run.trace.drift_violations
    );
    Ok(())
}

fn cmd_gne(mut cfg: ExperimentConfig, args: &GneArgs) -> Result<()> {
    apply_instance(&mut cfg, &args.instance)?;
    if !args.algo.is_empty() {
        cfg.arms = args.algo.iter().map(|a| a.parse()).collect::<Result<Vec<ArmKind>>>()?;
    }
    if let Some(s) = &args.schedule {
        cfg.schedule = s.clone();
    }
    apply_eps(&mut cfg, args.eps.as_deref())?;
    if let Some(i) = args.iters {
        cfg.horizon = i;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(c) = args.sensitivity {
        cfg.noise.sensitivity = Some(c);
    }
    cfg.faithful_typos |= args.faithful_typos;
    run_arms(cfg)
}

fn cmd_cournot(mut cfg: ExperimentConfig, args: &CournotArgs) -> Result<()> {
    cfg.instance.path = None;
    if let Some(f) = args.firms {
        cfg.instance.firms = f;
    }
    if let Some(m) = args.markets {
        cfg.instance.markets = m;
    }
    if let Some(s) = args.instance_seed {
        cfg.instance.seed = s;
    }
    cfg.arms = vec![ArmKind::Dp, ArmKind::Constant, ArmKind::Geometric];
    apply_eps(&mut cfg, args.eps.as_deref())?;
    if let Some(i) = args.iters {
        cfg.horizon = i;
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(c) = args.sensitivity {
        cfg.noise.sensitivity = Some(c);
    }
    run_arms(cfg)
}

fn cmd_budget(cfg: &ExperimentConfig, args: &BudgetArgs) -> Result<()> {
    let mut acct = PrivacyAccountant::new(args.sensitivity, args.gamma, args.nu)?;
    let mut running = Vec::with_capacity(if args.csv { args.rounds as usize } else { 0 });
    for k in 0..args.rounds {
        let spent = acct.accumulate(k)?;
        if args.csv {
            running.push((k + 1, spent));
        }
    }
    println!("spent({}) = {}", args.rounds, acct.spent());
    match acct.limit(args.tol) {
        Ok(limit) => println!("limit in [{}, {}]", limit.lower, limit.upper),
        Err(dpgne::error::Error::DivergentRatio { exponent }) => {
            println!("limit diverges (tail exponent {exponent})")
        }
        Err(e) => return Err(e.into()),
    }
    if args.csv {
        let out = create_out(cfg)?;
        let text: String =
            std::iter::once("k,spent\n".to_string()).chain(running.iter().map(|(k, s)| format!("{k},{s}\n"))).collect();
        write_text(&out.join("budget.csv"), &text)?;
    }
    Ok(())
}

fn cmd_ground_truth(mut cfg: ExperimentConfig, args: &GroundTruthArgs) -> Result<()> {
    apply_instance(&mut cfg, &args.instance)?;
    if let Some(t) = args.tol {
        cfg.ground_truth.tol = t;
    }
    if let Some(m) = args.max_iters {
        cfg.ground_truth.max_iters = m;
    }
    cfg.validate()?;
    let out = create_out(&cfg)?;
    let instance = load_instance(&cfg.instance)?;
    let instance_file = match &instance.path {
        Some(p) => p.clone(),
        None => {
            let p = out.join(INSTANCE_FILE);
            write_text(&p, &instance.text)?;
            p
        }
    };
    let cache = cfg.ground_truth.cache.then(|| truth_cache_path(&instance_file, &instance.text, &cfg.ground_truth));
    let truth = ground_truth(&instance.game, &cfg.ground_truth, cache.as_deref())?;
    write_text(&out.join("ground_truth.txt"), &truth_to_text(&truth))?;
    write_text(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;
    println!(
        "residual {:e} after {} iterations; dual spread {:e}; duals {:?}",
        truth.residual, truth.iterations, truth.dual_spread, truth.lambda
    );
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = base_config(cli)?;
    info!("output directory {}", Path::new(&cfg.out).display());
    match &cli.command {
        Command::Consensus(args) => cmd_consensus(cfg, args),
        Command::Gne(args) => cmd_gne(cfg, args),
        Command::Cournot(args) => cmd_cournot(cfg, args),
        Command::Budget(args) => cmd_budget(&cfg, args),
        Command::GroundTruth(args) => cmd_ground_truth(cfg, args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet { LevelFilter::Warn } else { LevelFilter::Info })
        .parse_default_env()
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
