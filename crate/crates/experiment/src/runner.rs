//! Study preparation, single trials and Monte Carlo orchestration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dpgne::consensus::{DriftBound, DriftingReferences, TrackingConfig, TrackingTrace, mean_vector, run_tracking};
use dpgne::game::{CournotRanges, CournotSpec, GameSpec, make_cournot};
use dpgne::graph::{InteractionGraph, random_connected_graph};
use dpgne::privacy::{CALIBRATION_TOLERANCE, LaplaceNoiseModel, NoiseSource, PrivacyAccountant, calibrate_noise};
use dpgne::schedules::{NeumaierSum, ScheduleSet, SequenceFamily};
use dpgne::solver::{
    DistributedSolver, GroundTruth, GroundTruthOptions, RoundOptions, UpdateVariant, compute_ground_truth,
    constant_baseline_schedules, geometric_baseline_schedules, init_algorithm2, kkt_residual, step_algorithm3,
};
use log::{info, warn};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ArmKind, ExperimentConfig, GraphConfig, GroundTruthConfig, InstanceConfig, NoiseMode};
use crate::error::{ExperimentError, Result};

/// Safety factor applied to the pilot-run bound.
pub const PILOT_SAFETY_FACTOR: f64 = 1.5;

/// Seeds of one trial, shared by every arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrialSeeds {
    pub init: u64,
    pub noise: u64,
}

pub fn trial_seeds(root: u64, trial: usize) -> TrialSeeds {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(trial as u64);
    TrialSeeds { init: rng.next_u64(), noise: rng.next_u64() }
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub spec: Arc<CournotSpec>,
    pub game: GameSpec,
    /// Serialized instance; hashed for the ground-truth cache.
    pub text: String,
    /// File the instance came from, if any.
    pub path: Option<PathBuf>,
}

pub fn load_instance(cfg: &InstanceConfig) -> Result<Instance> {
    match &cfg.path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
            let spec = Arc::new(CournotSpec::from_text(&text)?);
            let game = spec.to_game()?;
            Ok(Instance { spec, game, text, path: Some(path.clone()) })
        }
        None => {
            let (game, spec) = make_cournot(cfg.firms, cfg.markets, cfg.seed, &CournotRanges::default())?;
            Ok(Instance { text: spec.to_text(), spec, game, path: None })
        }
    }
}

/// Reads the edge list, or generates a graph on `players` agents.
pub fn build_configured_graph(cfg: &GraphConfig, players: usize) -> Result<InteractionGraph> {
    match &cfg.path {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
            Ok(InteractionGraph::from_edge_list(&text)?)
        }
        None => Ok(random_connected_graph(players, cfg.edge_probability, cfg.weight_scale, cfg.seed)?),
    }
}

/// As [`build_configured_graph`], checking the agent count against the instance.
pub fn load_graph(cfg: &GraphConfig, players: usize) -> Result<InteractionGraph> {
    let graph = build_configured_graph(cfg, players)?;
    if graph.players() != players {
        return Err(ExperimentError::Config(format!(
            "graph has {} players, instance has {players}",
            graph.players()
        )));
    }
    Ok(graph)
}

fn truth_cache_key(instance_text: &str, cfg: &GroundTruthConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(instance_text.as_bytes());
    hasher.update(format!("\ntol {:e}\nmax_iters {}\n", cfg.tol, cfg.max_iters).as_bytes());
    hasher.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Cache file for the ground truth of `instance_file`.
pub fn truth_cache_path(instance_file: &Path, instance_text: &str, cfg: &GroundTruthConfig) -> PathBuf {
    let mut name = instance_file.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{}.truth", truth_cache_key(instance_text, cfg)));
    instance_file.with_file_name(name)
}

fn join_floats(values: &[f64]) -> String {
    let mut out = String::new();
    for (c, v) in values.iter().enumerate() {
        if c > 0 {
            out.push(' ');
        }
        write!(out, "{v:e}").expect("string write");
    }
    out
}

pub fn truth_to_text(truth: &GroundTruth) -> String {
    let mut out = String::from("format dpgne-truth 1\n");
    writeln!(out, "residual {:e}", truth.residual).expect("string write");
    writeln!(out, "iterations {}", truth.iterations).expect("string write");
    writeln!(out, "dual_spread {:e}", truth.dual_spread).expect("string write");
    writeln!(out, "stepsize {:e}", truth.stepsize).expect("string write");
    writeln!(out, "lambda {}", join_floats(&truth.lambda)).expect("string write");
    for xi in &truth.x {
        writeln!(out, "x {}", join_floats(xi)).expect("string write");
    }
    out
}

pub fn truth_from_text(text: &str) -> Option<GroundTruth> {
    let mut lines = text.lines();
    if lines.next()? != "format dpgne-truth 1" {
        return None;
    }
    let mut truth = GroundTruth {
        x: Vec::new(),
        lambda: Vec::new(),
        residual: f64::NAN,
        iterations: 0,
        dual_spread: f64::NAN,
        stepsize: f64::NAN,
    };
    for line in lines {
        let (key, rest) = line.split_once(' ').unwrap_or((line, ""));
        let floats = || rest.split_whitespace().map(|t| t.parse::<f64>().ok()).collect::<Option<Vec<_>>>();
        match key {
            "residual" => truth.residual = rest.parse().ok()?,
            "iterations" => truth.iterations = rest.parse().ok()?,
            "dual_spread" => truth.dual_spread = rest.parse().ok()?,
            "stepsize" => truth.stepsize = rest.parse().ok()?,
            "lambda" => truth.lambda = floats()?,
            "x" => truth.x.push(floats()?),
            _ => return None,
        }
    }
    Some(truth)
}

/// Solves for the equilibrium, reusing `cache_file` when it holds a matching solution.
pub fn ground_truth(game: &GameSpec, cfg: &GroundTruthConfig, cache_file: Option<&Path>) -> Result<GroundTruth> {
    if let Some(path) = cache_file {
        if let Ok(text) = std::fs::read_to_string(path) {
            match truth_from_text(&text) {
                Some(truth)
                    if truth.x.len() == game.players() && truth.lambda.len() == game.constraints() =>
                {
                    info!("ground truth loaded from {}", path.display());
                    return Ok(truth);
                }
                _ => warn!("ignoring unreadable ground-truth cache {}", path.display()),
            }
        }
    }
    let options = GroundTruthOptions { tol: cfg.tol, max_iters: cfg.max_iters, ..GroundTruthOptions::default() };
    let truth = compute_ground_truth(game, &options)?;
    info!("ground truth: residual {:e} after {} iterations", truth.residual, truth.iterations);
    if let Some(path) = cache_file {
        std::fs::write(path, truth_to_text(&truth)).map_err(|e| ExperimentError::io(path, e))?;
    }
    Ok(truth)
}

fn l1(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).sum()
}

/// Noise-free pilot of the distributed solver from the first trial's start:
/// `1.5 * max_{k,i} max(||x~_i^k||_1, ||lambda~_i^k||_1)` over computed
/// iterates. The auxiliary values held before the first round are start-up
/// placeholders and are not counted.
pub fn estimate_sensitivity_constant(
    game: &GameSpec,
    graph: &InteractionGraph,
    schedules: &ScheduleSet,
    horizon: u64,
    seed: u64,
    options: RoundOptions,
) -> Result<f64> {
    let seeds = trial_seeds(seed, 0);
    let states = init_algorithm2(game, &mut ChaCha8Rng::seed_from_u64(seeds.init));
    let source = NoiseSource::new(seeds.noise);
    let mut solver = DistributedSolver::new(game, graph, states, options)?;
    let largest = |solver: &DistributedSolver| {
        solver.states().iter().map(|s| l1(&s.x_tilde).max(l1(&s.lambda_tilde))).fold(0.0, f64::max)
    };
    let mut worst: f64 = 0.0;
    for k in 0..horizon {
        solver.step(schedules.at_iteration(k), 0.0, &source)?;
        worst = worst.max(largest(&solver));
    }
    if !worst.is_finite() {
        return Err(dpgne::error::Error::NumericalFailure {
            iteration: horizon as usize,
            what: "pilot run diverged".into(),
        }
        .into());
    }
    Ok(PILOT_SAFETY_FACTOR * worst)
}

/// Ratio `q` for which `gamma0 * sum_{k<horizon} q^k` equals the stepsize
/// mass of `gamma` over the horizon.
pub fn matched_geometric_ratio(gamma: &SequenceFamily, gamma0: f64, horizon: u64) -> Result<f64> {
    let mut mass = NeumaierSum::default();
    for k in 0..horizon {
        mass.add(gamma.at_iteration(k));
    }
    let target = mass.value() / gamma0;
    let t = horizon as f64;
    if !(target > 1.0 && target < t) {
        return Err(ExperimentError::Config(format!(
            "stepsize mass {} cannot be matched by a geometric sequence starting at {gamma0}",
            mass.value()
        )));
    }
    let geometric_mass = |q: f64| (1.0 - q.powf(t)) / (1.0 - q);
    let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if geometric_mass(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// One configured comparison arm.
#[derive(Debug, Clone)]
pub struct ArmPlan {
    pub kind: ArmKind,
    pub schedules: ScheduleSet,
    pub noise: LaplaceNoiseModel,
    /// Infinite-horizon budget, when finite and noise is on.
    pub epsilon: Option<f64>,
}

/// Everything the trials of one experiment share.
#[derive(Debug, Clone)]
pub struct Study {
    /// Configuration with every derived default filled in.
    pub config: ExperimentConfig,
    pub instance: Instance,
    pub graph: InteractionGraph,
    pub truth: GroundTruth,
    pub sensitivity: Option<f64>,
    pub arms: Vec<ArmPlan>,
}

impl Study {
    /// Loads or generates the instance and graph, solves for the equilibrium
    /// and resolves every arm. A generated instance caches its ground truth
    /// under `config.out`.
    pub fn prepare(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let instance = load_instance(&config.instance)?;
        let cache = if config.ground_truth.cache {
            let file = instance.path.clone().unwrap_or_else(|| config.out.join(crate::export::INSTANCE_FILE));
            if instance.path.is_none() {
                std::fs::create_dir_all(&config.out).map_err(|e| ExperimentError::io(&config.out, e))?;
            }
            Some(truth_cache_path(&file, &instance.text, &config.ground_truth))
        } else {
            None
        };
        let truth = ground_truth(&instance.game, &config.ground_truth, cache.as_deref())?;
        Self::with_truth(config, instance, truth)
    }

    /// As [`Study::prepare`] with an already computed equilibrium.
    pub fn with_truth(mut config: ExperimentConfig, instance: Instance, truth: GroundTruth) -> Result<Self> {
        config.validate()?;
        let game = &instance.game;
        let graph = load_graph(&config.graph, game.players())?;
        let schedules = ScheduleSet::parse(&config.schedule)?;
        let options = round_options(&config);
        let wants_budget = config.noise.mode != NoiseMode::Off;
        let sensitivity = match (config.noise.sensitivity, wants_budget) {
            (Some(c), _) => Some(c),
            (None, true) => {
                let pilot = config.noise.pilot_horizon.unwrap_or(config.horizon);
                let c = estimate_sensitivity_constant(game, &graph, &schedules, pilot, config.seed, options)?;
                info!("pilot sensitivity constant {c}");
                Some(c)
            }
            (None, false) => None,
        };
        config.noise.sensitivity = sensitivity;

        let dim = game.dimension();
        let (dp_noise, dp_epsilon) = match config.noise.mode {
            NoiseMode::Off => (LaplaceNoiseModel::disabled(dim), None),
            NoiseMode::Raw => {
                let c = sensitivity.expect("set above");
                let accountant = PrivacyAccountant::new(c, schedules.gamma, schedules.nu)?;
                let epsilon = match accountant.limit(2.0 * c * CALIBRATION_TOLERANCE) {
                    Ok(limit) => Some(limit.upper),
                    Err(dpgne::error::Error::DivergentRatio { .. }) => None,
                    Err(e) => return Err(e.into()),
                };
                (LaplaceNoiseModel::new(schedules.nu, dim), epsilon)
            }
            NoiseMode::Calibrated => {
                let epsilon = config.noise.epsilon.expect("validated");
                let c = sensitivity.expect("set above");
                let cal = calibrate_noise(epsilon, c, &schedules.gamma, &schedules.nu, dim)?;
                (cal.model, Some(epsilon))
            }
        };

        let mut arms = Vec::with_capacity(config.arms.len());
        for &kind in &config.arms {
            let arm = match kind {
                ArmKind::Dp => ArmPlan { kind, schedules, noise: dp_noise.clone(), epsilon: dp_epsilon },
                ArmKind::Full => {
                    let step = SequenceFamily::constant(truth.stepsize)?;
                    let plan = ScheduleSet { alpha: step, beta: step, gamma: SequenceFamily::constant(1.0)?, ..schedules };
                    ArmPlan { kind, schedules: plan, noise: LaplaceNoiseModel::disabled(dim), epsilon: None }
                }
                ArmKind::Constant => {
                    let s = config.baselines.constant_stepsize;
                    let nu = dp_noise.nu.unwrap_or(schedules.nu);
                    let plan = constant_baseline_schedules(s, s, s, nu)?;
                    ArmPlan { kind, schedules: plan, noise: dp_noise.clone(), epsilon: None }
                }
                ArmKind::Geometric => {
                    let gamma0 = config.baselines.geometric_initial_stepsize;
                    let ratio = match config.baselines.geometric_ratio {
                        Some(q) => q,
                        None => matched_geometric_ratio(&schedules.gamma, gamma0, config.horizon)?,
                    };
                    let noise_ratio = config.baselines.geometric_noise_ratio.unwrap_or(ratio.sqrt());
                    config.baselines.geometric_ratio = Some(ratio);
                    config.baselines.geometric_noise_ratio = Some(noise_ratio);
                    if !(ratio < noise_ratio) {
                        return Err(ExperimentError::Config(format!(
                            "geometric noise ratio {noise_ratio} must exceed the stepsize ratio {ratio}"
                        )));
                    }
                    match (dp_noise.is_enabled(), dp_epsilon, sensitivity) {
                        (false, _, _) => {
                            let plan = geometric_baseline_schedules(gamma0, ratio, 1.0, noise_ratio)?;
                            ArmPlan { kind, schedules: plan, noise: LaplaceNoiseModel::disabled(dim), epsilon: None }
                        }
                        (true, Some(epsilon), Some(c)) => {
                            // sum_k 2 C gamma0 q^k / (nu0 p^k) = epsilon
                            let nu0 = 2.0 * c * gamma0 / (epsilon * (1.0 - ratio / noise_ratio));
                            let plan = geometric_baseline_schedules(gamma0, ratio, nu0, noise_ratio)?;
                            ArmPlan { kind, schedules: plan, noise: LaplaceNoiseModel::new(plan.nu, dim), epsilon: Some(epsilon) }
                        }
                        _ => {
                            return Err(ExperimentError::Config(
                                "the geometric arm needs a finite dp budget to match".into(),
                            ));
                        }
                    }
                }
            };
            arms.push(arm);
        }
        Ok(Self { config, instance, graph, truth, sensitivity, arms })
    }

    pub fn arm(&self, kind: ArmKind) -> Option<&ArmPlan> {
        self.arms.iter().find(|a| a.kind == kind)
    }
}

fn round_options(config: &ExperimentConfig) -> RoundOptions {
    RoundOptions {
        dual_cap: config.dual_cap,
        variant: if config.faithful_typos { UpdateVariant::PrintedTypos } else { UpdateVariant::Corrected },
    }
}

/// Metrics of one iteration, taken before the round at `k` runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TrialRecord {
    pub k: u64,
    pub dist_to_gne: f64,
    pub kkt_residual: f64,
    pub consensus_err_sigma: f64,
    pub consensus_err_z: f64,
    pub consensus_err_y: f64,
    /// Budget charged for rounds before `k`; infinite when noise is off.
    pub eps_spent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial: usize,
    pub records: Vec<TrialRecord>,
    /// Set when the trial stopped early; `records` then holds the partial trace.
    pub failure: Option<String>,
    pub clamp_hits: u64,
}

impl TrialOutcome {
    pub fn completed(&self, horizon: u64) -> bool {
        self.failure.is_none() && self.records.len() as u64 == horizon
    }

    pub fn errors(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.dist_to_gne).collect()
    }
}

fn distance(x: &[Vec<f64>], target: &[Vec<f64>]) -> f64 {
    x.iter()
        .zip(target)
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Runs one trial of `arm`; deterministic in `(config.seed, trial)`.
pub fn run_trial(study: &Study, arm: &ArmPlan, trial: usize) -> Result<TrialOutcome> {
    let game = &study.instance.game;
    let horizon = study.config.horizon;
    let seeds = trial_seeds(study.config.seed, trial);
    let states = init_algorithm2(game, &mut ChaCha8Rng::seed_from_u64(seeds.init));
    let mut records = Vec::with_capacity(horizon as usize);
    let mut outcome = TrialOutcome { trial, records: Vec::new(), failure: None, clamp_hits: 0 };

    let check = |record: &TrialRecord| -> std::result::Result<(), String> {
        if record.dist_to_gne.is_finite() && record.kkt_residual.is_finite() {
            Ok(())
        } else {
            Err(format!("non-finite metrics at iteration {}", record.k))
        }
    };

    if arm.kind == ArmKind::Full {
        let mut x: Vec<Vec<f64>> = states.iter().map(|s| s.x.clone()).collect();
        let mut lambda: Vec<Vec<f64>> = states.iter().map(|s| s.lambda.clone()).collect();
        for k in 0..horizon {
            let record = TrialRecord {
                k,
                dist_to_gne: distance(&x, &study.truth.x),
                kkt_residual: kkt_residual(game, &x, &mean_vector(&lambda))?,
                consensus_err_sigma: 0.0,
                consensus_err_z: 0.0,
                consensus_err_y: 0.0,
                eps_spent: f64::INFINITY,
            };
            if let Err(msg) = check(&record) {
                outcome.failure = Some(msg);
                break;
            }
            records.push(record);
            let sizes = arm.schedules.at_iteration(k);
            match step_algorithm3(game, &x, &lambda, sizes.alpha, sizes.beta, sizes.gamma) {
                Ok(next) => {
                    x = next.x;
                    lambda = next.lambda;
                }
                Err(e) => {
                    outcome.failure = Some(e.to_string());
                    break;
                }
            }
        }
        outcome.records = records;
        return Ok(outcome);
    }

    let source = NoiseSource::new(seeds.noise);
    let mut solver = DistributedSolver::new(game, &study.graph, states, round_options(&study.config))?;
    let mut accountant = match (arm.noise.nu, study.sensitivity) {
        (Some(nu), Some(c)) => Some(PrivacyAccountant::new(c, arm.schedules.gamma, nu)?),
        _ => None,
    };
    for k in 0..horizon {
        let x = solver.decisions();
        let errors = solver.consensus_errors();
        let record = TrialRecord {
            k,
            dist_to_gne: distance(&x, &study.truth.x),
            kkt_residual: kkt_residual(game, &x, &mean_vector(&solver.duals()))?,
            consensus_err_sigma: errors.sigma,
            consensus_err_z: errors.z,
            consensus_err_y: errors.y,
            eps_spent: accountant.as_ref().map_or(f64::INFINITY, |a| a.spent()),
        };
        if let Err(msg) = check(&record) {
            outcome.failure = Some(msg);
            break;
        }
        records.push(record);
        if let Err(e) = solver.step(arm.schedules.at_iteration(k), arm.noise.scale_at(k), &source) {
            outcome.failure = Some(e.to_string());
            break;
        }
        if let Some(acct) = accountant.as_mut() {
            acct.accumulate(k)?;
        }
    }
    outcome.clamp_hits = solver.clamp_hits();
    if outcome.clamp_hits > 0 {
        warn!("{} trial {trial}: dual clamp hit {} times", arm.kind, outcome.clamp_hits);
    }
    outcome.records = records;
    Ok(outcome)
}

/// Per-iteration mean and sample variance of the distance to equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// Completed trials that entered the statistics.
    pub trials: usize,
}

/// Reduces curves in the given order, so the result does not depend on
/// which worker finished first. A single curve has zero variance.
pub fn aggregate(curves: &[Vec<f64>], horizon: usize) -> Aggregate {
    let n = curves.len();
    let mut mean = vec![0.0; horizon];
    let mut variance = vec![0.0; horizon];
    if n == 0 {
        return Aggregate { mean: vec![f64::NAN; horizon], variance: vec![f64::NAN; horizon], trials: 0 };
    }
    for k in 0..horizon {
        let mut sum = NeumaierSum::default();
        curves.iter().for_each(|c| sum.add(c[k]));
        mean[k] = sum.value() / n as f64;
        if n > 1 {
            let mut sq = NeumaierSum::default();
            curves.iter().for_each(|c| sq.add((c[k] - mean[k]).powi(2)));
            variance[k] = sq.value() / (n - 1) as f64;
        }
    }
    Aggregate { mean, variance, trials: n }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialSummary {
    pub trial: usize,
    pub iterations: usize,
    pub initial_error: f64,
    pub final_error: f64,
    pub final_kkt: f64,
    pub eps_final: f64,
    /// `sum_k gamma^k (sigma + z + y estimate errors)`: a realized proxy for the
    /// summability of the perturbation driving the fixed-point iteration.
    /// Reported only; it should level off when the estimates converge fast enough.
    pub weighted_estimate_error: f64,
    pub clamp_hits: u64,
    pub failure: Option<String>,
}

impl TrialSummary {
    fn of(outcome: &TrialOutcome, gamma: &SequenceFamily) -> Self {
        let mut weighted = NeumaierSum::default();
        for r in &outcome.records {
            weighted.add(gamma.at_iteration(r.k) * (r.consensus_err_sigma + r.consensus_err_z + r.consensus_err_y));
        }
        let first = outcome.records.first();
        let last = outcome.records.last();
        Self {
            trial: outcome.trial,
            iterations: outcome.records.len(),
            initial_error: first.map_or(f64::NAN, |r| r.dist_to_gne),
            final_error: last.map_or(f64::NAN, |r| r.dist_to_gne),
            final_kkt: last.map_or(f64::NAN, |r| r.kkt_residual),
            eps_final: last.map_or(f64::NAN, |r| r.eps_spent),
            weighted_estimate_error: weighted.value(),
            clamp_hits: outcome.clamp_hits,
            failure: outcome.failure.clone(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArmResult {
    pub kind: ArmKind,
    pub summaries: Vec<TrialSummary>,
    /// Distance curves of the completed trials, in trial order.
    pub curves: Vec<Vec<f64>>,
    pub aggregate: Aggregate,
}

impl ArmResult {
    pub fn failures(&self) -> usize {
        self.summaries.iter().filter(|s| s.failure.is_some()).count()
    }
}

/// Runs `trials` trials of `arm` on a pool of `config.jobs` workers. With
/// `trial_dir`, each trial's trace is written to `trial_<t>.csv` there.
pub fn run_monte_carlo(study: &Study, arm: &ArmPlan, trials: usize, trial_dir: Option<&Path>) -> Result<ArmResult> {
    let horizon = study.config.horizon;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(study.config.jobs)
        .build()
        .map_err(|e| ExperimentError::Config(format!("worker pool: {e}")))?;
    let results: Vec<(TrialSummary, Option<Vec<f64>>)> = pool.install(|| {
        (0..trials)
            .into_par_iter()
            .map(|t| {
                let outcome = run_trial(study, arm, t)?;
                if let Some(dir) = trial_dir {
                    crate::export::write_trial_csv(&dir.join(format!("trial_{t}.csv")), &outcome.records)?;
                }
                if let Some(msg) = &outcome.failure {
                    warn!("{} trial {t} failed: {msg}", arm.kind);
                }
                let curve = outcome.completed(horizon).then(|| outcome.errors());
                Ok((TrialSummary::of(&outcome, &arm.schedules.gamma), curve))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let (summaries, curves): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    let curves: Vec<Vec<f64>> = curves.into_iter().flatten().collect();
    let aggregate = aggregate(&curves, horizon as usize);
    Ok(ArmResult { kind: arm.kind, summaries, curves, aggregate })
}

/// Runs every configured arm in order.
pub fn run_study(study: &Study, out: Option<&Path>) -> Result<Vec<ArmResult>> {
    let mut results = Vec::with_capacity(study.arms.len());
    for arm in &study.arms {
        let dir = out.map(|o| o.join(arm.kind.name()));
        if let Some(d) = &dir {
            std::fs::create_dir_all(d).map_err(|e| ExperimentError::io(d, e))?;
        }
        let started = std::time::Instant::now();
        let result = run_monte_carlo(study, arm, study.config.trials, dir.as_deref())?;
        info!(
            "{} arm: {} trials in {:.1?}, final mean error {:e}",
            arm.kind,
            study.config.trials,
            started.elapsed(),
            result.aggregate.mean.last().copied().unwrap_or(f64::NAN)
        );
        results.push(result);
    }
    Ok(results)
}

/// References for the consensus command: `base ~ U[0,10]`, `amplitude ~ U[0,1]`,
/// per-agent frequency `~ U[0.05, 0.5]` and phase `~ U[0, 2 pi)`.
pub fn drifting_references(players: usize, dimension: usize, gamma: SequenceFamily, seed: u64) -> DriftingReferences {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grid = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
        (0..players).map(|_| (0..dimension).map(|_| rng.random_range(lo..hi)).collect()).collect()
    };
    let base = grid(0.0, 10.0);
    let amplitude = grid(0.0, 1.0);
    let frequency = (0..players).map(|_| rng.random_range(0.05..0.5)).collect();
    let phase = (0..players).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
    DriftingReferences::new(base, amplitude, frequency, phase, gamma)
}

#[derive(Debug, Clone)]
pub struct ConsensusRun {
    pub trace: TrackingTrace,
    pub sensitivity: f64,
    pub noise: LaplaceNoiseModel,
}

/// Tracking run of the consensus protocol on the configured graph.
pub fn run_consensus(config: &ExperimentConfig) -> Result<ConsensusRun> {
    config.validate()?;
    let cc = &config.consensus;
    let graph = build_configured_graph(&config.graph, cc.players)?;
    let schedules = ScheduleSet::parse(&config.schedule)?;
    let seeds = trial_seeds(config.seed, 0);
    let mut references = drifting_references(graph.players(), cc.dimension, schedules.gamma, seeds.init);
    let sensitivity = config.noise.sensitivity.unwrap_or_else(|| references.drift_constant());
    let noise = match config.noise.mode {
        NoiseMode::Off => LaplaceNoiseModel::disabled(cc.dimension),
        NoiseMode::Raw => LaplaceNoiseModel::new(schedules.nu, cc.dimension),
        NoiseMode::Calibrated => {
            let eps = config.noise.epsilon.expect("validated");
            calibrate_noise(eps, sensitivity, &schedules.gamma, &schedules.nu, cc.dimension)?.model
        }
    };
    let tracking = TrackingConfig {
        chi: schedules.chi,
        noise: noise.clone(),
        drift: DriftBound { gamma: schedules.gamma, constant: sensitivity },
        horizon: config.horizon,
        seed: seeds.noise,
    };
    let trace = run_tracking(&mut references, &graph, &tracking)?;
    Ok(ConsensusRun { trace, sensitivity, noise })
}
