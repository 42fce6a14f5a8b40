//! Generalized Nash equilibrium seeking.
//!
//! The distributed solver runs one synchronous round per iteration: every
//! player takes a projected forward step using its own estimates of the
//! average decision and the average dual, exchanges perturbed estimates with
//! its neighbors, and relaxes toward the new point. The full-information
//! variant replaces every estimate by the exact network average.

use log::warn;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::consensus::{mean_vector, mix_shared};
use crate::error::{Error, Result};
use crate::game::GameSpec;
use crate::graph::InteractionGraph;
use crate::privacy::{LaplaceNoiseModel, MessageStream, NoiseSource};
use crate::schedules::{ScheduleSet, SequenceFamily, StepSizes};

/// Default upper clamp on the auxiliary dual variables.
pub const DEFAULT_DUAL_CAP: f64 = 1e3;

#[derive(Debug, Clone, PartialEq)]
pub struct PlayerState {
    pub x: Vec<f64>,
    pub x_tilde: Vec<f64>,
    pub x_prev: Vec<f64>,
    pub x_tilde_prev: Vec<f64>,
    pub lambda: Vec<f64>,
    pub lambda_tilde: Vec<f64>,
    /// Estimate of the average decision.
    pub sigma: Vec<f64>,
    /// Estimate of the average constraint signal.
    pub y: Vec<f64>,
    /// Estimate of the average dual.
    pub z: Vec<f64>,
}

impl PlayerState {
    /// Estimates start at the player's own values; the previous-step decision
    /// and auxiliary decision both default to `x0`, so `y = C_i x0 - c_i`.
    pub fn new(game: &GameSpec, i: usize, x0: Vec<f64>, lambda0: Vec<f64>) -> Self {
        let mut y = vec![0.0; game.constraints()];
        game.coupling[i].apply(&x0, &mut y);
        for (v, c) in y.iter_mut().zip(&game.coupling[i].offset) {
            *v -= c;
        }
        Self {
            x_tilde: x0.clone(),
            x_prev: x0.clone(),
            x_tilde_prev: x0.clone(),
            sigma: x0.clone(),
            x: x0,
            lambda_tilde: lambda0.clone(),
            z: lambda0.clone(),
            lambda: lambda0,
            y,
        }
    }
}

/// `x0` uniform in each box, `lambda0` uniform in `[0, 1]^n`.
pub fn init_algorithm2<R: Rng>(game: &GameSpec, rng: &mut R) -> Vec<PlayerState> {
    let x0 = game.sample_profile(rng);
    x0.into_iter()
        .enumerate()
        .map(|(i, xi)| {
            let lambda0 = (0..game.constraints()).map(|_| rng.random::<f64>()).collect();
            PlayerState::new(game, i, xi, lambda0)
        })
        .collect()
}

/// Update rules for the dual and dual-estimate recursions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateVariant {
    /// Dual relaxes toward its auxiliary value; the dual estimate absorbs the dual increment.
    #[default]
    Corrected,
    /// Dual relaxes toward the auxiliary dual minus the decision, and the dual
    /// estimate receives no increment. Breaks the averaging identities; for
    /// debugging only, and only when decisions and duals share a dimension.
    PrintedTypos,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundOptions {
    pub dual_cap: f64,
    pub variant: UpdateVariant,
}

impl Default for RoundOptions {
    fn default() -> Self {
        Self { dual_cap: DEFAULT_DUAL_CAP, variant: UpdateVariant::Corrected }
    }
}

/// Double-buffered distributed solver state.
#[derive(Debug, Clone)]
pub struct DistributedSolver<'a> {
    game: &'a GameSpec,
    graph: &'a InteractionGraph,
    options: RoundOptions,
    states: Vec<PlayerState>,
    next: Vec<PlayerState>,
    k: u64,
    clamp_hits: u64,
    noise_sigma: Vec<Vec<f64>>,
    noise_y: Vec<Vec<f64>>,
    noise_z: Vec<Vec<f64>>,
    shared: Vec<Vec<f64>>,
    mix_sigma: Vec<Vec<f64>>,
    mix_y: Vec<Vec<f64>>,
    mix_z: Vec<Vec<f64>>,
}

impl<'a> DistributedSolver<'a> {
    pub fn new(
        game: &'a GameSpec,
        graph: &'a InteractionGraph,
        states: Vec<PlayerState>,
        options: RoundOptions,
    ) -> Result<Self> {
        let (m, d, n) = (game.players(), game.dimension(), game.constraints());
        if graph.players() != m || states.len() != m {
            return Err(Error::DimensionMismatch { expected: m, got: graph.players().min(states.len()) });
        }
        if options.variant == UpdateVariant::PrintedTypos && n != d {
            return Err(Error::DimensionMismatch { expected: d, got: n });
        }
        let grid = |w: usize| vec![vec![0.0; w]; m];
        Ok(Self {
            game,
            graph,
            options,
            next: states.clone(),
            states,
            k: 0,
            clamp_hits: 0,
            noise_sigma: grid(d),
            noise_y: grid(n),
            noise_z: grid(n),
            shared: grid(d.max(n)),
            mix_sigma: grid(d),
            mix_y: grid(n),
            mix_z: grid(n),
        })
    }

    pub fn states(&self) -> &[PlayerState] {
        &self.states
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    /// Times an auxiliary dual coordinate hit the upper clamp.
    pub fn clamp_hits(&self) -> u64 {
        self.clamp_hits
    }

    fn draw_noise(&mut self, source: &NoiseSource, scale: f64) {
        for i in 0..self.states.len() {
            source.fill_laplace(self.k, i, MessageStream::Sigma, scale, &mut self.noise_sigma[i]);
            source.fill_laplace(self.k, i, MessageStream::Y, scale, &mut self.noise_y[i]);
            source.fill_laplace(self.k, i, MessageStream::Z, scale, &mut self.noise_z[i]);
        }
    }

    fn mix(&mut self, chi: f64) {
        for stream in [MessageStream::Sigma, MessageStream::Y, MessageStream::Z] {
            for (j, s) in self.states.iter().enumerate() {
                let (value, noise) = match stream {
                    MessageStream::Sigma => (&s.sigma, &self.noise_sigma[j]),
                    MessageStream::Y => (&s.y, &self.noise_y[j]),
                    _ => (&s.z, &self.noise_z[j]),
                };
                let shared = &mut self.shared[j];
                shared.clear();
                shared.extend(value.iter().zip(noise).map(|(v, e)| v + e));
            }
            let out = match stream {
                MessageStream::Sigma => &mut self.mix_sigma,
                MessageStream::Y => &mut self.mix_y,
                _ => &mut self.mix_z,
            };
            mix_shared(self.graph, chi, &self.shared, out);
        }
    }

    /// One synchronous round at stepsizes `sizes` with Laplace scale `noise_scale`.
    pub fn step(&mut self, sizes: StepSizes, noise_scale: f64, source: &NoiseSource) -> Result<()> {
        let game = self.game;
        let (d, n) = (game.dimension(), game.constraints());
        self.draw_noise(source, noise_scale);
        self.mix(sizes.chi);

        let mut grad = vec![0.0; d];
        let mut dual_pull = vec![0.0; d];
        let mut reflected = vec![0.0; d];
        let mut signal = vec![0.0; n];
        let mut signal_prev = vec![0.0; n];
        for i in 0..self.states.len() {
            let cur = &self.states[i];
            let nxt = &mut self.next[i];
            let coupling = &game.coupling[i];

            game.oracle.gradient(i, &cur.x, &cur.sigma, &mut grad);
            coupling.apply_transpose(&cur.z, &mut dual_pull);
            for c in 0..d {
                nxt.x_tilde[c] = cur.x[c] - sizes.alpha * (grad[c] + dual_pull[c]);
            }
            game.boxes[i].project_in_place(&mut nxt.x_tilde);

            for c in 0..d {
                reflected[c] = 2.0 * nxt.x_tilde[c] - cur.x[c];
            }
            coupling.apply(&reflected, &mut signal);
            for c in 0..d {
                reflected[c] = 2.0 * cur.x_tilde_prev[c] - cur.x_prev[c];
            }
            coupling.apply(&reflected, &mut signal_prev);
            for r in 0..n {
                nxt.y[r] = cur.y[r] + self.mix_y[i][r] + signal[r] - signal_prev[r];
            }

            for r in 0..n {
                let raw = cur.lambda[r] + sizes.beta * (nxt.y[r] - cur.lambda[r] + cur.z[r]);
                if raw > self.options.dual_cap {
                    self.clamp_hits += 1;
                }
                nxt.lambda_tilde[r] = raw.clamp(0.0, self.options.dual_cap);
            }

            for c in 0..d {
                nxt.x[c] = cur.x[c] + sizes.gamma * (nxt.x_tilde[c] - cur.x[c]);
                nxt.sigma[c] = cur.sigma[c] + self.mix_sigma[i][c] + nxt.x[c] - cur.x[c];
            }
            for r in 0..n {
                match self.options.variant {
                    UpdateVariant::Corrected => {
                        nxt.lambda[r] = cur.lambda[r] + sizes.gamma * (nxt.lambda_tilde[r] - cur.lambda[r]);
                        nxt.z[r] = cur.z[r] + self.mix_z[i][r] + nxt.lambda[r] - cur.lambda[r];
                    }
                    UpdateVariant::PrintedTypos => {
                        nxt.lambda[r] = cur.lambda[r] + sizes.gamma * (nxt.lambda_tilde[r] - cur.x[r]);
                        nxt.z[r] = cur.z[r] + self.mix_z[i][r];
                    }
                }
            }
            nxt.x_prev.copy_from_slice(&cur.x);
            nxt.x_tilde_prev.copy_from_slice(&nxt.x_tilde);
        }
        std::mem::swap(&mut self.states, &mut self.next);
        self.k += 1;
        for (i, s) in self.states.iter().enumerate() {
            if s.x.iter().chain(&s.lambda).chain(&s.sigma).chain(&s.z).chain(&s.y).any(|v| !v.is_finite()) {
                return Err(Error::NumericalFailure {
                    iteration: self.k as usize,
                    what: format!("non-finite state for player {i}"),
                });
            }
        }
        Ok(())
    }

    pub fn decisions(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.x.clone()).collect()
    }

    pub fn duals(&self) -> Vec<Vec<f64>> {
        self.states.iter().map(|s| s.lambda.clone()).collect()
    }

    /// Average of the constraint signals that produced the current `y`.
    pub fn signal_mean(&self) -> Vec<f64> {
        let signals: Vec<Vec<f64>> = self
            .states
            .iter()
            .enumerate()
            .map(|(i, s)| self.game.constraint_signal(i, &s.x_tilde_prev, &s.x_prev).expect("shapes checked"))
            .collect();
        mean_vector(&signals)
    }

    /// Disagreement of each estimate with the quantity it tracks:
    /// `sqrt(sum_i ||est_i - target||^2)` for sigma, z and y.
    pub fn consensus_errors(&self) -> EstimateErrors {
        let xbar = mean_vector(&self.decisions());
        let lbar = mean_vector(&self.duals());
        let dbar = self.signal_mean();
        let spread = |f: fn(&PlayerState) -> &Vec<f64>, target: &[f64]| {
            self.states
                .iter()
                .map(|s| f(s).iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
                .sum::<f64>()
                .sqrt()
        };
        EstimateErrors {
            sigma: spread(|s| &s.sigma, &xbar),
            z: spread(|s| &s.z, &lbar),
            y: spread(|s| &s.y, &dbar),
        }
    }

    /// Gap between each estimate's network average and its target average,
    /// relative to `max(1, |target|)`, worst coordinate.
    pub fn averaging_errors(&self) -> EstimateErrors {
        let rel = |a: Vec<f64>, b: Vec<f64>| {
            a.iter().zip(&b).map(|(u, v)| (u - v).abs() / v.abs().max(1.0)).fold(0.0, f64::max)
        };
        let column = |f: fn(&PlayerState) -> &Vec<f64>| mean_vector(&self.states.iter().map(|s| f(s).clone()).collect::<Vec<_>>());
        EstimateErrors {
            sigma: rel(column(|s| &s.sigma), column(|s| &s.x)),
            z: rel(column(|s| &s.z), column(|s| &s.lambda)),
            y: rel(column(|s| &s.y), self.signal_mean()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateErrors {
    pub sigma: f64,
    pub z: f64,
    pub y: f64,
}

/// One round of the distributed solver with schedules evaluated at `k`.
pub fn step_algorithm2(
    states: &[PlayerState],
    game: &GameSpec,
    graph: &InteractionGraph,
    k: u64,
    schedules: &ScheduleSet,
    noise: &LaplaceNoiseModel,
    source: &NoiseSource,
) -> Result<Vec<PlayerState>> {
    let mut solver = DistributedSolver::new(game, graph, states.to_vec(), RoundOptions::default())?;
    solver.k = k;
    solver.step(schedules.at_iteration(k), noise.scale_at(k), source)?;
    Ok(solver.states)
}

/// Schedules of the constant-stepsize comparison arm: fixed stepsizes and no weakening.
pub fn constant_baseline_schedules(alpha: f64, beta: f64, gamma: f64, nu: SequenceFamily) -> Result<ScheduleSet> {
    Ok(ScheduleSet {
        alpha: SequenceFamily::constant(alpha)?,
        beta: SequenceFamily::constant(beta)?,
        gamma: SequenceFamily::constant(gamma)?,
        chi: SequenceFamily::constant(1.0)?,
        nu,
    })
}

/// Schedules of the geometric comparison arm: all stepsizes `gamma0 ratio^k`,
/// noise `nu0 noise_ratio^k`, no weakening.
pub fn geometric_baseline_schedules(gamma0: f64, ratio: f64, nu0: f64, noise_ratio: f64) -> Result<ScheduleSet> {
    if !(0.0 < ratio && ratio < 1.0 && 0.0 < noise_ratio && noise_ratio < 1.0) {
        return Err(Error::InvalidParameter(format!("decay ratios {ratio}, {noise_ratio} must lie in (0, 1)")));
    }
    let step = SequenceFamily::geometric(gamma0, ratio)?;
    Ok(ScheduleSet {
        alpha: step,
        beta: step,
        gamma: step,
        chi: SequenceFamily::constant(1.0)?,
        nu: SequenceFamily::geometric(nu0, noise_ratio)?,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn step_baseline_constant(
    states: &[PlayerState],
    game: &GameSpec,
    graph: &InteractionGraph,
    k: u64,
    stepsizes: (f64, f64, f64),
    noise: &LaplaceNoiseModel,
    source: &NoiseSource,
) -> Result<Vec<PlayerState>> {
    let (alpha, beta, gamma) = stepsizes;
    let nu = noise.nu.unwrap_or(SequenceFamily::Constant { a: 1.0 });
    let schedules = constant_baseline_schedules(alpha, beta, gamma, nu)?;
    step_algorithm2(states, game, graph, k, &schedules, noise, source)
}

#[allow(clippy::too_many_arguments)]
pub fn step_baseline_geometric(
    states: &[PlayerState],
    game: &GameSpec,
    graph: &InteractionGraph,
    k: u64,
    gamma0: f64,
    ratio: f64,
    noise: &LaplaceNoiseModel,
    source: &NoiseSource,
) -> Result<Vec<PlayerState>> {
    let schedules = geometric_baseline_schedules(gamma0, ratio, 1.0, ratio.sqrt())?;
    step_algorithm2(states, game, graph, k, &schedules, noise, source)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorPoint {
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
}

impl OperatorPoint {
    pub fn distance(&self, other: &OperatorPoint) -> f64 {
        self.x
            .iter()
            .chain(&self.lambda)
            .zip(other.x.iter().chain(&other.lambda))
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

fn full_information_map(
    game: &GameSpec,
    x: &[Vec<f64>],
    lambda: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    dual_cap: f64,
) -> OperatorPoint {
    let (m, d, n) = (game.players(), game.dimension(), game.constraints());
    let xbar = mean_vector(x);
    let lbar = mean_vector(lambda);
    let mut grad = vec![0.0; d];
    let mut pull = vec![0.0; d];
    let x_tilde: Vec<Vec<f64>> = (0..m)
        .map(|i| {
            game.oracle.gradient(i, &x[i], &xbar, &mut grad);
            game.coupling[i].apply_transpose(&lbar, &mut pull);
            let mut v: Vec<f64> = (0..d).map(|c| x[i][c] - alpha * (grad[c] + pull[c])).collect();
            game.boxes[i].project_in_place(&mut v);
            v
        })
        .collect();
    let signals: Vec<Vec<f64>> =
        (0..m).map(|i| game.constraint_signal(i, &x_tilde[i], &x[i]).expect("shapes checked")).collect();
    let ybar = mean_vector(&signals);
    let lambda_tilde = (0..m)
        .map(|i| (0..n).map(|r| (lambda[i][r] + beta * (ybar[r] - lambda[i][r] + lbar[r])).clamp(0.0, dual_cap)).collect())
        .collect();
    OperatorPoint { x: x_tilde, lambda: lambda_tilde }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FullInfoStep {
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub x_tilde: Vec<Vec<f64>>,
    pub lambda_tilde: Vec<Vec<f64>>,
}

fn check_pair(game: &GameSpec, x: &[Vec<f64>], lambda: &[Vec<f64>]) -> Result<()> {
    let m = game.players();
    if x.len() != m || lambda.len() != m {
        return Err(Error::DimensionMismatch { expected: m, got: x.len().min(lambda.len()) });
    }
    for (xi, li) in x.iter().zip(lambda) {
        if xi.len() != game.dimension() {
            return Err(Error::DimensionMismatch { expected: game.dimension(), got: xi.len() });
        }
        if li.len() != game.constraints() {
            return Err(Error::DimensionMismatch { expected: game.constraints(), got: li.len() });
        }
    }
    Ok(())
}

/// One full-information round with exact network averages.
pub fn step_algorithm3(
    game: &GameSpec,
    x: &[Vec<f64>],
    lambda: &[Vec<f64>],
    alpha: f64,
    beta: f64,
    gamma: f64,
) -> Result<FullInfoStep> {
    check_pair(game, x, lambda)?;
    let aux = full_information_map(game, x, lambda, alpha, beta, DEFAULT_DUAL_CAP);
    let relax = |from: &[Vec<f64>], to: &[Vec<f64>]| -> Vec<Vec<f64>> {
        from.iter()
            .zip(to)
            .map(|(a, b)| a.iter().zip(b).map(|(u, v)| u + gamma * (v - u)).collect())
            .collect()
    };
    Ok(FullInfoStep {
        x: relax(x, &aux.x),
        lambda: relax(lambda, &aux.lambda),
        x_tilde: aux.x,
        lambda_tilde: aux.lambda,
    })
}

/// The auxiliary-point map `(x, lambda) -> (x_tilde, lambda_tilde)` at stepsizes `(alpha, beta)`.
pub fn apply_rk(point: &OperatorPoint, game: &GameSpec, alpha: f64, beta: f64) -> OperatorPoint {
    let cap = game.players() as f64 / (2.0 * game.coupling_norm_bound());
    if alpha > cap || beta > cap {
        warn!("stepsizes ({alpha}, {beta}) exceed the cap {cap}; the map may be expansive");
    }
    full_information_map(game, &point.x, &point.lambda, alpha, beta, f64::INFINITY)
}

/// Natural-map residual of the equilibrium conditions with a common dual:
/// `||x - P_boxes[x - (F(x) + C' lambda)]|| + ||lambda - P_+[lambda + (Cx - c)]||`.
pub fn kkt_residual(game: &GameSpec, x: &[Vec<f64>], lambda: &[f64]) -> Result<f64> {
    let grad = game.full_gradient(x)?;
    let violation = game.coupling_violation(x)?;
    let d = game.dimension();
    let mut pull = vec![0.0; d];
    let mut primal = 0.0;
    for (i, (xi, gi)) in x.iter().zip(&grad).enumerate() {
        game.coupling[i].apply_transpose(lambda, &mut pull);
        let mut v: Vec<f64> = (0..d).map(|c| xi[c] - (gi[c] + pull[c])).collect();
        game.boxes[i].project_in_place(&mut v);
        primal += xi.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    let dual: f64 = lambda
        .iter()
        .zip(&violation)
        .map(|(l, g)| (l - (l + g).max(0.0)).powi(2))
        .sum();
    Ok(primal.sqrt() + dual.sqrt())
}

/// Checks without a new best residual before the ground-truth step is halved.
pub const STALL_CHECKS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthOptions {
    pub tol: f64,
    pub max_iters: usize,
    pub check_every: usize,
}

impl Default for GroundTruthOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 400_000, check_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub x: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub residual: f64,
    pub iterations: usize,
    /// `max_i ||lambda_i - lambda_bar||` at termination.
    pub dual_spread: f64,
    /// Step in use at termination, after any halving.
    pub stepsize: f64,
}

/// Largest ratio `||F(a) - F(b)|| / ||a - b||` seen on random pairs in the boxes.
pub fn estimate_lipschitz<R: Rng>(game: &GameSpec, pairs: usize, rng: &mut R) -> f64 {
    let mut worst: f64 = 0.0;
    for _ in 0..pairs {
        let a = game.sample_profile(rng);
        let b = game.sample_profile(rng);
        let (fa, fb) = (game.full_gradient(&a).expect("shapes"), game.full_gradient(&b).expect("shapes"));
        let flat = |u: &[Vec<f64>], v: &[Vec<f64>]| -> f64 {
            u.iter().zip(v).flat_map(|(p, q)| p.iter().zip(q).map(|(s, t)| (s - t).powi(2))).sum::<f64>().sqrt()
        };
        let dist = flat(&a, &b);
        if dist > 0.0 {
            worst = worst.max(flat(&fa, &fb) / dist);
        }
    }
    worst
}

/// Variational equilibrium by the full-information iteration with constant
/// stepsizes `1 / L` (capped), started from zero.
///
/// `1 / L` uses a sampled Lipschitz estimate and can land in a 2-cycle, so the
/// step is halved whenever the residual has not improved for
/// [`STALL_CHECKS`] consecutive checks.
pub fn compute_ground_truth(game: &GameSpec, options: &GroundTruthOptions) -> Result<GroundTruth> {
    if !(options.tol > 0.0) {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lipschitz = estimate_lipschitz(game, 64, &mut rng).max(1e-12);
    let cap = game.players() as f64 / (2.0 * game.coupling_norm_bound().max(1e-12));
    let mut step = (1.0 / lipschitz).min(cap);

    let mut x = vec![vec![0.0; game.dimension()]; game.players()];
    for (xi, bx) in x.iter_mut().zip(&game.boxes) {
        bx.project_in_place(xi);
    }
    let mut lambda = vec![vec![0.0; game.constraints()]; game.players()];
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for it in 1..=options.max_iters {
        let next = step_algorithm3(game, &x, &lambda, step, step, 1.0)?;
        x = next.x;
        lambda = next.lambda;
        if it % options.check_every == 0 || it == options.max_iters {
            let lbar = mean_vector(&lambda);
            let residual = kkt_residual(game, &x, &lbar)?;
            let dual_spread = lambda
                .iter()
                .map(|l| l.iter().zip(&lbar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
                .fold(0.0, f64::max);
            if !residual.is_finite() {
                return Err(Error::NumericalFailure { iteration: it, what: "non-finite residual".into() });
            }
            if residual < best {
                best = residual;
                stalled = 0;
            } else {
                stalled += 1;
                if stalled == STALL_CHECKS {
                    step *= 0.5;
                    stalled = 0;
                }
            }
            if residual < options.tol && dual_spread < options.tol {
                return Ok(GroundTruth { x, lambda: lbar, residual, iterations: it, dual_spread, stepsize: step });
            }
        }
    }
    Err(Error::NoConvergence { iterations: options.max_iters, best_residual: best })
}
