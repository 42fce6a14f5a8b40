//! Dynamic average consensus with perturbed broadcasts.
//!
//! Each agent tracks the network average of a time-varying reference. Agents
//! broadcast `x_i + noise_i` and subtract their own noisy broadcast when mixing,
//! so the sum of states always equals the sum of references.

use log::warn;

use crate::error::{Error, Result};
use crate::graph::InteractionGraph;
use crate::privacy::{LaplaceNoiseModel, MessageStream, NoiseSource, PrivacyAccountant};
use crate::schedules::{NeumaierSum, SequenceFamily};

/// `out_i = chi * sum_j L_ij (shared_j - shared_i)` for every agent.
pub fn mix_shared(graph: &InteractionGraph, chi: f64, shared: &[Vec<f64>], out: &mut [Vec<f64>]) {
    for (i, o) in out.iter_mut().enumerate() {
        graph.laplacian_combine(i, |j| shared[j].as_slice(), o);
        o.iter_mut().for_each(|v| *v *= chi);
    }
}

/// Messages `value_i + noise_i` written into `shared`.
pub fn perturb_into(values: &[Vec<f64>], noise: &[Vec<f64>], shared: &mut [Vec<f64>]) {
    for ((s, v), n) in shared.iter_mut().zip(values).zip(noise) {
        for ((s, v), n) in s.iter_mut().zip(v).zip(n) {
            *s = v + n;
        }
    }
}

/// Componentwise mean of `m` vectors, with compensated summation.
pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let dim = vectors.first().map_or(0, Vec::len);
    let m = vectors.len() as f64;
    (0..dim)
        .map(|c| {
            let mut acc = NeumaierSum::default();
            vectors.iter().for_each(|v| acc.add(v[c]));
            acc.value() / m
        })
        .collect()
}

fn check_shape(vectors: &[Vec<f64>], players: usize, dim: usize) -> Result<()> {
    if vectors.len() != players {
        return Err(Error::DimensionMismatch { expected: players, got: vectors.len() });
    }
    match vectors.iter().find(|v| v.len() != dim) {
        Some(v) => Err(Error::DimensionMismatch { expected: dim, got: v.len() }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrackingState {
    pub x: Vec<Vec<f64>>,
    pub r_prev: Vec<Vec<f64>>,
    pub k: u64,
}

impl TrackingState {
    /// States start at the references.
    pub fn init(r0: Vec<Vec<f64>>) -> Result<Self> {
        let dim = r0.first().map_or(0, Vec::len);
        check_shape(&r0, r0.len(), dim)?;
        Ok(Self { x: r0.clone(), r_prev: r0, k: 0 })
    }

    pub fn players(&self) -> usize {
        self.x.len()
    }

    pub fn dimension(&self) -> usize {
        self.x.first().map_or(0, Vec::len)
    }

    /// One synchronous round: mix perturbed broadcasts, then add the reference increment.
    pub fn step(
        &mut self,
        r_next: &[Vec<f64>],
        graph: &InteractionGraph,
        chi: f64,
        noise: &[Vec<f64>],
    ) -> Result<()> {
        let (m, d) = (self.players(), self.dimension());
        if graph.players() != m {
            return Err(Error::DimensionMismatch { expected: m, got: graph.players() });
        }
        check_shape(r_next, m, d)?;
        check_shape(noise, m, d)?;
        let mut shared = vec![vec![0.0; d]; m];
        perturb_into(&self.x, noise, &mut shared);
        let mut mixed = vec![vec![0.0; d]; m];
        mix_shared(graph, chi, &shared, &mut mixed);
        for i in 0..m {
            for c in 0..d {
                self.x[i][c] += mixed[i][c] + r_next[i][c] - self.r_prev[i][c];
            }
        }
        self.r_prev = r_next.to_vec();
        self.k += 1;
        Ok(())
    }

    /// `(sum_i ||x_i - xbar||^2, max_i ||x_i - xbar||)`.
    pub fn tracking_error(&self) -> (f64, f64) {
        disagreement(&self.x)
    }

    /// `|sum x - sum r|`, relative to `max(1, |sum r|)`, worst coordinate.
    pub fn conservation_error(&self) -> f64 {
        let xs = mean_vector(&self.x);
        let rs = mean_vector(&self.r_prev);
        xs.iter()
            .zip(&rs)
            .map(|(a, b)| (a - b).abs() / b.abs().max(1.0))
            .fold(0.0, f64::max)
    }
}

/// `(sum_i ||v_i - vbar||^2, max_i ||v_i - vbar||)`.
pub fn disagreement(vectors: &[Vec<f64>]) -> (f64, f64) {
    let mean = mean_vector(vectors);
    vectors.iter().fold((0.0, 0.0), |(sum, max), v| {
        let sq: f64 = v.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum();
        (sum + sq, f64::max(max, sq.sqrt()))
    })
}

/// Supplies the references `r^k`, pulled once per iteration in increasing `k`.
pub trait ReferenceProvider {
    fn reference(&mut self, k: u64) -> Vec<Vec<f64>>;
}

/// Time-invariant references; tracking reduces to average consensus.
#[derive(Debug, Clone)]
pub struct StaticReferences(pub Vec<Vec<f64>>);

impl ReferenceProvider for StaticReferences {
    fn reference(&mut self, _k: u64) -> Vec<Vec<f64>> {
        self.0.clone()
    }
}

/// `r_i^k = base_i + amplitude_i * sum_{j<k} gamma^j cos(freq_i j + phase_i)`,
/// so that `||r_i^{k+1} - r_i^k|| <= gamma^k ||amplitude_i||`.
#[derive(Debug, Clone)]
pub struct DriftingReferences {
    pub base: Vec<Vec<f64>>,
    pub amplitude: Vec<Vec<f64>>,
    pub frequency: Vec<f64>,
    pub phase: Vec<f64>,
    pub gamma: SequenceFamily,
    current: Vec<Vec<f64>>,
    next_k: u64,
}

impl DriftingReferences {
    pub fn new(
        base: Vec<Vec<f64>>,
        amplitude: Vec<Vec<f64>>,
        frequency: Vec<f64>,
        phase: Vec<f64>,
        gamma: SequenceFamily,
    ) -> Self {
        let current = base.clone();
        Self { base, amplitude, frequency, phase, gamma, current, next_k: 0 }
    }

    /// Largest per-step drift relative to `gamma^k`.
    pub fn drift_constant(&self) -> f64 {
        self.amplitude
            .iter()
            .map(|a| a.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

impl ReferenceProvider for DriftingReferences {
    fn reference(&mut self, k: u64) -> Vec<Vec<f64>> {
        assert!(k >= self.next_k.saturating_sub(1), "references are pulled in order");
        while self.next_k <= k {
            if self.next_k > 0 {
                let j = self.next_k - 1;
                let g = self.gamma.at_iteration(j);
                for (i, r) in self.current.iter_mut().enumerate() {
                    let wave = (self.frequency[i] * j as f64 + self.phase[i]).cos();
                    for (v, a) in r.iter_mut().zip(&self.amplitude[i]) {
                        *v += g * a * wave;
                    }
                }
            }
            self.next_k += 1;
        }
        self.current.clone()
    }
}

/// Reference drift contract `||r^{k+1} - r^k|| <= gamma^k C`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftBound {
    pub gamma: SequenceFamily,
    pub constant: f64,
}

#[derive(Debug, Clone)]
pub struct TrackingConfig {
    pub chi: SequenceFamily,
    pub noise: LaplaceNoiseModel,
    pub drift: DriftBound,
    pub horizon: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingRecord {
    pub k: u64,
    pub sum_sq_err: f64,
    pub max_err: f64,
    /// `||xbar^k - rbar^k||`
    pub mean_vs_target: f64,
    /// Budget charged for iterations before `k`; infinite without noise.
    pub eps_spent: f64,
}

#[derive(Debug, Clone)]
pub struct TrackingTrace {
    pub records: Vec<TrackingRecord>,
    pub drift_violations: u64,
    pub worst_conservation_error: f64,
}

/// Runs the protocol for `horizon` rounds and records the state before each round.
pub fn run_tracking(
    references: &mut dyn ReferenceProvider,
    graph: &InteractionGraph,
    config: &TrackingConfig,
) -> Result<TrackingTrace> {
    let source = NoiseSource::new(config.seed);
    let mut state = TrackingState::init(references.reference(0))?;
    let (m, d) = (state.players(), state.dimension());
    if config.noise.dimension != d {
        return Err(Error::DimensionMismatch { expected: d, got: config.noise.dimension });
    }
    let mut accountant = match config.noise.nu {
        Some(nu) => Some(PrivacyAccountant::new(config.drift.constant, config.drift.gamma, nu)?),
        None => None,
    };
    let mut records = Vec::with_capacity(config.horizon as usize);
    let mut noise = vec![vec![0.0; d]; m];
    let mut drift_violations = 0;
    let mut worst_conservation_error: f64 = 0.0;

    for k in 0..config.horizon {
        let (sum_sq_err, max_err) = state.tracking_error();
        let xbar = mean_vector(&state.x);
        let rbar = mean_vector(&state.r_prev);
        let mean_vs_target = xbar.iter().zip(&rbar).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        worst_conservation_error = worst_conservation_error.max(state.conservation_error());
        records.push(TrackingRecord {
            k,
            sum_sq_err,
            max_err,
            mean_vs_target,
            eps_spent: accountant.as_ref().map_or(f64::INFINITY, PrivacyAccountant::spent),
        });

        let r_next = references.reference(k + 1);
        let allowed = config.drift.gamma.at_iteration(k) * config.drift.constant;
        for (next, prev) in r_next.iter().zip(&state.r_prev) {
            let step = next.iter().zip(prev).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if step > allowed * (1.0 + 1e-12) {
                drift_violations += 1;
            }
        }
        for (i, n) in noise.iter_mut().enumerate() {
            source.fill_laplace(k, i, MessageStream::State, config.noise.scale_at(k), n);
        }
        state.step(&r_next, graph, config.chi.at_iteration(k), &noise)?;
        if let Some(acct) = accountant.as_mut() {
            acct.accumulate(k)?;
        }
    }
    if drift_violations > 0 {
        warn!("reference drift exceeded gamma^k C in {drift_violations} agent-steps");
    }
    Ok(TrackingTrace { records, drift_violations, worst_conservation_error })
}
