//! Laplace perturbation of shared messages and cumulative budget accounting.

use rand::SeedableRng;
use rand::distr::Distribution;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::Laplace;

use crate::error::{Error, Result};
use crate::schedules::{NeumaierSum, RatioSum, SequenceFamily, ratio_sum};

/// Tail tolerance used when calibrating noise to a budget.
pub const CALIBRATION_TOLERANCE: f64 = 1e-4;

/// Which broadcast a noise vector perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MessageStream {
    /// The tracking state of the consensus protocol.
    State,
    /// Aggregate-decision estimate.
    Sigma,
    /// Constraint-violation estimate.
    Y,
    /// Dual estimate.
    Z,
}

impl MessageStream {
    fn tag(self) -> u64 {
        match self {
            Self::State => 1,
            Self::Sigma => 2,
            Self::Y => 3,
            Self::Z => 4,
        }
    }
}

/// Counter-based randomness: every `(iteration, agent, stream)` triple reads
/// its own ChaCha stream under a key derived from the trial seed, so draws do
/// not depend on evaluation order.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    key: [u8; 32],
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rand::Rng::fill_bytes(&mut rng, &mut key);
        Self { key }
    }

    fn stream(&self, k: u64, agent: usize, stream: MessageStream) -> ChaCha8Rng {
        assert!(agent < 1 << 16, "agent index exceeds stream layout");
        assert!(k < 1 << 40, "iteration exceeds stream layout");
        let mut rng = ChaCha8Rng::from_seed(self.key);
        rng.set_stream((k << 24) | ((agent as u64) << 8) | stream.tag());
        rng
    }

    /// Fills `out` with independent Laplace(0, `scale`) draws; `scale == 0` gives zeros.
    pub fn fill_laplace(&self, k: u64, agent: usize, stream: MessageStream, scale: f64, out: &mut [f64]) {
        if scale == 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
            return;
        }
        let dist = Laplace::new(0.0, scale).expect("Laplace scale must be positive and finite");
        let mut rng = self.stream(k, agent, stream);
        for v in out.iter_mut() {
            // The inverse-CDF sampler maps one endpoint of its uniform draw to infinity.
            *v = loop {
                let draw = dist.sample(&mut rng);
                if draw.is_finite() {
                    break draw;
                }
            };
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaplaceNoiseModel {
    /// `None` disables perturbation.
    pub nu: Option<SequenceFamily>,
    pub dimension: usize,
}

impl LaplaceNoiseModel {
    pub fn new(nu: SequenceFamily, dimension: usize) -> Self {
        Self { nu: Some(nu), dimension }
    }

    pub fn disabled(dimension: usize) -> Self {
        Self { nu: None, dimension }
    }

    pub fn is_enabled(&self) -> bool {
        self.nu.is_some()
    }

    /// Laplace scale at iteration `k`.
    pub fn scale_at(&self, k: u64) -> f64 {
        self.nu.map_or(0.0, |nu| nu.at_iteration(k))
    }

    pub fn sample_noise(&self, k: u64, agent: usize, stream: MessageStream, source: &NoiseSource) -> Vec<f64> {
        let mut out = vec![0.0; self.dimension];
        source.fill_laplace(k, agent, stream, self.scale_at(k), &mut out);
        out
    }
}

/// Per-iteration sensitivity bound `2 C gamma_k`.
pub fn sensitivity_bound(sensitivity_constant: f64, gamma_k: f64) -> f64 {
    2.0 * sensitivity_constant * gamma_k
}

#[derive(Debug, Clone)]
pub struct PrivacyAccountant {
    pub sensitivity_constant: f64,
    pub gamma: SequenceFamily,
    pub nu: SequenceFamily,
    spent: NeumaierSum,
    next: u64,
}

impl PrivacyAccountant {
    pub fn new(sensitivity_constant: f64, gamma: SequenceFamily, nu: SequenceFamily) -> Result<Self> {
        if !(sensitivity_constant.is_finite() && sensitivity_constant > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "sensitivity constant {sensitivity_constant} must be positive"
            )));
        }
        Ok(Self { sensitivity_constant, gamma, nu, spent: NeumaierSum::default(), next: 0 })
    }

    /// Charges the messages shared at iteration `k`; iterations must arrive in order from 0.
    pub fn accumulate(&mut self, k: u64) -> Result<f64> {
        if k != self.next {
            return Err(Error::OutOfOrderAccumulation { expected: self.next as usize, got: k as usize });
        }
        let delta = sensitivity_bound(self.sensitivity_constant, self.gamma.at_iteration(k));
        self.spent.add(delta / self.nu.at_iteration(k));
        self.next += 1;
        Ok(self.spent())
    }

    pub fn spent(&self) -> f64 {
        self.spent.value()
    }

    /// Iterations charged so far.
    pub fn iterations(&self) -> u64 {
        self.next
    }

    /// Enclosure of the infinite-horizon budget.
    pub fn limit(&self, tolerance: f64) -> Result<RatioSum> {
        let scale = 2.0 * self.sensitivity_constant;
        let phi = ratio_sum(&self.gamma, &self.nu, tolerance / scale)?;
        Ok(RatioSum { lower: scale * phi.lower, upper: scale * phi.upper, exact_terms: phi.exact_terms })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub model: LaplaceNoiseModel,
    /// Enclosure of `sum gamma / nu_shape`.
    pub phi: RatioSum,
}

/// Scales `nu_shape` by `2 C phi / epsilon` (upper end of the `phi` enclosure)
/// so the infinite-horizon budget does not exceed `epsilon`.
pub fn calibrate_noise(
    epsilon: f64,
    sensitivity_constant: f64,
    gamma: &SequenceFamily,
    nu_shape: &SequenceFamily,
    dimension: usize,
) -> Result<Calibration> {
    if !(epsilon.is_finite() && epsilon > 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon {epsilon} must be positive")));
    }
    let phi = ratio_sum(gamma, nu_shape, CALIBRATION_TOLERANCE)?;
    let scale = 2.0 * sensitivity_constant * phi.upper / epsilon;
    Ok(Calibration { model: LaplaceNoiseModel::new(nu_shape.scaled(scale)?, dimension), phi })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fam(s: &str) -> SequenceFamily {
        s.parse().unwrap()
    }

    #[test]
    fn disabled_model_is_silent() {
        let model = LaplaceNoiseModel::disabled(3);
        let source = NoiseSource::new(1);
        assert_eq!(model.sample_noise(5, 0, MessageStream::Y, &source), vec![0.0; 3]);
    }

    #[test]
    fn draws_are_keyed_by_counter() {
        let model = LaplaceNoiseModel::new(fam("const(2)"), 4);
        let source = NoiseSource::new(9);
        let a = model.sample_noise(3, 2, MessageStream::Sigma, &source);
        assert_eq!(a, model.sample_noise(3, 2, MessageStream::Sigma, &NoiseSource::new(9)));
        assert_ne!(a, model.sample_noise(3, 2, MessageStream::Z, &source));
        assert_ne!(a, model.sample_noise(4, 2, MessageStream::Sigma, &source));
        assert_ne!(a, model.sample_noise(3, 1, MessageStream::Sigma, &source));
        assert_ne!(a, model.sample_noise(3, 2, MessageStream::Sigma, &NoiseSource::new(10)));
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity_bound(1.0, 0.5), 1.0);
        assert_eq!(sensitivity_bound(5.0, 0.0), 0.0);
    }

    #[test]
    fn first_charge_is_one_over_phi() {
        let cal = calibrate_noise(1.0, 1.0, &fam("power(1,-1)"), &fam("power(1,0.3)"), 1).unwrap();
        let mut acct = PrivacyAccountant::new(1.0, fam("power(1,-1)"), cal.model.nu.unwrap()).unwrap();
        let spent = acct.accumulate(0).unwrap();
        assert!((spent - 1.0 / cal.phi.upper).abs() < 1e-15);
        assert!((spent - 0.2543).abs() < 1e-3, "{spent}");
        assert!(matches!(acct.accumulate(5), Err(Error::OutOfOrderAccumulation { expected: 1, got: 5 })));
    }

    #[test]
    fn calibrated_scale_and_inverse_proportionality() {
        let g = fam("power(1,-1)");
        let shape = fam("power(1,0.3)");
        let one = calibrate_noise(1.0, 1.0, &g, &shape, 1).unwrap();
        let two = calibrate_noise(2.0, 1.0, &g, &shape, 1).unwrap();
        assert!((one.model.scale_at(0) - 7.864).abs() < 1e-2, "{}", one.model.scale_at(0));
        assert!((one.model.scale_at(0) - 2.0 * two.model.scale_at(0)).abs() < 1e-12);
    }

    #[test]
    fn constant_ratio_has_no_limit() {
        let acct = PrivacyAccountant::new(1.0, fam("const(0.1)"), fam("const(1)")).unwrap();
        assert!(matches!(acct.limit(1e-3), Err(Error::DivergentRatio { .. })));
    }

    #[test]
    fn accountant_matches_independent_partial_sum() {
        let gamma = fam("poly(0.1,0.1,1)");
        let nu = fam("affine(1,0.1,0.2)");
        let mut acct = PrivacyAccountant::new(3.0, gamma, nu).unwrap();
        for k in 0..10_000 {
            acct.accumulate(k).unwrap();
        }
        let direct: f64 = (0..10_000u64)
            .map(|k| {
                let kf = k as f64;
                2.0 * 3.0 * (0.1 / (1.0 + 0.1 * kf)) / (1.0 + 0.1 * kf.powf(0.2))
            })
            .sum();
        assert!((acct.spent() - direct).abs() < 1e-10 * direct);
    }
}
