//! Experiment configuration file.
//!
//! The file is TOML. Every key is optional; omitted keys take the defaults
//! shown below, and each run writes the fully resolved file back to
//! `config.resolved` in its output directory.
//!
//! ```toml
//! seed = 1              # root seed; per-trial seeds derive from it
//! trials = 100
//! horizon = 20000
//! jobs = 0              # worker threads, 0 = one per core
//! arms = ["dp", "constant", "geometric"]
//! schedule = "paper-sim"  # preset name or "alpha=...;beta=...;..."
//! dual_cap = 1000.0
//! faithful_typos = false
//!
//! [instance]            # `path` wins over the generation keys
//! firms = 20
//! markets = 7
//! seed = 1
//!
//! [graph]               # `path` (edge list) wins over the generation keys
//! edge_probability = 0.25
//! weight_scale = 0.1
//! seed = 1
//!
//! [noise]
//! mode = "raw"          # off | raw | calibrated
//! # epsilon = 1.0       # required by calibrated
//! # sensitivity = 10.0  # otherwise estimated by a noise-free pilot run
//! # pilot_horizon = 20000
//!
//! [baselines]
//! constant_stepsize = 0.1
//! geometric_initial_stepsize = 0.1
//! # geometric_ratio = 0.9868      # default: match the dp arm's stepsize mass
//! # geometric_noise_ratio = 0.993 # default: sqrt(geometric_ratio)
//!
//! [ground_truth]
//! tol = 1e-8
//! max_iters = 400000
//! cache = true
//!
//! [consensus]           # used by the `consensus` command only
//! players = 20
//! dimension = 2
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ExperimentError, Result};

/// Default horizon of the Cournot study.
pub const DEFAULT_HORIZON: u64 = 20_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmKind {
    /// The private distributed solver with diminishing schedules.
    Dp,
    /// Full-information iteration at the ground-truth stepsize; noise-free reference.
    Full,
    /// Distributed solver with constant stepsizes and the dp arm's noise.
    Constant,
    /// Distributed solver with geometric stepsizes and noise at the dp arm's budget.
    Geometric,
}

impl ArmKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Dp => "dp",
            Self::Full => "full",
            Self::Constant => "constant",
            Self::Geometric => "geometric",
        }
    }
}

impl fmt::Display for ArmKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArmKind {
    type Err = ExperimentError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "dp" => Ok(Self::Dp),
            "full" => Ok(Self::Full),
            "constant" => Ok(Self::Constant),
            "geometric" => Ok(Self::Geometric),
            other => Err(ExperimentError::Config(format!("unknown arm `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseMode {
    Off,
    /// The schedule's `nu` family is used as the Laplace scale as is.
    Raw,
    /// The schedule's `nu` family is rescaled to meet `epsilon`.
    Calibrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub firms: usize,
    pub markets: usize,
    pub seed: u64,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self { path: None, firms: 20, markets: 7, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub edge_probability: f64,
    pub weight_scale: f64,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { path: None, edge_probability: 0.25, weight_scale: 0.1, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub mode: NoiseMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    /// Sensitivity constant; estimated by a pilot run when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    /// Pilot length; defaults to the horizon.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pilot_horizon: Option<u64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { mode: NoiseMode::Raw, epsilon: None, sensitivity: None, pilot_horizon: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub constant_stepsize: f64,
    pub geometric_initial_stepsize: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometric_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub geometric_noise_ratio: Option<f64>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            constant_stepsize: 0.1,
            geometric_initial_stepsize: 0.1,
            geometric_ratio: None,
            geometric_noise_ratio: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GroundTruthConfig {
    pub tol: f64,
    pub max_iters: usize,
    /// Reuse a cached solution stored beside the instance file.
    pub cache: bool,
}

impl Default for GroundTruthConfig {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 400_000, cache: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConsensusConfig {
    pub players: usize,
    pub dimension: usize,
}

impl Default for ConsensusConfig {
    fn default() -> Self {
        Self { players: 20, dimension: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub horizon: u64,
    pub jobs: usize,
    /// Not written back, so two output trees of the same run compare equal.
    #[serde(skip_serializing)]
    pub out: PathBuf,
    pub arms: Vec<ArmKind>,
    pub schedule: String,
    pub dual_cap: f64,
    pub faithful_typos: bool,
    pub instance: InstanceConfig,
    pub graph: GraphConfig,
    pub noise: NoiseConfig,
    pub baselines: BaselineConfig,
    pub ground_truth: GroundTruthConfig,
    pub consensus: ConsensusConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 100,
            horizon: DEFAULT_HORIZON,
            jobs: 0,
            out: PathBuf::from("out"),
            arms: vec![ArmKind::Dp, ArmKind::Constant, ArmKind::Geometric],
            schedule: "paper-sim".into(),
            dual_cap: dpgne::solver::DEFAULT_DUAL_CAP,
            faithful_typos: false,
            instance: InstanceConfig::default(),
            graph: GraphConfig::default(),
            noise: NoiseConfig::default(),
            baselines: BaselineConfig::default(),
            ground_truth: GroundTruthConfig::default(),
            consensus: ConsensusConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ExperimentError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(ExperimentError::Config(msg));
        if self.horizon < 1 {
            return fail("horizon must be at least 1".into());
        }
        if self.trials < 1 {
            return fail("trials must be at least 1".into());
        }
        if self.arms.is_empty() {
            return fail("no arms configured".into());
        }
        if !(self.dual_cap > 0.0) {
            return fail(format!("dual_cap {} must be positive", self.dual_cap));
        }
        match (self.noise.mode, self.noise.epsilon) {
            (NoiseMode::Calibrated, None) => return fail("calibrated noise needs noise.epsilon".into()),
            (NoiseMode::Calibrated, Some(eps)) if !(eps.is_finite() && eps > 0.0) => {
                return fail(format!("epsilon {eps} must be positive"));
            }
            _ => {}
        }
        if let Some(c) = self.noise.sensitivity {
            if !(c.is_finite() && c > 0.0) {
                return fail(format!("sensitivity {c} must be positive"));
            }
        }
        let b = &self.baselines;
        if !(b.constant_stepsize > 0.0 && b.geometric_initial_stepsize > 0.0) {
            return fail("baseline stepsizes must be positive".into());
        }
        for ratio in [b.geometric_ratio, b.geometric_noise_ratio].into_iter().flatten() {
            if !(0.0 < ratio && ratio < 1.0) {
                return fail(format!("geometric ratio {ratio} must lie in (0, 1)"));
            }
        }
        if !(self.ground_truth.tol > 0.0) || self.ground_truth.max_iters == 0 {
            return fail("ground truth needs a positive tolerance and iteration cap".into());
        }
        if self.consensus.players == 0 || self.consensus.dimension == 0 {
            return fail("consensus players and dimension must be positive".into());
        }
        dpgne::schedules::ScheduleSet::parse(&self.schedule).map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn resolved_form_reloads() {
        let mut cfg = ExperimentConfig::default();
        cfg.noise.sensitivity = Some(41.25);
        cfg.baselines.geometric_ratio = Some(0.9868);
        cfg.instance.path = Some("inst.game".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, ExperimentConfig { out: back.out.clone(), ..cfg });
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(ExperimentConfig::from_toml("horizn = 5").is_err());
        let cfg = ExperimentConfig::from_toml("[noise]\nmode = \"calibrated\"").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml("trials = 0").unwrap();
        assert!(cfg.validate().is_err());
        let cfg = ExperimentConfig::from_toml("schedule = \"alpha=poly(1\"").unwrap();
        assert!(cfg.validate().is_err());
    }
}
