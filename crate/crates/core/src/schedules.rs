//! Parametric stepsize, weakening-factor and noise-scale sequences.
//!
//! Every family has a closed-form tail `value(k) ~ factor * k^exponent * ratio^k`
//! with a monotone `factor`, which lets summability be decided from exponents
//! instead of numerically.
//!
//! Algorithms iterate `k = 0, 1, ...`. Power families (`a * k^c`) are indexed
//! from 1, so [`SequenceFamily::at_iteration`] evaluates them at `k + 1`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SequenceFamily {
    /// `a / (1 + b k^c)`
    Poly { a: f64, b: f64, c: f64 },
    /// `a k^c`
    Power { a: f64, c: f64 },
    /// `a + b k^c`
    AffinePower { a: f64, b: f64, c: f64 },
    Constant { a: f64 },
    /// `a q^k`
    Geometric { a: f64, ratio: f64 },
}

/// Tail shape `k^exponent * ratio^k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tail {
    pub exponent: f64,
    pub ratio: f64,
}

impl Tail {
    fn times(self, other: Tail) -> Tail {
        Tail { exponent: self.exponent + other.exponent, ratio: self.ratio * other.ratio }
    }

    fn over(self, other: Tail) -> Tail {
        Tail { exponent: self.exponent - other.exponent, ratio: self.ratio / other.ratio }
    }

    fn squared(self) -> Tail {
        self.times(self)
    }

    /// Whether `sum_k k^exponent ratio^k` is finite.
    pub fn summable(self) -> bool {
        self.ratio < 1.0 || (self.ratio == 1.0 && self.exponent < -1.0)
    }

    /// Whether `k^exponent ratio^k` stays bounded.
    pub fn bounded(self) -> bool {
        self.ratio < 1.0 || (self.ratio == 1.0 && self.exponent <= 0.0)
    }
}

impl SequenceFamily {
    pub fn poly(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::Poly { a, b, c }.checked()
    }

    pub fn power(a: f64, c: f64) -> Result<Self> {
        Self::Power { a, c }.checked()
    }

    pub fn affine_power(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::AffinePower { a, b, c }.checked()
    }

    pub fn constant(a: f64) -> Result<Self> {
        Self::Constant { a }.checked()
    }

    pub fn geometric(a: f64, ratio: f64) -> Result<Self> {
        Self::Geometric { a, ratio }.checked()
    }

    fn checked(self) -> Result<Self> {
        let (a, rest): (f64, Vec<f64>) = match self {
            Self::Poly { a, b, c } | Self::AffinePower { a, b, c } => (a, vec![b, c]),
            Self::Power { a, c } => (a, vec![c]),
            Self::Constant { a } => (a, vec![]),
            Self::Geometric { a, ratio } => (a, vec![ratio]),
        };
        if !(a.is_finite() && a > 0.0) || rest.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFamily(format!("{self}: parameters must be finite with a > 0")));
        }
        match self {
            Self::Poly { b, .. } | Self::AffinePower { b, .. } if b < 0.0 => {
                Err(Error::InvalidFamily(format!("{self}: b must be nonnegative")))
            }
            Self::Geometric { ratio, .. } if ratio <= 0.0 => {
                Err(Error::InvalidFamily(format!("{self}: ratio must be positive")))
            }
            _ => Ok(self),
        }
    }

    fn raw(&self, k: f64) -> f64 {
        match *self {
            Self::Poly { a, b, c } => a / (1.0 + b * k.powf(c)),
            Self::Power { a, c } => a * k.powf(c),
            Self::AffinePower { a, b, c } => a + b * k.powf(c),
            Self::Constant { a } => a,
            Self::Geometric { a, ratio } => a * ratio.powf(k),
        }
    }

    fn singular_at_zero(&self) -> bool {
        match *self {
            Self::Power { c, .. } => c < 0.0,
            Self::Poly { b, c, .. } => b > 0.0 && c < 0.0,
            Self::AffinePower { b, c, .. } => b > 0.0 && c < 0.0,
            _ => false,
        }
    }

    /// Value at index `k` as written, e.g. `power(1,-1)` at 2 is 0.5.
    pub fn evaluate(&self, k: u64) -> Result<f64> {
        if k == 0 && self.singular_at_zero() {
            return Err(Error::SingularAtZero { family: self.to_string() });
        }
        Ok(self.raw(k as f64))
    }

    fn shift(&self) -> f64 {
        match self {
            Self::Power { .. } => 1.0,
            _ => 0.0,
        }
    }

    /// Value used at algorithm iteration `k` (power families read index `k + 1`).
    pub fn at_iteration(&self, k: u64) -> f64 {
        self.at_iteration_f(k as f64)
    }

    fn at_iteration_f(&self, k: f64) -> f64 {
        self.raw(k + self.shift())
    }

    pub fn tail(&self) -> Tail {
        let polynomial = |exponent| Tail { exponent, ratio: 1.0 };
        match *self {
            Self::Poly { b, c, .. } if b > 0.0 && c > 0.0 => polynomial(-c),
            Self::Power { c, .. } => polynomial(c),
            Self::AffinePower { b, c, .. } if b > 0.0 && c > 0.0 => polynomial(c),
            Self::Geometric { ratio, .. } => Tail { exponent: 0.0, ratio },
            _ => polynomial(0.0),
        }
    }

    /// Limit of `value(k) / (k^exponent ratio^k)`.
    fn factor_limit(&self) -> f64 {
        match *self {
            Self::Poly { a, b, c } if b > 0.0 && c > 0.0 => a / b,
            Self::Poly { a, b, c } if b > 0.0 && c < 0.0 => a,
            Self::Poly { a, b, .. } => a / (1.0 + b),
            Self::Power { a, .. } | Self::Constant { a } | Self::Geometric { a, .. } => a,
            Self::AffinePower { b, c, .. } if b > 0.0 && c > 0.0 => b,
            Self::AffinePower { a, b, c } if b > 0.0 && c < 0.0 => a,
            Self::AffinePower { a, b, .. } => a + b,
        }
    }

    fn factor_at_iteration(&self, k: f64) -> f64 {
        let tail = self.tail();
        self.at_iteration_f(k) / (k.powf(tail.exponent) * tail.ratio.powf(k))
    }

    /// `[min, max]` of the tail factor over iterations `>= k`.
    fn factor_range_from(&self, k: f64) -> (f64, f64) {
        let at = self.factor_at_iteration(k);
        let lim = self.factor_limit();
        (at.min(lim), at.max(lim))
    }

    pub fn is_nonincreasing(&self) -> bool {
        match *self {
            Self::Poly { b, c, .. } => b == 0.0 || c >= 0.0,
            Self::Power { c, .. } => c <= 0.0,
            Self::AffinePower { b, c, .. } => b == 0.0 || c <= 0.0,
            Self::Constant { .. } => true,
            Self::Geometric { ratio, .. } => ratio <= 1.0,
        }
    }

    /// The same family multiplied by `s > 0`.
    pub fn scaled(&self, s: f64) -> Result<Self> {
        match *self {
            Self::Poly { a, b, c } => Self::poly(s * a, b, c),
            Self::Power { a, c } => Self::power(s * a, c),
            Self::AffinePower { a, b, c } => Self::affine_power(s * a, s * b, c),
            Self::Constant { a } => Self::constant(s * a),
            Self::Geometric { a, ratio } => Self::geometric(s * a, ratio),
        }
    }
}

impl fmt::Display for SequenceFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Poly { a, b, c } => write!(f, "poly({a},{b},{c})"),
            Self::Power { a, c } => write!(f, "power({a},{c})"),
            Self::AffinePower { a, b, c } => write!(f, "affine({a},{b},{c})"),
            Self::Constant { a } => write!(f, "const({a})"),
            Self::Geometric { a, ratio } => write!(f, "geom({a},{ratio})"),
        }
    }
}

impl FromStr for SequenceFamily {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::InvalidFamily(format!("cannot parse `{text}`"));
        let text = text.trim();
        let open = text.find('(').ok_or_else(bad)?;
        let body = text[open + 1..].strip_suffix(')').ok_or_else(bad)?;
        let args = body
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad()))
            .collect::<Result<Vec<_>>>()?;
        match (text[..open].trim(), args.as_slice()) {
            ("poly", &[a, b, c]) => Self::poly(a, b, c),
            ("power", &[a, c]) => Self::power(a, c),
            ("affine", &[a, b, c]) => Self::affine_power(a, b, c),
            ("const", &[a]) => Self::constant(a),
            ("geom", &[a, q]) => Self::geometric(a, q),
            _ => Err(bad()),
        }
    }
}

/// The five sequences driving the distributed solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleSet {
    pub alpha: SequenceFamily,
    pub beta: SequenceFamily,
    pub gamma: SequenceFamily,
    pub chi: SequenceFamily,
    /// Noise scale shape; calibration may rescale it.
    pub nu: SequenceFamily,
}

/// Stepsizes in effect at one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub chi: f64,
}

impl ScheduleSet {
    pub const PRESETS: [&'static str; 2] = ["paper-sim", "paper-dp"];

    /// `paper-sim`: the simulation schedules of the Cournot study.
    /// `paper-dp`: `gamma = k^-0.9`, `nu = k^0.3` (shape only), with
    /// `alpha = beta = 0.1 k^-0.9` and the simulation weakening factor.
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper-sim" => {
                let step = SequenceFamily::poly(0.1, 0.1, 1.0)?;
                Ok(Self {
                    alpha: step,
                    beta: step,
                    gamma: step,
                    chi: SequenceFamily::poly(1.0, 0.1, 0.9)?,
                    nu: SequenceFamily::affine_power(1.0, 0.1, 0.2)?,
                })
            }
            "paper-dp" => {
                let step = SequenceFamily::power(0.1, -0.9)?;
                Ok(Self {
                    alpha: step,
                    beta: step,
                    gamma: SequenceFamily::power(1.0, -0.9)?,
                    chi: SequenceFamily::poly(1.0, 0.1, 0.9)?,
                    nu: SequenceFamily::power(1.0, 0.3)?,
                })
            }
            other => Err(Error::InvalidFamily(format!("unknown preset `{other}`"))),
        }
    }

    /// A preset name or `alpha=...;beta=...;gamma=...;chi=...;nu=...`.
    /// Inline keys missing from the string fall back to `paper-sim`.
    pub fn parse(spec: &str) -> Result<Self> {
        if !spec.contains('=') {
            return Self::preset(spec.trim());
        }
        let mut set = Self::preset("paper-sim")?;
        for part in spec.split(';').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidFamily(format!("expected key=family, got `{part}`")))?;
            let family: SequenceFamily = value.parse()?;
            match key.trim() {
                "alpha" => set.alpha = family,
                "beta" => set.beta = family,
                "gamma" => set.gamma = family,
                "chi" => set.chi = family,
                "nu" => set.nu = family,
                other => return Err(Error::InvalidFamily(format!("unknown sequence `{other}`"))),
            }
        }
        Ok(set)
    }

    pub fn at_iteration(&self, k: u64) -> StepSizes {
        StepSizes {
            alpha: self.alpha.at_iteration(k),
            beta: self.beta.at_iteration(k),
            gamma: self.gamma.at_iteration(k),
            chi: self.chi.at_iteration(k),
        }
    }
}

impl fmt::Display for ScheduleSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "alpha={};beta={};gamma={};chi={};nu={}",
            self.alpha, self.beta, self.gamma, self.chi, self.nu
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCheck {
    pub name: &'static str,
    pub holds: bool,
    /// Partial sum over the diagnostic horizon, when the condition is a series.
    pub partial_sum: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub checks: Vec<ConditionCheck>,
}

impl ValidationReport {
    pub fn all_hold(&self) -> bool {
        self.checks.iter().all(|c| c.holds)
    }

    pub fn get(&self, name: &str) -> Option<&ConditionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> Vec<&'static str> {
        self.checks.iter().filter(|c| !c.holds).map(|c| c.name).collect()
    }
}

fn partial_sum(horizon: u64, term: impl Fn(u64) -> f64) -> f64 {
    neumaier_sum((0..horizon).map(term))
}

/// Compensated summation.
pub fn neumaier_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut acc = NeumaierSum::default();
    for v in values {
        acc.add(v);
    }
    acc.value()
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    compensation: f64,
}

impl NeumaierSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.compensation += (self.sum - t) + v;
        } else {
            self.compensation += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

fn consensus_checks(chi: &SequenceFamily, gamma: &SequenceFamily, horizon: u64) -> Vec<ConditionCheck> {
    let (tc, tg) = (chi.tail(), gamma.tail());
    vec![
        ConditionCheck {
            name: "sum chi diverges",
            holds: !tc.summable(),
            partial_sum: Some(partial_sum(horizon, |k| chi.at_iteration(k))),
        },
        ConditionCheck {
            name: "sum chi^2 converges",
            holds: tc.squared().summable(),
            partial_sum: Some(partial_sum(horizon, |k| chi.at_iteration(k).powi(2))),
        },
        ConditionCheck {
            name: "sum gamma^2/chi converges",
            holds: tg.squared().over(tc).summable(),
            partial_sum: Some(partial_sum(horizon, |k| gamma.at_iteration(k).powi(2) / chi.at_iteration(k))),
        },
    ]
}

/// Tracking conditions on the weakening factor and the reference drift scale.
pub fn validate_consensus_conditions(
    chi: &SequenceFamily,
    gamma: &SequenceFamily,
    horizon: u64,
) -> ValidationReport {
    ValidationReport { checks: consensus_checks(chi, gamma, horizon) }
}

/// Convergence conditions for the distributed solver. `coupling_bound` is
/// `max_i ||C_i||` and `players` is `m`; the stepsize caps are checked at
/// `k = 0`, which requires nonincreasing `alpha` and `beta`.
pub fn validate_gne_conditions(
    s: &ScheduleSet,
    coupling_bound: f64,
    players: usize,
    horizon: u64,
) -> Result<ValidationReport> {
    if !s.alpha.is_nonincreasing() {
        return Err(Error::NonMonotoneFamily { name: "alpha" });
    }
    if !s.beta.is_nonincreasing() {
        return Err(Error::NonMonotoneFamily { name: "beta" });
    }
    let series = |name, family: &SequenceFamily, squared: bool| {
        let tail = if squared { family.tail().squared() } else { family.tail() };
        let power = if squared { 2 } else { 1 };
        ConditionCheck {
            name,
            holds: if squared { tail.summable() } else { !tail.summable() },
            partial_sum: Some(partial_sum(horizon, |k| family.at_iteration(k).powi(power))),
        }
    };
    let cap = players as f64 / (2.0 * coupling_bound);
    let mut checks = vec![
        series("sum alpha diverges", &s.alpha, false),
        series("sum beta diverges", &s.beta, false),
        series("sum alpha^2 converges", &s.alpha, true),
        series("sum beta^2 converges", &s.beta, true),
    ];
    checks.extend(consensus_checks(&s.chi, &s.gamma, horizon));
    checks.push(ConditionCheck {
        name: "alpha/gamma bounded",
        holds: s.alpha.tail().over(s.gamma.tail()).bounded(),
        partial_sum: None,
    });
    checks.push(ConditionCheck { name: "alpha cap", holds: s.alpha.at_iteration(0) <= cap, partial_sum: None });
    checks.push(ConditionCheck { name: "beta cap", holds: s.beta.at_iteration(0) <= cap, partial_sum: None });
    Ok(ValidationReport { checks })
}

/// `(chi nu)^2` summable, required for the consensus error to vanish under noise.
pub fn noise_weakening_summable(chi: &SequenceFamily, nu: &SequenceFamily) -> bool {
    chi.tail().times(nu.tail()).squared().summable()
}

/// Certified enclosure of `sum_{k>=0} gamma(k)/nu(k)` over algorithm iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioSum {
    pub lower: f64,
    pub upper: f64,
    /// Terms summed exactly before switching to block bounds.
    pub exact_terms: u64,
}

impl RatioSum {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

const BLOCK_HORIZON: f64 = 1e40;

fn ratio_enclosure(gamma: &SequenceFamily, nu: &SequenceFamily, head: u64, growth: f64) -> (f64, f64) {
    let term = |k: f64| gamma.at_iteration_f(k) / nu.at_iteration_f(k);
    let mut exact = NeumaierSum::default();
    for k in 0..head {
        exact.add(term(k as f64));
    }
    let (mut lo, mut hi) = (exact, exact);

    // Blocks of consecutive iterations; both families are monotone, so
    // each block is bracketed by its endpoint values.
    let mut start = head as f64;
    while start < BLOCK_HORIZON {
        let end = (start * growth).floor().max(start);
        let count = end - start + 1.0;
        let (g0, g1) = (gamma.at_iteration_f(start), gamma.at_iteration_f(end));
        let (n0, n1) = (nu.at_iteration_f(start), nu.at_iteration_f(end));
        let upper = count * g0.max(g1) / n0.min(n1);
        lo.add(count * g0.min(g1) / n0.max(n1));
        hi.add(upper);
        start = end + 1.0;
        if upper == 0.0 {
            return (lo.value(), hi.value());
        }
    }

    let tail = gamma.tail().over(nu.tail());
    if tail.ratio == 1.0 {
        let (g_lo, g_hi) = gamma.factor_range_from(start);
        let (n_lo, n_hi) = nu.factor_range_from(start);
        // sum_{k >= K} k^e lies in [int_K^inf, K^e + int_K^inf] for e < -1.
        let integral = start.powf(tail.exponent + 1.0) / (-tail.exponent - 1.0);
        lo.add(g_lo / n_hi * integral);
        hi.add(g_hi / n_lo * (integral + start.powf(tail.exponent)));
    }
    (lo.value(), hi.value())
}

/// Encloses `sum_k gamma/nu` in an interval of width at most `tail_tolerance`.
pub fn ratio_sum(gamma: &SequenceFamily, nu: &SequenceFamily, tail_tolerance: f64) -> Result<RatioSum> {
    let tail = gamma.tail().over(nu.tail());
    if !tail.summable() {
        return Err(Error::DivergentRatio { exponent: tail.exponent });
    }
    let mut head: u64 = 1 << 16;
    let mut growth_step = 1.0 / 128.0;
    loop {
        let (lower, upper) = ratio_enclosure(gamma, nu, head, 1.0 + growth_step);
        if upper - lower <= tail_tolerance {
            return Ok(RatioSum { lower, upper, exact_terms: head });
        }
        if head >= 1 << 24 {
            return Err(Error::TailToleranceUnreachable { tolerance: tail_tolerance, width: upper - lower });
        }
        head *= 4;
        growth_step /= 4.0;
    }
}
