//! Games with box strategy sets and shared affine coupling constraints, and
//! the networked Nash-Cournot instance generator.

use std::fmt::{self, Write as _};
use std::sync::Arc;

use log::warn;
use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Redraw budget for [`make_cournot`].
pub const MAX_INSTANCE_REDRAWS: usize = 100;

/// Pseudogradient `F_i(v, u)`: player `i`'s cost gradient at its own decision
/// `v`, given an estimate `u` of the average decision.
pub trait PseudoGradient: fmt::Debug + Send + Sync {
    fn gradient(&self, i: usize, v: &[f64], u: &[f64], out: &mut [f64]);
}

/// A box `[lower, upper]` with coordinates outside `active` pinned to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub active: Vec<bool>,
}

impl PlayerBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, active: Vec<bool>) -> Result<Self> {
        let d = lower.len();
        for len in [upper.len(), active.len()] {
            if len != d {
                return Err(Error::DimensionMismatch { expected: d, got: len });
            }
        }
        let ok = lower
            .iter()
            .zip(&upper)
            .all(|(lo, hi)| lo.is_finite() && hi.is_finite() && lo <= hi);
        let pinned_ok = (0..d).all(|c| active[c] || (lower[c] <= 0.0 && 0.0 <= upper[c]));
        if !ok || !pinned_ok {
            return Err(Error::InvalidParameter("box bounds must be finite with lower <= upper".into()));
        }
        Ok(Self { lower, upper, active })
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    /// Euclidean projection, in place.
    pub fn project_in_place(&self, v: &mut [f64]) {
        for (c, value) in v.iter_mut().enumerate() {
            *value = if self.active[c] { value.clamp(self.lower[c], self.upper[c]) } else { 0.0 };
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        v.iter().enumerate().all(|(c, &x)| {
            if self.active[c] {
                self.lower[c] <= x && x <= self.upper[c]
            } else {
                x == 0.0
            }
        })
    }
}

pub fn project_box(v: &[f64], bx: &PlayerBox) -> Result<Vec<f64>> {
    if v.len() != bx.dimension() {
        return Err(Error::DimensionMismatch { expected: bx.dimension(), got: v.len() });
    }
    let mut out = v.to_vec();
    bx.project_in_place(&mut out);
    Ok(out)
}

pub fn project_nonneg(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| x.max(0.0)).collect()
}

/// Player `i`'s share of `sum_i C_i x_i <= sum_i c_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// `n x d`
    pub matrix: DMatrix<f64>,
    pub offset: Vec<f64>,
}

impl Coupling {
    /// `out = C v`
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..v.len()).map(|c| self.matrix[(r, c)] * v[c]).sum();
        }
    }

    /// `out = C' w`
    pub fn apply_transpose(&self, w: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            *o = (0..w.len()).map(|r| self.matrix[(r, c)] * w[r]).sum();
        }
    }
}

#[derive(Debug, Clone)]
pub struct GameSpec {
    pub boxes: Vec<PlayerBox>,
    pub coupling: Vec<Coupling>,
    pub oracle: Arc<dyn PseudoGradient>,
}

impl GameSpec {
    pub fn new(boxes: Vec<PlayerBox>, coupling: Vec<Coupling>, oracle: Arc<dyn PseudoGradient>) -> Result<Self> {
        if boxes.is_empty() || coupling.len() != boxes.len() {
            return Err(Error::DimensionMismatch { expected: boxes.len(), got: coupling.len() });
        }
        let d = boxes[0].dimension();
        let n = coupling[0].offset.len();
        for (bx, cp) in boxes.iter().zip(&coupling) {
            if bx.dimension() != d || cp.matrix.ncols() != d {
                return Err(Error::DimensionMismatch { expected: d, got: cp.matrix.ncols() });
            }
            if cp.matrix.nrows() != n || cp.offset.len() != n {
                return Err(Error::DimensionMismatch { expected: n, got: cp.matrix.nrows() });
            }
        }
        Ok(Self { boxes, coupling, oracle })
    }

    pub fn players(&self) -> usize {
        self.boxes.len()
    }

    /// Per-player decision dimension `d`.
    pub fn dimension(&self) -> usize {
        self.boxes[0].dimension()
    }

    /// Number of coupling constraints `n`.
    pub fn constraints(&self) -> usize {
        self.coupling[0].offset.len()
    }

    /// `max_i ||C_i||` (spectral norm).
    pub fn coupling_norm_bound(&self) -> f64 {
        self.coupling
            .iter()
            .map(|c| c.matrix.clone().svd(false, false).singular_values.max())
            .fold(0.0, f64::max)
    }

    /// `sum_i c_i`
    pub fn total_offset(&self) -> Vec<f64> {
        let mut total = vec![0.0; self.constraints()];
        for cp in &self.coupling {
            for (t, c) in total.iter_mut().zip(&cp.offset) {
                *t += c;
            }
        }
        total
    }

    fn check_profile(&self, x: &[Vec<f64>]) -> Result<()> {
        if x.len() != self.players() {
            return Err(Error::DimensionMismatch { expected: self.players(), got: x.len() });
        }
        match x.iter().find(|v| v.len() != self.dimension()) {
            Some(v) => Err(Error::DimensionMismatch { expected: self.dimension(), got: v.len() }),
            None => Ok(()),
        }
    }

    /// `sum_i C_i x_i - sum_i c_i`; nonpositive iff the coupling holds.
    pub fn coupling_violation(&self, x: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check_profile(x)?;
        let n = self.constraints();
        let mut total = vec![0.0; n];
        let mut buf = vec![0.0; n];
        for (cp, xi) in self.coupling.iter().zip(x) {
            cp.apply(xi, &mut buf);
            for r in 0..n {
                total[r] += buf[r] - cp.offset[r];
            }
        }
        Ok(total)
    }

    /// `2 C_i x_tilde - C_i x - c_i`
    pub fn constraint_signal(&self, i: usize, x_tilde: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dimension();
        for v in [x_tilde, x] {
            if v.len() != d {
                return Err(Error::DimensionMismatch { expected: d, got: v.len() });
            }
        }
        let reflected: Vec<f64> = x_tilde.iter().zip(x).map(|(t, v)| 2.0 * t - v).collect();
        let mut out = vec![0.0; self.constraints()];
        self.coupling[i].apply(&reflected, &mut out);
        for (o, c) in out.iter_mut().zip(&self.coupling[i].offset) {
            *o -= c;
        }
        Ok(out)
    }

    /// Stacked `F(x) = (F_i(x_i, xbar))_i`.
    pub fn full_gradient(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        self.check_profile(x)?;
        let m = self.players() as f64;
        let d = self.dimension();
        let mean: Vec<f64> = (0..d).map(|c| x.iter().map(|v| v[c]).sum::<f64>() / m).collect();
        Ok(x.iter()
            .enumerate()
            .map(|(i, xi)| {
                let mut g = vec![0.0; d];
                self.oracle.gradient(i, xi, &mean, &mut g);
                g
            })
            .collect())
    }

    /// A profile drawn uniformly from the product of boxes.
    pub fn sample_profile<R: rand::Rng>(&self, rng: &mut R) -> Vec<Vec<f64>> {
        self.boxes
            .iter()
            .map(|bx| {
                (0..bx.dimension())
                    .map(|c| if bx.active[c] { rng.random_range(bx.lower[c]..=bx.upper[c]) } else { 0.0 })
                    .collect()
            })
            .collect()
    }
}

/// Smallest `<x - x', F(x) - F(x')> / ||x - x'||^2` over random pairs in the boxes.
pub fn monotonicity_probe<R: rand::Rng>(game: &GameSpec, pairs: usize, rng: &mut R) -> f64 {
    let mut worst = f64::INFINITY;
    for _ in 0..pairs {
        let a = game.sample_profile(rng);
        let b = game.sample_profile(rng);
        let (fa, fb) = (game.full_gradient(&a).unwrap(), game.full_gradient(&b).unwrap());
        let mut inner = 0.0;
        let mut dist = 0.0;
        for i in 0..game.players() {
            for c in 0..game.dimension() {
                let dx = a[i][c] - b[i][c];
                inner += dx * (fa[i][c] - fb[i][c]);
                dist += dx * dx;
            }
        }
        if dist > 0.0 {
            worst = worst.min(inner / dist);
        }
    }
    worst
}

/// Uniform ranges for the random Cournot draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CournotRanges {
    pub capacity: (f64, f64),
    /// Market capacity as a fraction of the summed firm capacities.
    pub capacity_fraction: (f64, f64),
    pub cost_quadratic: (f64, f64),
    pub cost_linear: (f64, f64),
    pub price_intercept: (f64, f64),
    pub price_slope: (f64, f64),
    pub participation_probability: f64,
}

impl Default for CournotRanges {
    fn default() -> Self {
        Self {
            capacity: (8.0, 10.0),
            capacity_fraction: (0.0, 1.0),
            cost_quadratic: (1.0, 10.0),
            cost_linear: (1.0, 2.0),
            price_intercept: (10.0, 20.0),
            price_slope: (1.0, 3.0),
            participation_probability: 0.5,
        }
    }
}

/// Firms compete over markets with linear inverse demand
/// `price = intercept - slope * supply`. Vectors are indexed by market;
/// per-firm quantities are `[firm][market]`, zero where the firm is absent.
#[derive(Debug, Clone, PartialEq)]
pub struct CournotSpec {
    pub participation: Vec<Vec<bool>>,
    pub capacity: Vec<Vec<f64>>,
    pub market_capacity: Vec<f64>,
    /// Each firm's share of the market capacity in the coupling constraint.
    pub coupling_share: Vec<f64>,
    /// Diagonal of the quadratic production cost.
    pub cost_quadratic: Vec<Vec<f64>>,
    pub cost_linear: Vec<Vec<f64>>,
    pub price_intercept: Vec<f64>,
    pub price_slope: Vec<f64>,
}

impl CournotSpec {
    pub fn firms(&self) -> usize {
        self.participation.len()
    }

    pub fn markets(&self) -> usize {
        self.price_intercept.len()
    }

    pub fn to_game(self: &Arc<Self>) -> Result<GameSpec> {
        let n = self.markets();
        let mut boxes = Vec::with_capacity(self.firms());
        let mut coupling = Vec::with_capacity(self.firms());
        for i in 0..self.firms() {
            let active = self.participation[i].clone();
            boxes.push(PlayerBox::new(vec![0.0; n], self.capacity[i].clone(), active.clone())?);
            let matrix = DMatrix::from_fn(n, n, |r, c| if r == c && active[r] { 1.0 } else { 0.0 });
            coupling.push(Coupling { matrix, offset: self.coupling_share.clone() });
        }
        GameSpec::new(boxes, coupling, Arc::clone(self) as Arc<dyn PseudoGradient>)
    }

    pub fn to_text(&self) -> String {
        let row = |values: &[f64]| values.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        let mut out = String::new();
        let _ = writeln!(out, "format dpgne-cournot 1");
        let _ = writeln!(out, "firms {}", self.firms());
        let _ = writeln!(out, "markets {}", self.markets());
        let _ = writeln!(out, "price_intercept {}", row(&self.price_intercept));
        let _ = writeln!(out, "price_slope {}", row(&self.price_slope));
        let _ = writeln!(out, "market_capacity {}", row(&self.market_capacity));
        let _ = writeln!(out, "coupling_share {}", row(&self.coupling_share));
        let _ = writeln!(out, "participation");
        for mask in &self.participation {
            let bits: Vec<&str> = mask.iter().map(|&b| if b { "1" } else { "0" }).collect();
            let _ = writeln!(out, "{}", bits.join(" "));
        }
        for (name, block) in [
            ("capacity", &self.capacity),
            ("cost_quadratic", &self.cost_quadratic),
            ("cost_linear", &self.cost_linear),
        ] {
            let _ = writeln!(out, "{name}");
            for r in block {
                let _ = writeln!(out, "{}", row(r));
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty());
        let mut next = |what: &str| {
            lines.next().ok_or(Error::Parse { line: 0, message: format!("missing {what}") })
        };
        let numbers = |line: usize, fields: &[&str], width: usize| -> Result<Vec<f64>> {
            if fields.len() != width {
                return Err(Error::Parse { line, message: format!("expected {width} values, got {}", fields.len()) });
            }
            fields
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Parse { line, message: e.to_string() }))
                .collect()
        };
        let keyed = |(line, text): (usize, &str), key: &str| -> Result<Vec<String>> {
            let mut fields = text.split_whitespace();
            if fields.next() != Some(key) {
                return Err(Error::Parse { line, message: format!("expected `{key}`") });
            }
            Ok(fields.map(str::to_string).collect())
        };

        let header = next("header")?;
        if header.1 != "format dpgne-cournot 1" {
            return Err(Error::Parse { line: header.0, message: "unknown instance format".into() });
        }
        let count = |entry: (usize, &str), key: &str| -> Result<usize> {
            let fields = keyed(entry, key)?;
            fields
                .first()
                .and_then(|f| f.parse().ok())
                .ok_or(Error::Parse { line: entry.0, message: format!("bad {key}") })
        };
        let firms = count(next("firms")?, "firms")?;
        let markets = count(next("markets")?, "markets")?;
        let mut vector = |key: &str| -> Result<Vec<f64>> {
            let entry = next(key)?;
            let fields = keyed(entry, key)?;
            let refs: Vec<&str> = fields.iter().map(String::as_str).collect();
            numbers(entry.0, &refs, markets)
        };
        let price_intercept = vector("price_intercept")?;
        let price_slope = vector("price_slope")?;
        let market_capacity = vector("market_capacity")?;
        let coupling_share = vector("coupling_share")?;

        let mut block = |key: &str| -> Result<Vec<Vec<f64>>> {
            let entry = next(key)?;
            keyed(entry, key)?;
            (0..firms)
                .map(|_| {
                    let (line, text) = next(key)?;
                    let fields: Vec<&str> = text.split_whitespace().collect();
                    numbers(line, &fields, markets)
                })
                .collect()
        };
        let participation = block("participation")?
            .into_iter()
            .map(|r| r.into_iter().map(|v| v != 0.0).collect())
            .collect();
        let capacity = block("capacity")?;
        let cost_quadratic = block("cost_quadratic")?;
        let cost_linear = block("cost_linear")?;
        let spec = Self {
            participation,
            capacity,
            market_capacity,
            coupling_share,
            cost_quadratic,
            cost_linear,
            price_intercept,
            price_slope,
        };
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        let positive = |v: &f64| v.is_finite() && *v > 0.0;
        let ok = self.price_slope.iter().all(positive)
            && self.cost_quadratic.iter().flatten().all(positive)
            && self.participation.iter().zip(&self.capacity).zip(&self.cost_linear).all(|((mask, cap), lin)| {
                mask.iter().zip(cap).zip(lin).all(|((&on, &c), &q)| if on { c >= 0.0 } else { c == 0.0 && q == 0.0 })
            });
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("Cournot instance violates sign or mask constraints".into()))
        }
    }
}

impl PseudoGradient for CournotSpec {
    /// `2 Q v + q + slope*v - (intercept - slope * m * u)` on the firm's markets,
    /// where the market supply is reconstructed as `m * u`.
    fn gradient(&self, i: usize, v: &[f64], u: &[f64], out: &mut [f64]) {
        let firms = self.firms() as f64;
        for (l, o) in out.iter_mut().enumerate() {
            *o = if self.participation[i][l] {
                let slope = self.price_slope[l];
                2.0 * self.cost_quadratic[i][l] * v[l] + self.cost_linear[i][l] + slope * v[l]
                    - (self.price_intercept[l] - slope * firms * u[l])
            } else {
                0.0
            };
        }
    }
}

fn draw_participation(rng: &mut ChaCha8Rng, firms: usize, markets: usize, p: f64) -> Option<Vec<Vec<bool>>> {
    for _ in 0..MAX_INSTANCE_REDRAWS {
        let mask: Vec<Vec<bool>> =
            (0..firms).map(|_| (0..markets).map(|_| rng.random::<f64>() < p).collect()).collect();
        let firms_ok = mask.iter().all(|r| r.iter().any(|&b| b));
        let markets_ok = (0..markets).all(|l| mask.iter().any(|r| r[l]));
        if firms_ok && markets_ok {
            return Some(mask);
        }
    }
    None
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi { lo } else { rng.random_range(lo..hi) }
}

/// Random networked Nash-Cournot instance. Decisions live in `[0, capacity]` on
/// each firm's markets, the coupling caps total supply per market, and each
/// firm carries an equal share of every market capacity.
pub fn make_cournot(
    firms: usize,
    markets: usize,
    seed: u64,
    ranges: &CournotRanges,
) -> Result<(GameSpec, Arc<CournotSpec>)> {
    if firms == 0 || markets == 0 {
        return Err(Error::InvalidParameter("need at least one firm and one market".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_INSTANCE_REDRAWS {
        let participation = draw_participation(&mut rng, firms, markets, ranges.participation_probability)
            .ok_or_else(|| Error::GenerationFailed {
                attempts: MAX_INSTANCE_REDRAWS,
                reason: "no participation mask covers every firm and market".into(),
            })?;
        let masked_draws = |rng: &mut ChaCha8Rng, range| -> Vec<Vec<f64>> {
            participation
                .iter()
                .map(|mask| mask.iter().map(|&on| if on { uniform(rng, range) } else { 0.0 }).collect())
                .collect()
        };
        let capacity = masked_draws(&mut rng, ranges.capacity);
        let cost_quadratic: Vec<Vec<f64>> = (0..firms)
            .map(|_| vec![uniform(&mut rng, ranges.cost_quadratic); markets])
            .collect();
        let cost_linear = masked_draws(&mut rng, ranges.cost_linear);
        let price_intercept: Vec<f64> = (0..markets).map(|_| uniform(&mut rng, ranges.price_intercept)).collect();
        let price_slope: Vec<f64> = (0..markets).map(|_| uniform(&mut rng, ranges.price_slope)).collect();
        let coupling_share: Vec<f64> = (0..markets)
            .map(|l| {
                let kappa = uniform(&mut rng, ranges.capacity_fraction);
                let total: f64 = capacity.iter().map(|c| c[l]).sum();
                kappa * total / firms as f64
            })
            .collect();
        // Summing the shares in player order makes sum_i c_i equal the market capacity exactly.
        let market_capacity = coupling_share
            .iter()
            .map(|&share| (0..firms).fold(0.0, |acc, _| acc + share))
            .collect();
        let spec = Arc::new(CournotSpec {
            participation,
            capacity,
            market_capacity,
            coupling_share,
            cost_quadratic,
            cost_linear,
            price_intercept,
            price_slope,
        });
        let game = spec.to_game()?;
        if monotonicity_probe(&game, 1000, &mut rng) < 0.0 {
            warn!("rejecting Cournot draw that fails the monotonicity probe");
            continue;
        }
        return Ok((game, spec));
    }
    Err(Error::GenerationFailed {
        attempts: MAX_INSTANCE_REDRAWS,
        reason: "every draw failed the monotonicity probe".into(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_spec() -> Arc<CournotSpec> {
        Arc::new(CournotSpec {
            participation: vec![vec![true], vec![true]],
            capacity: vec![vec![10.0], vec![10.0]],
            market_capacity: vec![10.0],
            coupling_share: vec![5.0],
            cost_quadratic: vec![vec![1.0], vec![1.0]],
            cost_linear: vec![vec![0.0], vec![0.0]],
            price_intercept: vec![10.0],
            price_slope: vec![1.0],
        })
    }

    #[test]
    fn scalar_gradient_hand_value() {
        let spec = scalar_spec();
        let mut out = [0.0];
        spec.gradient(0, &[2.0], &[2.5], &mut out);
        assert_eq!(out[0], 1.0);
        spec.gradient(0, &[0.0], &[0.0], &mut out);
        assert_eq!(out[0], -10.0);
    }

    #[test]
    fn projections() {
        let bx = PlayerBox::new(vec![0.0, 0.0], vec![10.0, 5.0], vec![true, false]).unwrap();
        assert_eq!(project_box(&[12.0, 3.0], &bx).unwrap(), vec![10.0, 0.0]);
        assert_eq!(project_box(&[4.0, 0.0], &bx).unwrap(), vec![4.0, 0.0]);
        assert!(project_box(&[1.0], &bx).is_err());
        assert_eq!(project_nonneg(&[-1.0, 2.0]), vec![0.0, 2.0]);
    }

    #[test]
    fn coupling_violation_and_signal() {
        let game = scalar_spec().to_game().unwrap();
        assert_eq!(game.coupling_violation(&[vec![0.0], vec![0.0]]).unwrap(), vec![-10.0]);
        assert_eq!(game.coupling_violation(&[vec![4.0], vec![6.0]]).unwrap(), vec![0.0]);
        assert_eq!(game.constraint_signal(0, &[2.0], &[1.0]).unwrap(), vec![3.0 - 5.0]);
        assert_eq!(game.constraint_signal(0, &[1.5], &[1.5]).unwrap(), vec![1.5 - 5.0]);
    }

    #[test]
    fn generated_instance_is_reproducible_and_slater() {
        let (game, spec) = make_cournot(20, 7, 1, &CournotRanges::default()).unwrap();
        let (_, again) = make_cournot(20, 7, 1, &CournotRanges::default()).unwrap();
        assert_eq!(*spec, *again);
        let zero = vec![vec![0.0; 7]; 20];
        assert!(game.coupling_violation(&zero).unwrap().iter().all(|v| *v < 0.0));
        for l in 0..7 {
            let sum = (0..20).fold(0.0, |acc, _| acc + spec.coupling_share[l]);
            assert_eq!(sum, spec.market_capacity[l]);
            assert_eq!(game.total_offset()[l], spec.market_capacity[l]);
        }
        assert_eq!(game.coupling_norm_bound(), 1.0);
    }

    #[test]
    fn monopoly_instance() {
        let (game, spec) = make_cournot(1, 1, 4, &CournotRanges::default()).unwrap();
        assert_eq!(game.players(), 1);
        assert!(spec.participation[0][0]);
    }

    #[test]
    fn text_round_trip_is_exact() {
        let (_, spec) = make_cournot(6, 3, 8, &CournotRanges::default()).unwrap();
        let back = CournotSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(*spec, back);
        assert_eq!(back.to_text(), spec.to_text());
    }

    #[test]
    fn text_parse_errors() {
        assert!(CournotSpec::from_text("format other 1").is_err());
        let (_, spec) = make_cournot(2, 2, 1, &CournotRanges::default()).unwrap();
        let truncated: String = spec.to_text().lines().take(9).collect::<Vec<_>>().join("\n");
        assert!(CournotSpec::from_text(&truncated).is_err());
    }
}
