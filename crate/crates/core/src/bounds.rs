//! Interpolation and extrapolation bounds on RoPE attention scores.
//!
//! Between two grid points `s1 < s2` a score curve deviates from its chord by
//! at most `d max|h_j| (s - s1)(s2 - s) / (8 ln c)`, a consequence of the
//! second-derivative bound `|a''(s)| <= max|h_j| d / (4 ln c)`. Outside the
//! trained range the only available guarantee is `|a(s)| <= 2 max|h_j| B(s)`
//! with `B(s) = sum_k |A_{k+1}(s)|` and `A_k(s) = sum_{j<k} exp(i s theta_j)`.
//! The checkers here sweep random curves and report the worst violation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::ScoreCoefficients;
use crate::rope::{FrequencyTable, HeadVector};
use crate::{Error, Result};

/// Slack allowed for rounding in every bound comparison.
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn check_base(c: f64) -> Result<()> {
    if !(c > 1.0) || !c.is_finite() {
        return Err(Error::invalid(format!("base must be finite and > 1, got {c}")));
    }
    Ok(())
}

fn check_interval(s: f64, s1: f64, s2: f64) -> Result<()> {
    if !(s1 < s2) {
        return Err(Error::invalid(format!("need s1 < s2, got [{s1}, {s2}]")));
    }
    if !(s >= s1 && s <= s2) {
        return Err(Error::invalid(format!("s = {s} lies outside [{s1}, {s2}]")));
    }
    Ok(())
}

/// Chord through `(s1, a1)` and `(s2, a2)` evaluated at `s`.
pub fn linear_interpolant(a1: f64, a2: f64, s: f64, s1: f64, s2: f64) -> Result<f64> {
    check_interval(s, s1, s2)?;
    if s == s1 {
        return Ok(a1);
    }
    if s == s2 {
        return Ok(a2);
    }
    let lambda = (s - s1) / (s2 - s1);
    Ok((1.0 - lambda) * a1 + lambda * a2)
}

/// `d h_max (s - s1)(s2 - s) / (8 ln c)`.
pub fn interpolation_bound(h_max: f64, d: usize, c: f64, s: f64, s1: f64, s2: f64) -> Result<f64> {
    check_base(c)?;
    check_interval(s, s1, s2)?;
    if !(h_max >= 0.0) {
        return Err(Error::invalid(format!("h_max must be >= 0, got {h_max}")));
    }
    Ok(d as f64 * h_max * (s - s1) * (s2 - s) / (8.0 * c.ln()))
}

/// `M = h_max d / (4 ln c)`, a bound on `|a''(s)|` for every `s`.
pub fn second_derivative_bound(h_max: f64, d: usize, c: f64) -> Result<f64> {
    check_base(c)?;
    if !(h_max >= 0.0) {
        return Err(Error::invalid(format!("h_max must be >= 0, got {h_max}")));
    }
    Ok(h_max * d as f64 / (4.0 * c.ln()))
}

/// `h_max sum_j theta_j^2`, the sharp version of [`second_derivative_bound`].
///
/// `sum_j c^(-4j/d)` is at least `d / (4 ln c)` (since `e^x >= 1 + x`), so the
/// closed form `M` can be exceeded by curves whose terms all align at one
/// point. For `d = 128, c = 10^4` the two constants are 3.998 and 3.474.
pub fn sharp_second_derivative_bound(h_max: f64, table: &FrequencyTable) -> f64 {
    h_max * table.freqs().iter().map(|t| t * t).sum::<f64>()
}

/// `2 h_max B(s)`.
pub fn extrapolation_bound(h_max: f64, b_s: f64) -> f64 {
    2.0 * h_max * b_s
}

/// Extrapolation bound over the midpoint interpolation bound of a unit
/// interval, `64 ln c B(s) / d`. Independent of `h_max`.
pub fn bound_ratio(b_s: f64, d: usize, c: f64) -> Result<f64> {
    let interp = interpolation_bound(1.0, d, c, 0.5, 0.0, 1.0)?;
    Ok(extrapolation_bound(1.0, b_s) / interp)
}

/// Worst point found by [`check_interpolation_bound`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalCheck {
    pub s1: f64,
    pub s2: f64,
    /// Location of the largest violation.
    pub s: f64,
    /// `|a(s) - a_linear(s)|` there.
    pub deviation: f64,
    /// The bound there.
    pub bound: f64,
    /// `deviation - bound`; negative when the bound holds with room.
    pub max_violation: f64,
}

fn interval_violation(coeffs: &ScoreCoefficients, s1: f64, s2: f64, scale: f64) -> impl Fn(f64) -> (f64, f64) + '_ {
    let (a1, a2) = (coeffs.eval(s1), coeffs.eval(s2));
    let h_max = coeffs.max_magnitude();
    let (d, ln_c) = (coeffs.head_dim() as f64, coeffs.base().ln());
    move |s: f64| {
        let lambda = (s - s1) / (s2 - s1);
        let chord = (1.0 - lambda) * a1 + lambda * a2;
        let deviation = (coeffs.eval(s) - chord).abs();
        let bound = scale * d * h_max * (s - s1) * (s2 - s) / (8.0 * ln_c);
        (deviation, bound)
    }
}

/// Golden-section search for the maximum of `f` on `[lo, hi]`.
fn golden_max(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        } else {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        }
    }
    if f1 > f2 {
        x1
    } else {
        x2
    }
}

fn check_interval_scaled(
    coeffs: &ScoreCoefficients,
    s1: f64,
    s2: f64,
    n_samples: usize,
    scale: f64,
) -> Result<IntervalCheck> {
    if !(s1 < s2) || !s1.is_finite() || !s2.is_finite() {
        return Err(Error::invalid(format!("need finite s1 < s2, got [{s1}, {s2}]")));
    }
    if n_samples < 3 {
        return Err(Error::invalid(format!(
            "need at least 3 samples per interval, got {n_samples}"
        )));
    }
    let eval = interval_violation(coeffs, s1, s2, scale);
    let step = (s2 - s1) / (n_samples - 1) as f64;
    let grid = |i: usize| if i + 1 == n_samples { s2 } else { s1 + i as f64 * step };

    let (mut best_s, mut best) = (s1, f64::NEG_INFINITY);
    let mut best_i = 0;
    for i in 0..n_samples {
        let s = grid(i);
        let (dev, bound) = eval(s);
        if dev - bound > best {
            (best_s, best, best_i) = (s, dev - bound, i);
        }
    }
    // Refine around the best grid point; the true extremum lies within one
    // step of it unless the violation curve is very oscillatory.
    let lo = grid(best_i.saturating_sub(1));
    let hi = grid((best_i + 1).min(n_samples - 1));
    let refined = golden_max(|s| { let (d, b) = eval(s); d - b }, lo, hi, 60);
    let (dev_r, bound_r) = eval(refined);
    if dev_r - bound_r > best {
        (best_s, best) = (refined, dev_r - bound_r);
    }
    let (deviation, bound) = eval(best_s);
    Ok(IntervalCheck {
        s1,
        s2,
        s: best_s,
        deviation,
        bound,
        max_violation: best,
    })
}

/// Largest `|a(s) - a_linear(s)| - bound(s)` over `[s1, s2]`, sampled on a
/// uniform grid of `n_samples` points and refined around the grid maximum.
/// The interpolation bound holds iff the result is `<= BOUND_TOLERANCE`.
pub fn check_interpolation_bound(
    coeffs: &ScoreCoefficients,
    s1: f64,
    s2: f64,
    n_samples: usize,
) -> Result<IntervalCheck> {
    check_interval_scaled(coeffs, s1, s2, n_samples, 1.0)
}

/// `B(s)` sampled at consecutive integers.
#[derive(Debug, Clone, PartialEq)]
pub struct BCurve {
    pub positions: Vec<u64>,
    pub values: Vec<f64>,
    pub head_dim: usize,
    pub base: f64,
}

/// JSON summary of a [`BCurve`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BCurveSummary {
    pub d: usize,
    pub c: f64,
    #[serde(rename = "min_B_over_d")]
    pub min_b_over_d: f64,
    pub argmin_s: u64,
}

impl BCurve {
    pub fn b_over_d(&self) -> impl Iterator<Item = f64> + '_ {
        let d = self.head_dim as f64;
        self.values.iter().map(move |b| b / d)
    }

    pub fn summary(&self) -> BCurveSummary {
        let (argmin_s, min_b) = self
            .positions
            .iter()
            .zip(&self.values)
            .fold((0, f64::INFINITY), |acc, (&s, &b)| if b < acc.1 { (s, b) } else { acc });
        BCurveSummary {
            d: self.head_dim,
            c: self.base,
            min_b_over_d: min_b / self.head_dim as f64,
            argmin_s,
        }
    }

    /// CSV with header `s,B,B_over_d`.
    pub fn to_csv(&self) -> String {
        let d = self.head_dim as f64;
        let mut out = String::from("s,B,B_over_d\n");
        for (s, b) in self.positions.iter().zip(&self.values) {
            out.push_str(&format!("{s},{b},{}\n", b / d));
        }
        out
    }
}

/// `B(s)` at a single position through running sums of `cos` and `sin`.
pub fn b_value(table: &FrequencyTable, s: f64) -> f64 {
    let (mut re, mut im, mut total) = (0.0f64, 0.0f64, 0.0f64);
    for &theta in table.freqs() {
        let (sin, cos) = (s * theta).sin_cos();
        re += cos;
        im += sin;
        total += re.hypot(im);
    }
    total
}

/// `B(s)` for every integer `s` in `[0, s_end)`.
pub fn b_curve(d: usize, c: f64, s_end: u64) -> Result<BCurve> {
    let table = FrequencyTable::new(d, c)?;
    if s_end == 0 {
        return Err(Error::invalid("s_end must be at least 1"));
    }
    let positions: Vec<u64> = (0..s_end).collect();
    let values = positions.iter().map(|&s| b_value(&table, s as f64)).collect();
    Ok(BCurve {
        positions,
        values,
        head_dim: d,
        base: c,
    })
}

/// Parameters of [`verify_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSweepConfig {
    pub seed: u64,
    pub trials: usize,
    pub d: usize,
    pub c: f64,
    /// Unit intervals `[n, n + 1]` are drawn with `n < window`.
    pub window: u64,
    /// Grid points per interval.
    pub samples_per_interval: usize,
    /// Random positions per trial for the second-derivative check, drawn
    /// from `[0, 2 window)`.
    pub derivative_samples: usize,
    /// Multiplies both bounds. Anything below 1 is a negative control.
    #[serde(default = "one")]
    pub bound_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for BoundSweepConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trials: 1000,
            d: 128,
            c: 10_000.0,
            window: 2048,
            samples_per_interval: 33,
            derivative_samples: 64,
            bound_scale: 1.0,
        }
    }
}

/// Inputs of the worst interpolation-bound case found.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub trial: usize,
    pub s1: f64,
    pub s2: f64,
    pub s: f64,
    pub deviation: f64,
    pub bound: f64,
    pub h_max: f64,
    pub sin_coeffs: Vec<f64>,
    pub cos_coeffs: Vec<f64>,
}

/// Outcome of the second-derivative domination sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivativeSweep {
    pub points: usize,
    /// Largest `|a''(s)| - M` seen.
    pub max_excess: f64,
    /// Largest `|a''(s)| / M` seen.
    pub max_fraction_of_bound: f64,
}

/// Extrapolation over interpolation bound ratios along the `B(s)` grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSweep {
    pub s_end: u64,
    /// Grid points with `B(s) >= d`.
    pub points_with_b_at_least_d: usize,
    /// Minimum ratio over those points.
    pub min_ratio: f64,
    pub argmin_s: u64,
    /// `64 ln c`, the ratio when `B(s) = d`.
    pub ratio_at_b_equal_d: f64,
}

/// Report of [`verify_bounds`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSweepReport {
    pub trials: usize,
    pub max_violation: f64,
    pub violations: usize,
    pub worst_case_inputs: WorstCase,
    pub second_derivative: DerivativeSweep,
    pub ratio: RatioSweep,
}

impl BoundSweepReport {
    pub fn passed(&self) -> bool {
        self.max_violation <= BOUND_TOLERANCE
            && self.second_derivative.max_excess <= BOUND_TOLERANCE
    }
}

/// Random score coefficients: even trials draw free normal sine/cosine
/// coefficients, odd trials realise them from normal query/key vectors.
pub fn random_coefficients(table: &FrequencyTable, rng: &mut impl Rng, realizable: bool) -> ScoreCoefficients {
    let d = table.head_dim();
    let mut normal = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut *rng)).collect() };
    if realizable {
        let q = HeadVector::new(normal(d)).expect("finite draws");
        let k = HeadVector::new(normal(d)).expect("finite draws");
        ScoreCoefficients::from_query_key(&q, &k, table.clone()).expect("matching dimension")
    } else {
        let (s, c) = (normal(d / 2), normal(d / 2));
        ScoreCoefficients::new(table.clone(), s, c).expect("matching dimension")
    }
}

/// Sweeps random curves and unit intervals checking the interpolation bound
/// and the second-derivative bound, and tabulates the bound ratio along
/// `B(s)` for `s < 2 window`.
pub fn verify_bounds(config: &BoundSweepConfig) -> Result<BoundSweepReport> {
    if config.trials == 0 || config.window == 0 {
        return Err(Error::invalid("need at least one trial and a positive window"));
    }
    let table = FrequencyTable::new(config.d, config.c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Always cover the first, an interior and the last interval.
    let pinned = [0, 100.min(config.window - 1), config.window - 1];

    let mut worst: Option<WorstCase> = None;
    let mut max_violation = f64::NEG_INFINITY;
    let mut violations = 0;
    let mut deriv = DerivativeSweep {
        points: 0,
        max_excess: f64::NEG_INFINITY,
        max_fraction_of_bound: 0.0,
    };

    for trial in 0..config.trials {
        let coeffs = random_coefficients(&table, &mut rng, trial % 2 == 1);
        let n = pinned
            .get(trial)
            .copied()
            .unwrap_or_else(|| rng.random_range(0..config.window)) as f64;
        let check = check_interval_scaled(
            &coeffs,
            n,
            n + 1.0,
            config.samples_per_interval,
            config.bound_scale,
        )?;
        if check.max_violation > BOUND_TOLERANCE {
            violations += 1;
        }
        if check.max_violation > max_violation {
            max_violation = check.max_violation;
            worst = Some(WorstCase {
                trial,
                s1: check.s1,
                s2: check.s2,
                s: check.s,
                deviation: check.deviation,
                bound: check.bound,
                h_max: coeffs.max_magnitude(),
                sin_coeffs: coeffs.sin_coeffs().to_vec(),
                cos_coeffs: coeffs.cos_coeffs().to_vec(),
            });
        }

        let m = config.bound_scale * second_derivative_bound(coeffs.max_magnitude(), config.d, config.c)?;
        let interval_points = (0..config.samples_per_interval)
            .map(|i| n + i as f64 / (config.samples_per_interval - 1) as f64);
        let span = 2.0 * config.window as f64;
        let random_points: Vec<f64> = (0..config.derivative_samples)
            .map(|_| rng.random::<f64>() * span)
            .collect();
        for s in interval_points.chain(random_points) {
            let a2 = coeffs.second_derivative(s).abs();
            deriv.points += 1;
            deriv.max_excess = deriv.max_excess.max(a2 - m);
            if m > 0.0 {
                deriv.max_fraction_of_bound = deriv.max_fraction_of_bound.max(a2 / m);
            }
        }
    }

    let ratio = ratio_sweep(&table, 2 * config.window)?;
    Ok(BoundSweepReport {
        trials: config.trials,
        max_violation,
        violations,
        worst_case_inputs: worst.expect("at least one trial"),
        second_derivative: deriv,
        ratio,
    })
}

/// Minimum extrapolation/interpolation bound ratio over integers `s <
/// s_end` where `B(s) >= d`.
pub fn ratio_sweep(table: &FrequencyTable, s_end: u64) -> Result<RatioSweep> {
    let curve = b_curve(table.head_dim(), table.base(), s_end)?;
    let d = table.head_dim() as f64;
    let mut sweep = RatioSweep {
        s_end,
        points_with_b_at_least_d: 0,
        min_ratio: f64::INFINITY,
        argmin_s: 0,
        ratio_at_b_equal_d: bound_ratio(d, table.head_dim(), table.base())?,
    };
    for (&s, &b) in curve.positions.iter().zip(&curve.values) {
        if b >= d {
            sweep.points_with_b_at_least_d += 1;
            let r = bound_ratio(b, table.head_dim(), table.base())?;
            if r < sweep.min_ratio {
                sweep.min_ratio = r;
                sweep.argmin_s = s;
            }
        }
    }
    Ok(sweep)
}
