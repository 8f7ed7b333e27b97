//! Attention scores as trigonometric basis expansions.
//!
//! A score curve is `a(s) = sum_j [sin_j sin(s theta_j) + cos_j cos(s theta_j)]`,
//! the real part of `sum_j h_j exp(i s theta_j)` with `h_j = cos_j - i sin_j`.
//! Fitting free coefficients to random targets on `[0, L)` and evaluating
//! past `L` shows how badly such curves can extrapolate, while dense
//! evaluation between integers shows how tame they are under interpolation.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::rope::{FrequencyTable, HeadVector};
use crate::{Error, Result};

/// Real sine/cosine coefficients of a score curve over a frequency table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreCoefficients {
    table: FrequencyTable,
    sin_coeffs: Vec<f64>,
    cos_coeffs: Vec<f64>,
}

impl ScoreCoefficients {
    pub fn new(table: FrequencyTable, sin_coeffs: Vec<f64>, cos_coeffs: Vec<f64>) -> Result<Self> {
        let pairs = table.pairs();
        if sin_coeffs.len() != pairs || cos_coeffs.len() != pairs {
            return Err(Error::invalid(format!(
                "expected {pairs} sine and cosine coefficients, got {} and {}",
                sin_coeffs.len(),
                cos_coeffs.len()
            )));
        }
        if sin_coeffs.iter().chain(&cos_coeffs).any(|c| !c.is_finite()) {
            return Err(Error::invalid("score coefficients must be finite"));
        }
        Ok(Self {
            table,
            sin_coeffs,
            cos_coeffs,
        })
    }

    pub fn zeros(table: FrequencyTable) -> Self {
        let pairs = table.pairs();
        Self {
            table,
            sin_coeffs: vec![0.0; pairs],
            cos_coeffs: vec![0.0; pairs],
        }
    }

    /// Coefficients realised by an actual query/key pair, so that
    /// `evaluate(m - n)` equals the RoPE attention score of `q` at `m` and
    /// `k` at `n`.
    pub fn from_query_key(q: &HeadVector, k: &HeadVector, table: FrequencyTable) -> Result<Self> {
        if q.len() != table.head_dim() || k.len() != table.head_dim() {
            return Err(Error::invalid(
                "query and key must match the frequency table dimension",
            ));
        }
        let (mut sin_coeffs, mut cos_coeffs) = (Vec::new(), Vec::new());
        for (qp, kp) in q.values().chunks_exact(2).zip(k.values().chunks_exact(2)) {
            let h_re = qp[0] * kp[0] + qp[1] * kp[1];
            let h_im = qp[1] * kp[0] - qp[0] * kp[1];
            cos_coeffs.push(h_re);
            sin_coeffs.push(-h_im);
        }
        Self::new(table, sin_coeffs, cos_coeffs)
    }

    pub fn table(&self) -> &FrequencyTable {
        &self.table
    }

    pub fn head_dim(&self) -> usize {
        self.table.head_dim()
    }

    pub fn base(&self) -> f64 {
        self.table.base()
    }

    pub fn sin_coeffs(&self) -> &[f64] {
        &self.sin_coeffs
    }

    pub fn cos_coeffs(&self) -> &[f64] {
        &self.cos_coeffs
    }

    /// `|h_j|` for every frequency.
    pub fn magnitudes(&self) -> Vec<f64> {
        self.sin_coeffs
            .iter()
            .zip(&self.cos_coeffs)
            .map(|(s, c)| s.hypot(*c))
            .collect()
    }

    /// `max_j |h_j|`.
    pub fn max_magnitude(&self) -> f64 {
        self.magnitudes().into_iter().fold(0.0, f64::max)
    }

    /// `a(s)` without input validation.
    pub fn eval(&self, s: f64) -> f64 {
        self.terms(s, |sin_c, cos_c, sin, cos, _| sin_c * sin + cos_c * cos)
    }

    /// Analytic first derivative `a'(s)`.
    pub fn first_derivative(&self, s: f64) -> f64 {
        self.terms(s, |sin_c, cos_c, sin, cos, theta| {
            theta * (sin_c * cos - cos_c * sin)
        })
    }

    /// Analytic second derivative `a''(s)`.
    pub fn second_derivative(&self, s: f64) -> f64 {
        self.terms(s, |sin_c, cos_c, sin, cos, theta| {
            -theta * theta * (sin_c * sin + cos_c * cos)
        })
    }

    fn terms(&self, s: f64, f: impl Fn(f64, f64, f64, f64, f64) -> f64) -> f64 {
        self.table
            .freqs()
            .iter()
            .zip(self.sin_coeffs.iter().zip(&self.cos_coeffs))
            .map(|(&theta, (&sin_c, &cos_c))| {
                let (sin, cos) = (s * theta).sin_cos();
                f(sin_c, cos_c, sin, cos, theta)
            })
            .sum()
    }

    /// Coefficients in design-matrix order: all sines, then all cosines.
    pub fn to_weights(&self) -> Vec<f64> {
        self.sin_coeffs.iter().chain(&self.cos_coeffs).copied().collect()
    }

    pub fn from_weights(table: FrequencyTable, weights: &[f64]) -> Result<Self> {
        let pairs = table.pairs();
        if weights.len() != 2 * pairs {
            return Err(Error::invalid(format!(
                "expected {} weights, got {}",
                2 * pairs,
                weights.len()
            )));
        }
        Self::new(table, weights[..pairs].to_vec(), weights[pairs..].to_vec())
    }
}

/// Evaluates the score curve at positional difference `s`.
pub fn evaluate_score(coeffs: &ScoreCoefficients, s: f64) -> Result<f64> {
    if !s.is_finite() {
        return Err(Error::invalid(format!("position {s} is not finite")));
    }
    Ok(coeffs.eval(s))
}

/// Samples to fit plus the ridge penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    positions: Vec<f64>,
    targets: Vec<f64>,
    ridge_eps: f64,
}

impl FitProblem {
    pub fn new(positions: Vec<f64>, targets: Vec<f64>, ridge_eps: f64) -> Result<Self> {
        if positions.is_empty() || positions.len() != targets.len() {
            return Err(Error::invalid(format!(
                "need equally many positions and targets (at least one), got {} and {}",
                positions.len(),
                targets.len()
            )));
        }
        if positions.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return Err(Error::invalid("positions must be finite and non-negative"));
        }
        if targets.iter().any(|y| !y.is_finite()) {
            return Err(Error::invalid("targets must be finite"));
        }
        if !(ridge_eps >= 0.0) || !ridge_eps.is_finite() {
            return Err(Error::invalid(format!(
                "ridge penalty must be finite and >= 0, got {ridge_eps}"
            )));
        }
        Ok(Self {
            positions,
            targets,
            ridge_eps,
        })
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn ridge_eps(&self) -> f64 {
        self.ridge_eps
    }

    /// `sum_i (a(s_i) - y_i)^2 + eps * |w|^2`.
    pub fn objective(&self, coeffs: &ScoreCoefficients) -> f64 {
        let residual: f64 = self
            .positions
            .iter()
            .zip(&self.targets)
            .map(|(&s, &y)| (coeffs.eval(s) - y).powi(2))
            .sum();
        let norm: f64 = coeffs.to_weights().iter().map(|w| w * w).sum();
        residual + self.ridge_eps * norm
    }
}

/// Design matrix with columns `sin(s theta_j)` followed by `cos(s theta_j)`.
fn design_matrix(positions: &[f64], table: &FrequencyTable) -> DMatrix<f64> {
    let pairs = table.pairs();
    DMatrix::from_fn(positions.len(), 2 * pairs, |i, col| {
        let theta = table.freqs()[col % pairs];
        let angle = positions[i] * theta;
        if col < pairs {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Least-squares fit of a score curve through the normal equations
/// `(X^T X + eps I) w = X^T y`.
///
/// The normal matrix is badly conditioned for long sample ranges; with
/// `eps = 0` the solve still goes through unless a pivot is exactly zero,
/// and callers wanting stable coefficients should pass `eps >= 1e-8`.
pub fn fit_least_squares(problem: &FitProblem, d: usize, c: f64) -> Result<ScoreCoefficients> {
    let table = FrequencyTable::new(d, c)?;
    let x = design_matrix(&problem.positions, &table);
    let y = DVector::from_column_slice(&problem.targets);
    let mut normal = x.tr_mul(&x);
    for i in 0..normal.nrows() {
        normal[(i, i)] += problem.ridge_eps;
    }
    let rhs = x.tr_mul(&y);
    let weights = normal.lu().solve(&rhs).ok_or_else(|| {
        Error::NumericalFailure(
            "normal matrix is singular; set a positive ridge penalty (ridge_eps > 0)".into(),
        )
    })?;
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NumericalFailure(
            "least-squares solve produced non-finite coefficients; set a positive ridge penalty"
                .into(),
        ));
    }
    ScoreCoefficients::from_weights(table, weights.as_slice())
}

/// A score curve sampled on a grid of positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreCurve {
    pub positions: Vec<f64>,
    pub values: Vec<f64>,
    pub coefficients: ScoreCoefficients,
    pub seed: Option<u64>,
}

impl ScoreCurve {
    pub fn sample(coefficients: ScoreCoefficients, positions: Vec<f64>, seed: Option<u64>) -> Self {
        let values = positions.iter().map(|&s| coefficients.eval(s)).collect();
        Self {
            positions,
            values,
            coefficients,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Largest `|a(s)|` over grid points with `lo <= s < hi`.
    pub fn max_abs_between(&self, lo: f64, hi: f64) -> f64 {
        self.positions
            .iter()
            .zip(&self.values)
            .filter(|(&s, _)| s >= lo && s < hi)
            .map(|(_, v)| v.abs())
            .fold(0.0, f64::max)
    }

    /// CSV with header `s,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("s,value\n");
        for (s, v) in self.positions.iter().zip(&self.values) {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }
}

/// Parameters of the random-target extrapolation experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationParams {
    pub seed: u64,
    pub d: usize,
    pub c: f64,
    /// Fit range `[0, L)`; targets are drawn at every integer inside it.
    pub window: usize,
    /// Evaluation covers integers in `[0, eval_end)`.
    pub eval_end: usize,
    pub ridge_eps: f64,
}

impl Default for ExtrapolationParams {
    fn default() -> Self {
        Self {
            seed: 0,
            d: 128,
            c: 10_000.0,
            window: 2048,
            eval_end: 4096,
            ridge_eps: 0.0,
        }
    }
}

/// JSON sidecar describing an extrapolation study.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrapolationSummary {
    pub seed: u64,
    pub d: usize,
    pub c: f64,
    #[serde(rename = "L")]
    pub window: usize,
    pub ridge_eps: f64,
    pub max_abs_in_range: f64,
    pub max_abs_out_of_range: f64,
}

impl ExtrapolationSummary {
    /// Out-of-range over in-range peak magnitude.
    pub fn blow_up_ratio(&self) -> f64 {
        self.max_abs_out_of_range / self.max_abs_in_range
    }

    /// Whether the in-range fit stays "roughly within [-1, 1]", read as a
    /// peak magnitude of at most 5. Informational only.
    pub fn in_range_is_tame(&self) -> bool {
        self.max_abs_in_range <= 5.0
    }
}

/// Result of [`extrapolation_study`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolationStudy {
    /// Fitted curve on integers `[0, eval_end)`.
    pub curve: ScoreCurve,
    /// The random samples the curve was fitted to.
    pub samples: Vec<f64>,
    pub summary: ExtrapolationSummary,
}

/// Standard-normal targets at integers `[0, window)` for `seed`.
pub fn random_targets(seed: u64, window: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..window).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Fits a curve to standard-normal noise on `[0, L)` and evaluates it on
/// `[0, eval_end)`.
pub fn extrapolation_study(params: &ExtrapolationParams) -> Result<ExtrapolationStudy> {
    if params.window == 0 {
        return Err(Error::invalid("fit window must be positive"));
    }
    if params.eval_end <= params.window {
        return Err(Error::invalid(format!(
            "evaluation end {} must exceed the fit window {}",
            params.eval_end, params.window
        )));
    }
    let positions: Vec<f64> = (0..params.window).map(|s| s as f64).collect();
    let samples = random_targets(params.seed, params.window);
    let problem = FitProblem::new(positions, samples.clone(), params.ridge_eps)?;
    let coeffs = fit_least_squares(&problem, params.d, params.c)?;

    let grid = (0..params.eval_end).map(|s| s as f64).collect();
    let curve = ScoreCurve::sample(coeffs, grid, Some(params.seed));
    let l = params.window as f64;
    let summary = ExtrapolationSummary {
        seed: params.seed,
        d: params.d,
        c: params.c,
        window: params.window,
        ridge_eps: params.ridge_eps,
        max_abs_in_range: curve.max_abs_between(0.0, l),
        max_abs_out_of_range: curve.max_abs_between(l, params.eval_end as f64),
    };
    Ok(ExtrapolationStudy {
        curve,
        samples,
        summary,
    })
}

/// Grid `start, start + step, ...` strictly below `end`.
pub fn uniform_grid(start: f64, end: f64, step: f64) -> Result<Vec<f64>> {
    if !(start < end) || !(step > 0.0) || !start.is_finite() || !end.is_finite() {
        return Err(Error::invalid(format!(
            "grid needs start < end and step > 0, got [{start}, {end}) step {step}"
        )));
    }
    let n = ((end - start) / step - 1e-9).ceil() as usize;
    Ok((0..n).map(|i| start + i as f64 * step).collect())
}

/// Dense evaluation of `coeffs` on `[start, end)` with spacing `step`.
pub fn interpolation_study(
    coeffs: &ScoreCoefficients,
    start: f64,
    end: f64,
    step: f64,
) -> Result<ScoreCurve> {
    let grid = uniform_grid(start, end, step)?;
    Ok(ScoreCurve::sample(coeffs.clone(), grid, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn table(d: usize) -> FrequencyTable {
        FrequencyTable::new(d, 10_000.0).unwrap()
    }

    fn random_coeffs(d: usize, seed: u64) -> ScoreCoefficients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || -> Vec<f64> { (0..d / 2).map(|_| StandardNormal.sample(&mut rng)).collect() };
        let (s, c) = (draw(), draw());
        ScoreCoefficients::new(table(d), s, c).unwrap()
    }

    #[test]
    fn evaluate_examples() {
        let zero = ScoreCoefficients::zeros(table(16));
        for s in [0.0, 1.5, 1e4] {
            assert_eq!(evaluate_score(&zero, s).unwrap(), 0.0);
        }

        let c = ScoreCoefficients::new(table(2), vec![1.0], vec![0.0]).unwrap();
        assert!((evaluate_score(&c, FRAC_PI_2).unwrap() - 1.0).abs() < 1e-15);

        let c = random_coeffs(16, 3);
        let sum: f64 = c.cos_coeffs().iter().sum();
        assert!((evaluate_score(&c, 0.0).unwrap() - sum).abs() < 1e-12);
        assert!(evaluate_score(&c, f64::NAN).is_err());
    }

    #[test]
    fn query_key_coefficients_reproduce_rope_scores() {
        let t = table(8);
        let q = HeadVector::new(vec![0.5, -1.0, 2.0, 0.25, -0.3, 0.8, 1.1, -0.6]).unwrap();
        let k = HeadVector::new(vec![1.5, 0.2, -0.4, 0.9, 0.7, -1.3, 0.05, 0.4]).unwrap();
        let coeffs = ScoreCoefficients::from_query_key(&q, &k, t.clone()).unwrap();
        for (m, n) in [(10.0, 3.0), (3.0, 10.0), (0.0, 0.0), (100.5, 2.25)] {
            let direct = crate::rope::attention_score(&q, &k, m, n, &t).unwrap();
            assert!((coeffs.eval(m - n) - direct).abs() < 1e-12);
        }
        // |h_j| = |q pair| * |k pair|
        let mags = coeffs.magnitudes();
        let expect0 = (0.5f64.hypot(-1.0)) * (1.5f64.hypot(0.2));
        assert!((mags[0] - expect0).abs() < 1e-12);
    }

    #[test]
    fn fit_recovers_planted_coefficients() {
        let d = 16;
        let planted = random_coeffs(d, 11);
        let positions: Vec<f64> = (0..d).map(|i| i as f64 * 1.7).collect();
        let targets: Vec<f64> = positions.iter().map(|&s| planted.eval(s)).collect();
        let problem = FitProblem::new(positions.clone(), targets.clone(), 0.0).unwrap();
        let fitted = fit_least_squares(&problem, d, 10_000.0).unwrap();
        for (&s, &y) in positions.iter().zip(&targets) {
            assert!((fitted.eval(s) - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_targets_fit_to_zero() {
        let positions: Vec<f64> = (0..40).map(|i| i as f64).collect();
        let problem = FitProblem::new(positions, vec![0.0; 40], 1e-6).unwrap();
        let fitted = fit_least_squares(&problem, 16, 10_000.0).unwrap();
        assert!(fitted.to_weights().iter().all(|w| w.abs() < 1e-9));
    }

    #[test]
    fn singular_normal_matrix_is_reported() {
        // Every sine column vanishes at s = 0.
        let problem = FitProblem::new(vec![0.0; 5], vec![1.0; 5], 0.0).unwrap();
        match fit_least_squares(&problem, 8, 10_000.0) {
            Err(Error::NumericalFailure(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected numerical failure, got {other:?}"),
        }
        let problem = FitProblem::new(vec![0.0; 5], vec![1.0; 5], 1e-3).unwrap();
        assert!(fit_least_squares(&problem, 8, 10_000.0).is_ok());
    }

    #[test]
    fn fit_problem_validation() {
        assert!(FitProblem::new(vec![], vec![], 0.0).is_err());
        assert!(FitProblem::new(vec![1.0], vec![1.0, 2.0], 0.0).is_err());
        assert!(FitProblem::new(vec![-1.0], vec![1.0], 0.0).is_err());
        assert!(FitProblem::new(vec![1.0], vec![1.0], -1.0).is_err());
    }

    #[test]
    fn ridge_fit_is_a_local_minimum() {
        let positions: Vec<f64> = (0..200).map(|i| i as f64).collect();
        let targets = random_targets(5, 200);
        let problem = FitProblem::new(positions, targets, 1e-2).unwrap();
        let fitted = fit_least_squares(&problem, 16, 10_000.0).unwrap();
        let base = problem.objective(&fitted);
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = fitted.to_weights();
        for _ in 0..50 {
            let perturbed: Vec<f64> = w
                .iter()
                .map(|x| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + 1e-3 * z
                })
                .collect();
            let p = ScoreCoefficients::from_weights(fitted.table().clone(), &perturbed).unwrap();
            assert!(problem.objective(&p) >= base - 1e-9 * base.abs());
        }
    }

    #[test]
    fn second_derivative_matches_finite_differences() {
        let c = random_coeffs(32, 21);
        let h = 1e-3;
        for s in [0.0, 3.3, 17.0, 250.5, 2000.0] {
            let fd = (c.eval(s + h) - 2.0 * c.eval(s) + c.eval(s - h)) / (h * h);
            let exact = c.second_derivative(s);
            assert!(
                (fd - exact).abs() <= 1e-4 * exact.abs().max(1.0),
                "s={s}: fd {fd} vs {exact}"
            );
            let fd1 = (c.eval(s + h) - c.eval(s - h)) / (2.0 * h);
            assert!((fd1 - c.first_derivative(s)).abs() < 1e-5);
        }
    }

    #[test]
    fn interpolation_grid_matches_reference_script() {
        let grid = uniform_grid(25.0, 75.0, 0.125).unwrap();
        assert_eq!(grid.len(), 400);
        assert_eq!(grid[0], 25.0);
        assert_eq!(*grid.last().unwrap(), 74.875);

        let c = random_coeffs(128, 4);
        let curve = interpolation_study(&c, 25.0, 75.0, 0.125).unwrap();
        for (s, v) in curve.positions.iter().zip(&curve.values) {
            if s.fract() == 0.0 {
                assert_eq!(*v, evaluate_score(&c, *s).unwrap());
            }
        }
        assert!(interpolation_study(&c, 5.0, 5.0, 0.1).is_err());
        assert!(interpolation_study(&c, 0.0, 5.0, 0.0).is_err());
    }

    #[test]
    fn extrapolation_study_is_deterministic() {
        let params = ExtrapolationParams {
            seed: 7,
            d: 16,
            window: 64,
            eval_end: 128,
            ..Default::default()
        };
        let a = extrapolation_study(&params).unwrap();
        let b = extrapolation_study(&params).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.curve.seed, Some(7));
        assert_eq!(a.curve.len(), 128);
        assert!(extrapolation_study(&ExtrapolationParams {
            eval_end: 64,
            ..params
        })
        .is_err());
    }

    #[test]
    fn csv_has_header_and_one_row_per_point() {
        let c = random_coeffs(4, 1);
        let curve = ScoreCurve::sample(c, vec![0.0, 0.5, 1.0], None);
        let csv = curve.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "s,value");
        assert_eq!(lines.len(), 4);
        assert!(lines[2].starts_with("0.5,"));
        assert!(!csv.contains('\r'));
    }
}
