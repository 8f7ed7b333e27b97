//! Rotary position embedding and position interpolation.
//!
//! Coordinates are rotated in interleaved pairs `(x[2j], x[2j+1])`, i.e. the
//! pair is read as the complex number `x[2j] + i x[2j+1]` and multiplied by
//! `exp(i m theta_j)`. Some implementations instead pair `x[j]` with
//! `x[j + d/2]` ("split halves"); the two layouts differ only by a fixed
//! permutation of coordinates but are not interchangeable on raw weights.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default RoPE base.
pub const DEFAULT_BASE: f64 = 10_000.0;

/// Rotation frequencies `theta_j = base^(-2j/d)` for one attention head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    head_dim: usize,
    base: f64,
    freqs: Vec<f64>,
}

impl FrequencyTable {
    pub fn new(head_dim: usize, base: f64) -> Result<Self> {
        if head_dim < 2 || head_dim % 2 != 0 {
            return Err(Error::invalid(format!(
                "head dimension must be even and at least 2, got {head_dim}"
            )));
        }
        if !(base > 1.0) || !base.is_finite() {
            return Err(Error::invalid(format!(
                "RoPE base must be finite and > 1, got {base}"
            )));
        }
        let d = head_dim as f64;
        let freqs = (0..head_dim / 2)
            .map(|j| base.powf(-((2 * j) as f64) / d))
            .collect();
        Ok(Self {
            head_dim,
            base,
            freqs,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn base(&self) -> f64 {
        self.base
    }

    /// Number of rotated pairs, `d / 2`.
    pub fn pairs(&self) -> usize {
        self.freqs.len()
    }

    pub fn freqs(&self) -> &[f64] {
        &self.freqs
    }
}

/// Builds the frequency table for head dimension `d` and base `c`.
pub fn make_frequency_table(d: usize, c: f64) -> Result<FrequencyTable> {
    FrequencyTable::new(d, c)
}

/// A query or key vector of a single attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadVector(Vec<f64>);

impl HeadVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "head vector entry {i} is not finite"
            )));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &HeadVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_dim(x: &HeadVector, table: &FrequencyTable) -> Result<()> {
    if x.len() != table.head_dim() {
        return Err(Error::invalid(format!(
            "head vector has {} entries but the frequency table expects {}",
            x.len(),
            table.head_dim()
        )));
    }
    Ok(())
}

fn check_position(m: f64) -> Result<()> {
    if !m.is_finite() || m < 0.0 {
        return Err(Error::invalid(format!(
            "position must be finite and non-negative, got {m}"
        )));
    }
    Ok(())
}

/// Rotates every coordinate pair of `x` by `m * theta_j`.
///
/// `m` may be fractional; interpolated positions rely on that.
pub fn apply_rope(x: &HeadVector, m: f64, table: &FrequencyTable) -> Result<HeadVector> {
    check_dim(x, table)?;
    check_position(m)?;
    let mut out = x.0.clone();
    for (pair, &theta) in out.chunks_exact_mut(2).zip(table.freqs()) {
        let (sin, cos) = (m * theta).sin_cos();
        let (re, im) = (pair[0], pair[1]);
        pair[0] = re * cos - im * sin;
        pair[1] = re * sin + im * cos;
    }
    Ok(HeadVector(out))
}

/// Pre-softmax score between query `q` at position `m` and key `k` at `n`:
/// `Re sum_j (q[2j] + i q[2j+1]) (k[2j] - i k[2j+1]) exp(i (m - n) theta_j)`.
///
/// Depends on `m` and `n` only through `m - n`.
pub fn attention_score(
    q: &HeadVector,
    k: &HeadVector,
    m: f64,
    n: f64,
    table: &FrequencyTable,
) -> Result<f64> {
    check_dim(q, table)?;
    check_dim(k, table)?;
    check_position(m)?;
    check_position(n)?;
    let s = m - n;
    let score = q
        .0
        .chunks_exact(2)
        .zip(k.0.chunks_exact(2))
        .zip(table.freqs())
        .map(|((qp, kp), &theta)| {
            // h = (q0 + i q1)(k0 - i k1)
            let h_re = qp[0] * kp[0] + qp[1] * kp[1];
            let h_im = qp[1] * kp[0] - qp[0] * kp[1];
            let (sin, cos) = (s * theta).sin_cos();
            h_re * cos - h_im * sin
        })
        .sum();
    Ok(score)
}

/// Position interpolation from a trained window `L` to an extended window
/// `L' >= L`: position `m` is encoded as `m * L / L'`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionMap {
    trained_window: usize,
    extended_window: usize,
}

impl PositionMap {
    pub fn new(trained_window: usize, extended_window: usize) -> Result<Self> {
        if trained_window == 0 {
            return Err(Error::invalid("trained window must be positive"));
        }
        if extended_window < trained_window {
            return Err(Error::invalid(format!(
                "extended window {extended_window} is smaller than trained window {trained_window}"
            )));
        }
        Ok(Self {
            trained_window,
            extended_window,
        })
    }

    /// The unscaled map for a model that has not been extended.
    pub fn identity(window: usize) -> Result<Self> {
        Self::new(window, window)
    }

    pub fn trained_window(&self) -> usize {
        self.trained_window
    }

    pub fn extended_window(&self) -> usize {
        self.extended_window
    }

    /// `L / L'`, in `(0, 1]`.
    pub fn scale(&self) -> f64 {
        self.trained_window as f64 / self.extended_window as f64
    }

    pub fn is_identity(&self) -> bool {
        self.trained_window == self.extended_window
    }

    /// Maps `m` without the range check. The product is formed as
    /// `m * L / L'` so the identity map returns `m` bit for bit.
    pub(crate) fn map_unchecked(&self, m: f64) -> f64 {
        if self.is_identity() {
            m
        } else {
            m * self.trained_window as f64 / self.extended_window as f64
        }
    }
}

/// Rescales position `m in [0, L')` into `[0, L)`.
pub fn interpolate_position(m: f64, map: &PositionMap) -> Result<f64> {
    if !m.is_finite() || m < 0.0 || m >= map.extended_window as f64 {
        return Err(Error::invalid(format!(
            "position {m} outside the extended window [0, {})",
            map.extended_window
        )));
    }
    Ok(map.map_unchecked(m))
}

/// [`attention_score`] with both positions passed through the interpolation
/// map first.
pub fn interpolated_attention_score(
    q: &HeadVector,
    k: &HeadVector,
    m: f64,
    n: f64,
    map: &PositionMap,
    table: &FrequencyTable,
) -> Result<f64> {
    let m = interpolate_position(m, map)?;
    let n = interpolate_position(n, map)?;
    attention_score(q, k, m, n, table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn hv(v: &[f64]) -> HeadVector {
        HeadVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn frequency_table_examples() {
        assert_eq!(make_frequency_table(2, 1e4).unwrap().freqs(), &[1.0]);

        let t = make_frequency_table(4, 1e4).unwrap();
        assert_eq!(t.freqs()[0], 1.0);
        assert!((t.freqs()[1] - 0.01).abs() < 1e-15);

        let t = make_frequency_table(128, 1e4).unwrap();
        assert_eq!(t.pairs(), 64);
        let expected = 10f64.powf(-4.0 * 126.0 / 128.0);
        assert!((t.freqs()[63] - expected).abs() < 1e-18);
        assert!((t.freqs()[63] - 1.1548e-4).abs() < 1e-8);
        assert!(t.freqs().windows(2).all(|w| w[1] < w[0]));
        assert!(t.freqs().iter().all(|&f| f > 0.0 && f <= 1.0));
    }

    #[test]
    fn frequency_table_rejects_bad_arguments() {
        assert!(matches!(
            make_frequency_table(3, 1e4),
            Err(Error::InvalidArgument(_))
        ));
        assert!(make_frequency_table(0, 1e4).is_err());
        assert!(make_frequency_table(4, 1.0).is_err());
        assert!(make_frequency_table(4, 0.5).is_err());
        assert!(make_frequency_table(4, f64::NAN).is_err());
    }

    #[test]
    fn rope_at_zero_is_identity() {
        let t = make_frequency_table(8, 1e4).unwrap();
        let x = hv(&[0.3, -1.2, 2.0, 0.5, -0.7, 0.1, 9.0, -3.0]);
        assert_eq!(apply_rope(&x, 0.0, &t).unwrap(), x);
    }

    #[test]
    fn rope_single_pair_rotations() {
        let t = make_frequency_table(2, 1e4).unwrap();
        let out = apply_rope(&hv(&[1.0, 0.0]), 1.0, &t).unwrap();
        assert!((out.values()[0] - 1f64.cos()).abs() < 1e-15);
        assert!((out.values()[1] - 1f64.sin()).abs() < 1e-15);
        assert!((out.values()[0] - 0.5403).abs() < 1e-4);
        assert!((out.values()[1] - 0.8415).abs() < 1e-4);

        let out = apply_rope(&hv(&[1.0, 0.0]), FRAC_PI_2, &t).unwrap();
        assert!(out.values()[0].abs() < 1e-12);
        assert!((out.values()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rope_rejects_mismatched_dimension() {
        let t = make_frequency_table(4, 1e4).unwrap();
        assert!(apply_rope(&hv(&[1.0, 0.0]), 1.0, &t).is_err());
        assert!(attention_score(&hv(&[1.0, 0.0]), &hv(&[1.0; 4]), 0.0, 0.0, &t).is_err());
        assert!(HeadVector::new(vec![f64::INFINITY, 0.0]).is_err());
    }

    #[test]
    fn score_examples() {
        let t = make_frequency_table(8, 1e4).unwrap();
        let e0 = hv(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(attention_score(&e0, &e0, 5.0, 5.0, &t).unwrap(), 1.0);

        let t = make_frequency_table(2, 1e4).unwrap();
        for &(m, n) in &[(3.0, 1.0), (0.5, 0.0), (10.0, 12.5)] {
            let got = attention_score(&hv(&[1.0, 0.0]), &hv(&[0.0, 1.0]), m, n, &t).unwrap();
            assert!((got - (m - n).sin()).abs() < 1e-14);
        }
    }

    #[test]
    fn interpolate_examples() {
        let map = PositionMap::new(2048, 4096).unwrap();
        assert_eq!(interpolate_position(2048.0, &map).unwrap(), 1024.0);
        assert_eq!(interpolate_position(4095.0, &map).unwrap(), 2047.5);
        assert_eq!(map.scale(), 0.5);

        let id = PositionMap::identity(2048).unwrap();
        for m in [0.0, 1.0, 17.25, 2047.0] {
            assert_eq!(interpolate_position(m, &id).unwrap(), m);
        }
        assert_eq!(id.scale(), 1.0);
    }

    #[test]
    fn interpolate_rejects_out_of_range() {
        let map = PositionMap::new(16, 32).unwrap();
        assert!(interpolate_position(32.0, &map).is_err());
        assert!(interpolate_position(-1.0, &map).is_err());
        assert!(PositionMap::new(32, 16).is_err());
        assert!(PositionMap::new(0, 16).is_err());
    }

    #[test]
    fn interpolation_is_monotone_and_stays_below_trained_window() {
        let map = PositionMap::new(100, 300).unwrap();
        let mapped: Vec<f64> = (0..300)
            .map(|m| interpolate_position(m as f64, &map).unwrap())
            .collect();
        assert!(mapped.windows(2).all(|w| w[1] > w[0]));
        assert!(*mapped.last().unwrap() < 100.0);
        assert_eq!(*mapped.last().unwrap(), 299.0 * 100.0 / 300.0);
    }
}
