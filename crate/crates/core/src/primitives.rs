//! Numeric building blocks shared by every method: the miscoverage level,
//! score containers, conformal quantile ranks and order statistics.
//!
//! Quantile ranks follow the split-conformal convention. For `n` calibration
//! scores the upper rank is `ceil((1 - alpha)(n + 1))` and the lower rank is
//! `floor(alpha (n + 1))`. When the upper rank exceeds `n` (equivalently the
//! lower rank drops below 1) the threshold is infinite and every candidate is
//! accepted downstream.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scores below this value are raised to it when a [`ScoreMatrix`] or
/// [`TestScoreProfile`] is built. E-value normalization and negative powers
/// are singular at zero.
pub const SCORE_FLOOR: f64 = 1e-12;

/// Absorbs the representation error of `alpha` when a rank lands on an integer.
const RANK_SLACK: f64 = 1e-10;

/// Miscoverage level, strictly inside `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Alpha(f64);

impl Alpha {
    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value < 1.0 {
            Ok(Alpha(value))
        } else {
            Err(Error::config(format!("alpha must lie in (0, 1), got {value}")))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `alpha / k`, used for Bonferroni-style per-model levels.
    pub fn divided(self, k: usize) -> Self {
        Alpha(self.0 / k.max(1) as f64)
    }
}

impl TryFrom<f64> for Alpha {
    type Error = Error;
    fn try_from(value: f64) -> Result<Self> {
        Alpha::new(value)
    }
}

impl From<Alpha> for f64 {
    fn from(a: Alpha) -> f64 {
        a.0
    }
}

impl std::fmt::Display for Alpha {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Rank of the upper empirical quantile, or `Infinite` when it overflows `n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpperIndex {
    Rank(usize),
    Infinite,
}

/// Rank of the lower empirical quantile, or `NegInfinite` when it is below 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LowerIndex {
    Rank(usize),
    NegInfinite,
}

/// `ceil((1 - alpha)(n + 1))`, or [`UpperIndex::Infinite`] when that exceeds `n`.
pub fn upper_quantile_index(n: usize, alpha: Alpha) -> UpperIndex {
    let m = (n + 1) as f64;
    let raw = (1.0 - alpha.value()) * m;
    let k = (raw - RANK_SLACK * m).ceil().max(1.0) as usize;
    if k <= n {
        UpperIndex::Rank(k)
    } else {
        UpperIndex::Infinite
    }
}

/// `floor(alpha (n + 1))`, or [`LowerIndex::NegInfinite`] when that is below 1.
pub fn lower_quantile_index(n: usize, alpha: Alpha) -> LowerIndex {
    let m = (n + 1) as f64;
    let raw = alpha.value() * m;
    let l = (raw + RANK_SLACK * m).floor() as usize;
    if l >= 1 {
        LowerIndex::Rank(l.min(n))
    } else {
        LowerIndex::NegInfinite
    }
}

/// The `rank`-th smallest entry of `values` (1-based, duplicates counted).
pub fn order_statistic(values: &[f64], rank: usize) -> Result<f64> {
    if rank == 0 || rank > values.len() {
        return Err(Error::contract(format!(
            "order statistic rank {rank} outside 1..={}",
            values.len()
        )));
    }
    let mut scratch = values.to_vec();
    let (_, nth, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*nth)
}

/// Upper conformal quantile of `values`; `+inf` when the rank overflows.
pub fn upper_conformal_quantile(values: &[f64], alpha: Alpha) -> Result<f64> {
    match upper_quantile_index(values.len(), alpha) {
        UpperIndex::Rank(k) => order_statistic(values, k),
        UpperIndex::Infinite => Ok(f64::INFINITY),
    }
}

fn clamp_score(x: f64) -> f64 {
    x.max(SCORE_FLOOR)
}

fn check_score(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::contract(format!("score {x} is not finite")));
    }
    if x < 0.0 {
        return Err(Error::contract(format!("score {x} is negative")));
    }
    Ok(clamp_score(x))
}

/// `n x K` calibration scores, one column per base model, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ScoreMatrix {
    /// Builds a matrix from row-major data. Entries must be finite and
    /// nonnegative; values below [`SCORE_FLOOR`] are raised to it.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "score matrix needs at least one row and one column, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "score matrix {rows}x{cols} expects {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        let data = data.into_iter().map(check_score).collect::<Result<Vec<_>>>()?;
        Ok(ScoreMatrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::contract(format!(
                    "row {i} has {} scores, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        ScoreMatrix::new(rows.len(), cols, data)
    }

    pub fn from_columns<C: AsRef<[f64]>>(columns: &[C]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map(|c| c.as_ref().len()).unwrap_or(0);
        if columns.iter().any(|c| c.as_ref().len() != rows) {
            return Err(Error::contract("columns have different lengths"));
        }
        let mut data = vec![0.0; rows * cols];
        for (k, c) in columns.iter().enumerate() {
            for (i, &v) in c.as_ref().iter().enumerate() {
                data[i * cols + k] = v;
            }
        }
        ScoreMatrix::new(rows, cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, k: usize) -> f64 {
        self.data[i * self.cols + k]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, k)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Per-column sums, accumulated in row order.
    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.cols];
        for row in self.data.chunks_exact(self.cols) {
            for (s, v) in sums.iter_mut().zip(row) {
                *s += v;
            }
        }
        sums
    }

    /// Sub-matrix made of the given rows, in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            if i >= self.rows {
                return Err(Error::contract(format!("row {i} out of range")));
            }
            data.extend_from_slice(self.row(i));
        }
        ScoreMatrix::new(indices.len(), self.cols, data)
    }
}

/// The `K` test scores `s^(k)(x_test, y)` of one candidate label.
#[derive(Debug, Clone, PartialEq)]
pub struct TestScoreProfile {
    scores: Vec<f64>,
}

impl TestScoreProfile {
    pub fn new(scores: Vec<f64>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::contract("test score profile is empty"));
        }
        let scores = scores.into_iter().map(check_score).collect::<Result<Vec<_>>>()?;
        Ok(TestScoreProfile { scores })
    }

    #[inline]
    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub(crate) fn check_against(&self, calib: &ScoreMatrix) -> Result<()> {
        if self.len() != calib.cols() {
            return Err(Error::contract(format!(
                "test profile has {} scores but calibration has {} models",
                self.len(),
                calib.cols()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn a(x: f64) -> Alpha {
        Alpha::new(x).unwrap()
    }

    #[test]
    fn alpha_bounds() {
        assert!(Alpha::new(0.0).is_err());
        assert!(Alpha::new(1.0).is_err());
        assert!(Alpha::new(f64::NAN).is_err());
        assert!(Alpha::new(-0.1).is_err());
        assert_eq!(a(0.1).value(), 0.1);
    }

    #[test]
    fn upper_index_examples() {
        assert_eq!(upper_quantile_index(4, a(0.2)), UpperIndex::Rank(4));
        assert_eq!(upper_quantile_index(9, a(0.05)), UpperIndex::Infinite);
        assert_eq!(upper_quantile_index(99, a(0.1)), UpperIndex::Rank(90));
    }

    #[test]
    fn lower_index_examples() {
        assert_eq!(lower_quantile_index(4, a(0.2)), LowerIndex::Rank(1));
        assert_eq!(lower_quantile_index(9, a(0.05)), LowerIndex::NegInfinite);
        assert_eq!(lower_quantile_index(99, a(0.1)), LowerIndex::Rank(10));
    }

    #[test]
    fn order_statistic_examples() {
        assert_eq!(order_statistic(&[3.0, 1.0, 2.0], 2).unwrap(), 2.0);
        assert_eq!(order_statistic(&[5.0], 1).unwrap(), 5.0);
        assert_eq!(order_statistic(&[2.0, 2.0, 1.0, 4.0], 3).unwrap(), 2.0);
        assert!(matches!(order_statistic(&[1.0], 0), Err(Error::Contract(_))));
        assert!(matches!(order_statistic(&[1.0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn score_matrix_validation_and_floor() {
        assert!(ScoreMatrix::new(1, 1, vec![-1.0]).is_err());
        assert!(ScoreMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(ScoreMatrix::new(2, 1, vec![1.0]).is_err());
        assert!(ScoreMatrix::new(0, 1, vec![]).is_err());
        let m = ScoreMatrix::from_rows(&[[0.0, 1.0], [2.0, 3.0]]).unwrap();
        assert_eq!(m.get(0, 0), SCORE_FLOOR);
        assert_eq!(m.column(1), vec![1.0, 3.0]);
        assert_eq!(m.column_sums(), vec![2.0 + SCORE_FLOOR, 4.0]);
        let c = ScoreMatrix::from_columns(&[vec![0.5, 2.0], vec![1.0, 3.0]]).unwrap();
        assert_eq!(c.row(1), &[2.0, 3.0]);
    }

    proptest! {
        #[test]
        fn index_identity_when_not_integral(n in 1usize..500, alpha in 0.001f64..0.999) {
            let alpha = a(alpha);
            let raw = (1.0 - alpha.value()) * (n + 1) as f64;
            prop_assume!((raw - raw.round()).abs() > 1e-6);
            if let UpperIndex::Rank(k) = upper_quantile_index(n, alpha) {
                prop_assert_eq!(lower_quantile_index(n, alpha), LowerIndex::Rank(n + 1 - k));
            } else {
                prop_assert_eq!(lower_quantile_index(n, alpha), LowerIndex::NegInfinite);
            }
        }

        #[test]
        fn order_statistics_enumerate_sorted(values in prop::collection::vec(-1e6f64..1e6, 1..60)) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let enumerated: Vec<f64> =
                (1..=values.len()).map(|r| order_statistic(&values, r).unwrap()).collect();
            prop_assert_eq!(enumerated, sorted);
        }
    }
}
