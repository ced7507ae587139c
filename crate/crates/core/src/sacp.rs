//! Prediction sets built from aggregated e-values, and the exponent search
//! that picks the aggregator with the shortest average set.
//!
//! Thresholds depend on the candidate label, so classification recomputes the
//! quantile per class and regression per grid point. [`Calibrated`] caches
//! everything that does not depend on the candidate so that each check costs
//! one pass over the calibration rows.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{saturate, AggregatorKind, AggregatorSpec, Direction};
use crate::error::{Error, Result};
use crate::primitives::{
    lower_quantile_index, upper_quantile_index, Alpha, LowerIndex, ScoreMatrix, TestScoreProfile,
    UpperIndex, SCORE_FLOOR,
};
use crate::scores::RegressionPredictions;

/// Uniformly spaced regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetGrid {
    start: f64,
    step: f64,
    len: usize,
}

impl TargetGrid {
    /// `len` evenly spaced points from `lo` to `hi` inclusive.
    pub fn new(lo: f64, hi: f64, len: usize) -> Result<Self> {
        if len < 2 {
            return Err(Error::config(format!("grid needs at least 2 points, got {len}")));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config(format!("invalid grid bounds [{lo}, {hi}]")));
        }
        Ok(TargetGrid {
            start: lo,
            step: (hi - lo) / (len - 1) as f64,
            len,
        })
    }

    /// Grid over `[min, max]` of the calibration targets.
    pub fn spanning(targets: &[f64], len: usize) -> Result<Self> {
        let (lo, hi) = targets
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        TargetGrid::new(lo, hi, len)
    }

    /// Validates that `points` are strictly increasing and uniformly spaced.
    pub fn from_points(points: &[f64]) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::config("grid needs at least 2 points"));
        }
        let grid = TargetGrid::new(points[0], points[points.len() - 1], points.len())?;
        for (i, &p) in points.iter().enumerate() {
            let expected = grid.point(i);
            if (p - expected).abs() > 1e-9 * expected.abs().max(grid.step) {
                return Err(Error::config(format!("grid point {i} breaks uniform spacing")));
            }
        }
        Ok(grid)
    }

    #[inline]
    pub fn point(&self, i: usize) -> f64 {
        self.start + i as f64 * self.step
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.len).map(|i| self.point(i)).collect()
    }

    #[inline]
    pub fn step(&self) -> f64 {
        self.step
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Number of grid points strictly below `y`.
    fn count_below(&self, y: f64) -> usize {
        // Start from the arithmetic guess and fix rounding at the edges.
        let mut j = (((y - self.start) / self.step).ceil().max(0.0) as usize).min(self.len);
        while j > 0 && self.point(j - 1) >= y {
            j -= 1;
        }
        while j < self.len && self.point(j) < y {
            j += 1;
        }
        j
    }
}

/// Accepted classes (0-based, ascending).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionSetClassification {
    pub accepted: Vec<usize>,
    pub n_classes: usize,
}

impl PredictionSetClassification {
    pub fn contains(&self, class: usize) -> bool {
        self.accepted.binary_search(&class).is_ok()
    }

    pub fn size(&self) -> usize {
        self.accepted.len()
    }
}

/// Grid mask and its length (`count * step`).
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSetRegression {
    pub mask: Vec<bool>,
    pub length: f64,
}

impl PredictionSetRegression {
    pub fn from_mask(mask: Vec<bool>, step: f64) -> Self {
        let count = mask.iter().filter(|&&m| m).count();
        PredictionSetRegression {
            mask,
            length: count as f64 * step,
        }
    }
}

#[derive(Debug, Clone)]
enum Prepared {
    /// Raw scores; the aggregate is a sum, min or max of `s / D`.
    Raw,
    /// `s^p` per entry; the aggregate is `sum_k s^p * D_k^-p`.
    Powered { p: f64, powered: Vec<f64>, usable: bool },
}

/// Calibration scores prepared for repeated membership checks under one aggregator.
#[derive(Debug, Clone)]
pub struct Calibrated<'a> {
    calib: &'a ScoreMatrix,
    column_sums: Vec<f64>,
    spec: AggregatorSpec,
    rank: Rank,
    prepared: Prepared,
}

#[derive(Debug, Clone, Copy)]
enum Rank {
    AcceptAll,
    /// Accept iff fewer than `k` aggregated calibration scores are `< F_test`.
    Upper(usize),
    /// Accept iff at least `l` aggregated calibration scores are `<= F_test`.
    Lower(usize),
}

impl<'a> Calibrated<'a> {
    pub fn new(calib: &'a ScoreMatrix, spec: AggregatorSpec, alpha: Alpha) -> Self {
        let n = calib.rows();
        let rank = match spec.direction() {
            Direction::Increasing => match upper_quantile_index(n, alpha) {
                UpperIndex::Rank(k) => Rank::Upper(k),
                UpperIndex::Infinite => Rank::AcceptAll,
            },
            Direction::Decreasing => match lower_quantile_index(n, alpha) {
                LowerIndex::Rank(l) => Rank::Lower(l),
                LowerIndex::NegInfinite => Rank::AcceptAll,
            },
        };
        let prepared = match spec.kind() {
            AggregatorKind::Power(p) => {
                let powered: Vec<f64> = calib.as_slice().iter().map(|s| s.powf(p)).collect();
                let usable = powered.iter().all(|v| v.is_finite() && *v > 0.0);
                Prepared::Powered { p, powered, usable }
            }
            _ => Prepared::Raw,
        };
        Calibrated {
            calib,
            column_sums: calib.column_sums(),
            spec,
            rank,
            prepared,
        }
    }

    pub fn spec(&self) -> AggregatorSpec {
        self.spec
    }

    pub fn n_models(&self) -> usize {
        self.calib.cols()
    }

    /// Membership decision for one candidate's test scores (already floored).
    pub fn accepts(&self, test: &[f64]) -> bool {
        debug_assert_eq!(test.len(), self.calib.cols());
        let n = self.calib.rows();
        let k_models = self.calib.cols();
        if let Rank::AcceptAll = self.rank {
            return true;
        }
        let mut inv = [0.0f64; 16];
        let mut inv_heap;
        let inv: &mut [f64] = if k_models <= inv.len() {
            &mut inv[..k_models]
        } else {
            inv_heap = vec![0.0; k_models];
            &mut inv_heap
        };
        let m = (n + 1) as f64;
        for ((w, s), t) in inv.iter_mut().zip(&self.column_sums).zip(test) {
            *w = m / (s + t);
        }
        let data = self.calib.as_slice();
        match &self.prepared {
            Prepared::Raw => {
                let f_test = self.raw_aggregate(test, inv);
                self.count(f_test, data.chunks_exact(k_models).map(|row| self.raw_aggregate(row, inv)))
            }
            Prepared::Powered { p, powered, usable } => {
                let p = *p;
                for w in inv.iter_mut() {
                    *w = w.powf(p);
                }
                let scale_ok = inv.iter().all(|w| w.is_finite() && *w > 0.0);
                let f_test = saturate(
                    test.iter().zip(self.column_sums.iter()).map(|(t, s)| (t * m / (s + t)).powf(p)).sum(),
                );
                if *usable && scale_ok {
                    self.count(
                        f_test,
                        powered
                            .chunks_exact(k_models)
                            .map(|row| saturate(row.iter().zip(inv.iter()).map(|(a, w)| a * w).sum())),
                    )
                } else {
                    // Log-space fallback when the factored form under- or overflows.
                    let log_scale: Vec<f64> = self
                        .column_sums
                        .iter()
                        .zip(test)
                        .map(|(s, t)| (m / (s + t)).ln())
                        .collect();
                    self.count(
                        f_test,
                        data.chunks_exact(k_models).map(|row| {
                            saturate(
                                row.iter()
                                    .zip(&log_scale)
                                    .map(|(s, l)| (p * (s.ln() + l)).exp())
                                    .sum(),
                            )
                        }),
                    )
                }
            }
        }
    }

    #[inline]
    fn raw_aggregate(&self, row: &[f64], inv: &[f64]) -> f64 {
        let it = row.iter().zip(inv).map(|(s, w)| s * w);
        match self.spec.kind() {
            AggregatorKind::Min => it.fold(f64::INFINITY, f64::min),
            AggregatorKind::Max => it.fold(f64::NEG_INFINITY, f64::max),
            _ => saturate(it.sum()),
        }
    }

    /// Counting form of the order-statistic comparison, with early exits.
    #[inline]
    fn count(&self, f_test: f64, f_cal: impl Iterator<Item = f64>) -> bool {
        let n = self.calib.rows();
        match self.rank {
            Rank::AcceptAll => true,
            Rank::Upper(k) => {
                // F_test <= F_(k)  <=>  #{F_i < F_test} <= k - 1
                let (mut below, mut rest) = (0usize, 0usize);
                for f in f_cal {
                    if f < f_test {
                        below += 1;
                        if below >= k {
                            return false;
                        }
                    } else {
                        rest += 1;
                        if rest > n - k {
                            return true;
                        }
                    }
                }
                below < k
            }
            Rank::Lower(l) => {
                // F_test >= F_(l)  <=>  #{F_i <= F_test} >= l
                let (mut at_most, mut above) = (0usize, 0usize);
                for f in f_cal {
                    if f <= f_test {
                        at_most += 1;
                        if at_most >= l {
                            return true;
                        }
                    } else {
                        above += 1;
                        if above > n - l {
                            return false;
                        }
                    }
                }
                at_most >= l
            }
        }
    }

    pub fn accepts_profile(&self, test: &TestScoreProfile) -> Result<bool> {
        test.check_against(self.calib)?;
        Ok(self.accepts(test.scores()))
    }

    /// Membership of regression candidate `y`.
    pub fn accepts_target(&self, predictions: &[f64], y: f64) -> bool {
        let mut buf = [0.0f64; 16];
        if predictions.len() <= buf.len() {
            let t = &mut buf[..predictions.len()];
            fill_residuals(t, predictions, y);
            self.accepts(t)
        } else {
            let mut t = vec![0.0; predictions.len()];
            fill_residuals(&mut t, predictions, y);
            self.accepts(&t)
        }
    }

    /// Grid mask, evaluating every grid point.
    pub fn regress_exhaustive(&self, predictions: &[f64], grid: &TargetGrid) -> PredictionSetRegression {
        let mask = (0..grid.len()).map(|j| self.accepts_target(predictions, grid.point(j))).collect();
        PredictionSetRegression::from_mask(mask, grid.step())
    }

    /// Grid mask. Below the smallest and above the largest model prediction
    /// the accepted region is one interval adjacent to the prediction range,
    /// so those parts are located by bisection; points inside the range are
    /// all evaluated.
    pub fn regress(&self, predictions: &[f64], grid: &TargetGrid) -> PredictionSetRegression {
        let g = grid.len();
        if let Rank::AcceptAll = self.rank {
            return PredictionSetRegression::from_mask(vec![true; g], grid.step());
        }
        let (lo, hi) = predictions
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let left_end = grid.count_below(lo);
        let right_start = grid.count_below(hi).max(left_end);
        let right_start = (right_start..g).find(|&j| grid.point(j) > hi).unwrap_or(g);
        let mut mask = vec![false; g];
        let accept = |j: usize| self.accepts_target(predictions, grid.point(j));

        // Left part [0, left_end): accepted points form a suffix.
        if left_end > 0 && accept(left_end - 1) {
            let (mut a, mut b) = (0usize, left_end - 1);
            while a < b {
                let mid = (a + b) / 2;
                if accept(mid) {
                    b = mid;
                } else {
                    a = mid + 1;
                }
            }
            mask[a..left_end].iter_mut().for_each(|m| *m = true);
        }
        for (j, m) in mask.iter_mut().enumerate().take(right_start).skip(left_end) {
            *m = accept(j);
        }
        // Right part [right_start, g): accepted points form a prefix.
        if right_start < g && accept(right_start) {
            let (mut a, mut b) = (right_start, g - 1);
            while a < b {
                let mid = (a + b).div_ceil(2);
                if accept(mid) {
                    a = mid;
                } else {
                    b = mid - 1;
                }
            }
            mask[right_start..=a].iter_mut().for_each(|m| *m = true);
        }
        PredictionSetRegression::from_mask(mask, grid.step())
    }
}

#[inline]
fn fill_residuals(out: &mut [f64], predictions: &[f64], y: f64) {
    for (t, mu) in out.iter_mut().zip(predictions) {
        *t = (y - mu).abs().max(SCORE_FLOOR);
    }
}

/// Class-wise set: class `c` is accepted iff its candidate passes the membership rule.
pub fn sacp_classify(
    calib: &ScoreMatrix,
    test_profiles: &[TestScoreProfile],
    spec: &AggregatorSpec,
    alpha: Alpha,
) -> Result<PredictionSetClassification> {
    let engine = Calibrated::new(calib, *spec, alpha);
    classify_with(&engine, test_profiles)
}

fn classify_with(engine: &Calibrated<'_>, profiles: &[TestScoreProfile]) -> Result<PredictionSetClassification> {
    let mut accepted = Vec::new();
    for (c, p) in profiles.iter().enumerate() {
        if engine.accepts_profile(p)? {
            accepted.push(c);
        }
    }
    Ok(PredictionSetClassification {
        accepted,
        n_classes: profiles.len(),
    })
}

/// Grid-based regression set around the models' predictions at one input.
pub fn sacp_regress(
    calib: &ScoreMatrix,
    predictions: &RegressionPredictions,
    grid: &TargetGrid,
    spec: &AggregatorSpec,
    alpha: Alpha,
) -> Result<PredictionSetRegression> {
    check_models(calib, predictions)?;
    Ok(Calibrated::new(calib, *spec, alpha).regress(predictions.values(), grid))
}

/// Membership of the exact target `y_true`, without a grid.
pub fn sacp_membership_exact(
    calib: &ScoreMatrix,
    predictions: &RegressionPredictions,
    y_true: f64,
    spec: &AggregatorSpec,
    alpha: Alpha,
) -> Result<bool> {
    check_models(calib, predictions)?;
    Ok(Calibrated::new(calib, *spec, alpha).accepts_target(predictions.values(), y_true))
}

fn check_models(calib: &ScoreMatrix, predictions: &RegressionPredictions) -> Result<()> {
    if predictions.len() != calib.cols() {
        return Err(Error::contract(format!(
            "{} predictions for {} calibrated models",
            predictions.len(),
            calib.cols()
        )));
    }
    Ok(())
}

/// Unlabeled test inputs for the exponent search.
#[derive(Debug, Clone, Copy)]
pub enum TestInputs<'a> {
    Regression {
        predictions: &'a [RegressionPredictions],
        grid: &'a TargetGrid,
    },
    /// One profile per class for every test point.
    Classification { profiles: &'a [Vec<TestScoreProfile>] },
}

impl TestInputs<'_> {
    pub fn len(&self) -> usize {
        match self {
            TestInputs::Regression { predictions, .. } => predictions.len(),
            TestInputs::Classification { profiles } => profiles.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-point set sizes under one aggregator: grid length for regression,
/// class count for classification.
pub fn set_lengths(
    calib: &ScoreMatrix,
    inputs: TestInputs<'_>,
    spec: &AggregatorSpec,
    alpha: Alpha,
) -> Result<Vec<f64>> {
    let engine = Calibrated::new(calib, *spec, alpha);
    match inputs {
        TestInputs::Regression { predictions, grid } => {
            for p in predictions {
                check_models(calib, p)?;
            }
            Ok(predictions
                .par_iter()
                .map(|p| engine.regress(p.values(), grid).length)
                .collect())
        }
        TestInputs::Classification { profiles } => profiles
            .par_iter()
            .map(|ps| classify_with(&engine, ps).map(|s| s.size() as f64))
            .collect(),
    }
}

/// Outcome of the exponent search.
#[derive(Debug, Clone)]
pub struct Selection {
    pub chosen: AggregatorSpec,
    pub chosen_index: usize,
    /// Average set size per candidate, in candidate order.
    pub average_lengths: Vec<f64>,
    /// Per-point set sizes of the chosen candidate.
    pub chosen_lengths: Vec<f64>,
}

/// Picks the candidate with the smallest average set size over the test
/// inputs. Labels are never read. Ties go to the exponent closest to 1, then
/// to the smaller `|p|`, then `min` before `max`.
pub fn select_p(
    calib: &ScoreMatrix,
    inputs: TestInputs<'_>,
    candidates: &[AggregatorSpec],
    alpha: Alpha,
) -> Result<Selection> {
    if candidates.is_empty() {
        return Err(Error::contract("empty aggregator candidate list"));
    }
    if !candidates.iter().any(AggregatorSpec::is_sum) {
        return Err(Error::contract("candidate list must contain the sum aggregator (p = 1)"));
    }
    if inputs.is_empty() {
        return Err(Error::contract("no test inputs for the exponent search"));
    }
    let per_candidate = candidates
        .iter()
        .map(|spec| set_lengths(calib, inputs, spec, alpha))
        .collect::<Result<Vec<_>>>()?;
    let average_lengths: Vec<f64> = per_candidate.iter().map(|l| mean_in_order(l)).collect();
    let chosen_index = (0..candidates.len())
        .min_by(|&a, &b| {
            average_lengths[a]
                .total_cmp(&average_lengths[b])
                .then_with(|| tie_key(&candidates[a]).partial_cmp(&tie_key(&candidates[b])).unwrap())
        })
        .unwrap();
    let chosen_lengths = per_candidate.into_iter().nth(chosen_index).unwrap();
    Ok(Selection {
        chosen: candidates[chosen_index],
        chosen_index,
        average_lengths,
        chosen_lengths,
    })
}

fn tie_key(spec: &AggregatorSpec) -> (f64, f64, u8) {
    match spec.kind() {
        AggregatorKind::Min => (f64::INFINITY, f64::INFINITY, 0),
        AggregatorKind::Max => (f64::INFINITY, f64::INFINITY, 1),
        _ => {
            let p = spec.exponent();
            ((p - 1.0).abs(), p.abs(), 0)
        }
    }
}

pub(crate) fn mean_in_order(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    sum / values.len() as f64
}

/// Exponent search space: `count` evenly spaced exponents over `[lo, hi]`
/// (dropping `|p| < 1e-6`), plus `p = 1` and optionally `min`/`max`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PGrid {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    #[serde(default = "default_true")]
    pub include_extremes: bool,
}

fn default_true() -> bool {
    true
}

impl PGrid {
    pub fn regression() -> Self {
        PGrid { lo: -15.0, hi: 15.0, count: 61, include_extremes: true }
    }

    pub fn classification() -> Self {
        PGrid { lo: -8.0, hi: 8.0, count: 61, include_extremes: true }
    }

    pub fn candidates(&self) -> Result<Vec<AggregatorSpec>> {
        if !(self.lo.is_finite() && self.hi.is_finite()) || self.lo > self.hi || self.count == 0 {
            return Err(Error::config(format!(
                "invalid exponent grid [{}, {}] x {}",
                self.lo, self.hi, self.count
            )));
        }
        let mut out = vec![AggregatorSpec::SUM];
        let steps = self.count.saturating_sub(1).max(1) as f64;
        for i in 0..self.count {
            let p = if self.count == 1 {
                self.lo
            } else {
                self.lo + i as f64 * (self.hi - self.lo) / steps
            };
            if p.abs() < crate::aggregate::MIN_ABS_EXPONENT || p == 1.0 {
                continue;
            }
            out.push(AggregatorSpec::power(p)?);
        }
        if self.include_extremes {
            out.push(AggregatorSpec::MIN);
            out.push(AggregatorSpec::MAX);
        }
        Ok(out)
    }
}

impl std::str::FromStr for PGrid {
    type Err = Error;

    /// `lo:hi:count`, optionally suffixed with `:noext` to drop min/max.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::config(format!("invalid p-grid '{s}', expected lo:hi:count[:noext]"));
        if !(3..=4).contains(&parts.len()) {
            return Err(bad());
        }
        let lo = parts[0].trim().parse().map_err(|_| bad())?;
        let hi = parts[1].trim().parse().map_err(|_| bad())?;
        let count = parts[2].trim().parse().map_err(|_| bad())?;
        let include_extremes = match parts.get(3).map(|p| p.trim()) {
            None => true,
            Some("noext") => false,
            Some(_) => return Err(bad()),
        };
        let grid = PGrid { lo, hi, count, include_extremes };
        grid.candidates()?;
        Ok(grid)
    }
}
