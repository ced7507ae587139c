//! E-value normalization of per-model scores and symmetric aggregation.
//!
//! For a candidate label the calibration scores of model `k` and the test
//! score of that candidate share the denominator
//! `D_k = (sum_i s_ik + s_test_k) / (n + 1)`. Dividing by it turns each score
//! into an e-value: the `n + 1` values of a column average exactly one.
//! Aggregation then applies `Phi(x) = sum_k phi(x_k)` row-wise, with `phi`
//! the identity or a power, or takes the coordinate minimum or maximum.
//!
//! The comparison side of the final membership rule follows the monotonicity
//! of `Phi`. An increasing aggregate behaves like a nonconformity score and
//! is compared against the upper empirical quantile. A decreasing one is
//! compared against the lower quantile.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::primitives::{
    lower_quantile_index, order_statistic, upper_quantile_index, Alpha, LowerIndex, ScoreMatrix,
    TestScoreProfile, UpperIndex,
};

/// Exponents closer to zero than this are rejected: `x^p` is nearly constant.
pub const MIN_ABS_EXPONENT: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Increasing,
    Decreasing,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregatorKind {
    /// `phi` = identity.
    Sum,
    /// `phi(x) = x^p`, `p != 0`.
    Power(f64),
    Min,
    Max,
}

/// A validated aggregation function together with its monotonicity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct AggregatorSpec {
    kind: AggregatorKind,
}

impl AggregatorSpec {
    pub const SUM: AggregatorSpec = AggregatorSpec { kind: AggregatorKind::Sum };
    pub const MIN: AggregatorSpec = AggregatorSpec { kind: AggregatorKind::Min };
    pub const MAX: AggregatorSpec = AggregatorSpec { kind: AggregatorKind::Max };

    pub fn power(p: f64) -> Result<Self> {
        if !p.is_finite() || p.abs() < MIN_ABS_EXPONENT {
            return Err(Error::config(format!(
                "power exponent must be finite with |p| >= {MIN_ABS_EXPONENT}, got {p}"
            )));
        }
        Ok(AggregatorSpec { kind: AggregatorKind::Power(p) })
    }

    pub fn kind(&self) -> AggregatorKind {
        self.kind
    }

    pub fn direction(&self) -> Direction {
        match self.kind {
            AggregatorKind::Power(p) if p < 0.0 => Direction::Decreasing,
            _ => Direction::Increasing,
        }
    }

    /// Exponent of the power family member this spec denotes; `Sum` is `p = 1`
    /// and `Min`/`Max` are the `-inf`/`+inf` limits.
    pub fn exponent(&self) -> f64 {
        match self.kind {
            AggregatorKind::Sum => 1.0,
            AggregatorKind::Power(p) => p,
            AggregatorKind::Min => f64::NEG_INFINITY,
            AggregatorKind::Max => f64::INFINITY,
        }
    }

    /// True for `Sum` and `Power(1)`.
    pub fn is_sum(&self) -> bool {
        self.exponent() == 1.0
    }

    /// `Phi` applied to one e-vector. Never NaN; overflow saturates.
    pub fn aggregate(&self, evalues: &[f64]) -> f64 {
        let v = match self.kind {
            AggregatorKind::Sum => evalues.iter().sum(),
            AggregatorKind::Power(p) => evalues.iter().map(|&x| x.powf(p)).sum(),
            AggregatorKind::Min => evalues.iter().copied().fold(f64::INFINITY, f64::min),
            AggregatorKind::Max => evalues.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        saturate(v)
    }
}

#[inline]
pub(crate) fn saturate(v: f64) -> f64 {
    if v.is_nan() {
        f64::MAX
    } else {
        v.clamp(-f64::MAX, f64::MAX)
    }
}

impl fmt::Display for AggregatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            AggregatorKind::Sum => f.write_str("sum"),
            AggregatorKind::Min => f.write_str("min"),
            AggregatorKind::Max => f.write_str("max"),
            AggregatorKind::Power(p) => write!(f, "p={p}"),
        }
    }
}

impl FromStr for AggregatorSpec {
    type Err = Error;

    /// Accepts `sum`, `min`, `max`, `p=<exponent>` or a bare exponent.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "sum" => Ok(AggregatorSpec::SUM),
            "min" => Ok(AggregatorSpec::MIN),
            "max" => Ok(AggregatorSpec::MAX),
            other => {
                let num = other.strip_prefix("p=").unwrap_or(other);
                let p: f64 = num
                    .parse()
                    .map_err(|_| Error::config(format!("unknown aggregator '{s}'")))?;
                AggregatorSpec::power(p)
            }
        }
    }
}

impl TryFrom<String> for AggregatorSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<AggregatorSpec> for String {
    fn from(s: AggregatorSpec) -> String {
        s.to_string()
    }
}

/// E-values of the calibration rows and of one test candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct EValueBlock {
    rows: usize,
    cols: usize,
    e_cal: Vec<f64>,
    e_test: Vec<f64>,
    denominators: Vec<f64>,
}

impl EValueBlock {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn calibration_row(&self, i: usize) -> &[f64] {
        &self.e_cal[i * self.cols..(i + 1) * self.cols]
    }

    pub fn test(&self) -> &[f64] {
        &self.e_test
    }

    pub fn denominators(&self) -> &[f64] {
        &self.denominators
    }

    pub fn calibration_column(&self, k: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.e_cal[i * self.cols + k]).collect()
    }
}

/// Divides every score by its column's augmented mean.
pub fn normalize_to_evalues(calib: &ScoreMatrix, test: &TestScoreProfile) -> Result<EValueBlock> {
    test.check_against(calib)?;
    let n = calib.rows();
    let denominators: Vec<f64> = calib
        .column_sums()
        .iter()
        .zip(test.scores())
        .map(|(s, t)| (s + t) / (n + 1) as f64)
        .collect();
    let e_cal = calib
        .as_slice()
        .chunks_exact(calib.cols())
        .flat_map(|row| row.iter().zip(&denominators).map(|(s, d)| s / d))
        .collect();
    let e_test = test.scores().iter().zip(&denominators).map(|(s, d)| s / d).collect();
    Ok(EValueBlock {
        rows: n,
        cols: calib.cols(),
        e_cal,
        e_test,
        denominators,
    })
}

/// Aggregated calibration scores and the aggregated test score.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatedScores {
    pub f_cal: Vec<f64>,
    pub f_test: f64,
}

pub fn apply_aggregator(block: &EValueBlock, spec: &AggregatorSpec) -> AggregatedScores {
    let f_cal = block.e_cal.chunks_exact(block.cols).map(|row| spec.aggregate(row)).collect();
    AggregatedScores {
        f_cal,
        f_test: spec.aggregate(&block.e_test),
    }
}

/// Threshold and comparison side of a membership decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MembershipRule {
    /// Quantile rank overflowed; every candidate is accepted.
    AcceptAll,
    /// Accept when the aggregated test score is `<=` the threshold.
    AtMost(f64),
    /// Accept when the aggregated test score is `>=` the threshold.
    AtLeast(f64),
}

impl MembershipRule {
    #[inline]
    pub fn accepts(&self, f_test: f64) -> bool {
        match *self {
            MembershipRule::AcceptAll => true,
            MembershipRule::AtMost(q) => f_test <= q,
            MembershipRule::AtLeast(q) => f_test >= q,
        }
    }
}

pub fn membership_threshold(f_cal: &[f64], spec: &AggregatorSpec, alpha: Alpha) -> MembershipRule {
    rule_for_direction(f_cal, spec.direction(), alpha)
}

/// Upper-quantile rule for `Increasing`, lower-quantile rule for `Decreasing`.
pub fn rule_for_direction(f_cal: &[f64], direction: Direction, alpha: Alpha) -> MembershipRule {
    let n = f_cal.len();
    // Ranks are within 1..=n by construction, so order_statistic cannot fail.
    match direction {
        Direction::Increasing => match upper_quantile_index(n, alpha) {
            UpperIndex::Rank(k) => MembershipRule::AtMost(order_statistic(f_cal, k).unwrap()),
            UpperIndex::Infinite => MembershipRule::AcceptAll,
        },
        Direction::Decreasing => match lower_quantile_index(n, alpha) {
            LowerIndex::Rank(l) => MembershipRule::AtLeast(order_statistic(f_cal, l).unwrap()),
            LowerIndex::NegInfinite => MembershipRule::AcceptAll,
        },
    }
}

/// Full reference pipeline for one candidate: normalize, aggregate, compare.
pub fn candidate_accepted(
    calib: &ScoreMatrix,
    test: &TestScoreProfile,
    spec: &AggregatorSpec,
    alpha: Alpha,
) -> Result<bool> {
    let block = normalize_to_evalues(calib, test)?;
    let agg = apply_aggregator(&block, spec);
    Ok(membership_threshold(&agg.f_cal, spec, alpha).accepts(agg.f_test))
}
