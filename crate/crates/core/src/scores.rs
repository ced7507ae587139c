//! Nonconformity scores and assembly of calibration/test score containers.
//!
//! Regression uses the absolute residual, classification uses one minus the
//! predicted probability of the label. Class labels are 0-based throughout.

use crate::error::{Error, Result};
use crate::primitives::{ScoreMatrix, TestScoreProfile};

/// Row-sum tolerance for probability vectors.
pub const PROB_TOLERANCE: f64 = 1e-6;

/// Point predictions of the `K` models at one input.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressionPredictions(Vec<f64>);

impl RegressionPredictions {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("no model predictions"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::contract(format!("prediction {v} is not finite")));
        }
        Ok(RegressionPredictions(values))
    }

    #[inline]
    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Spread between the largest and smallest prediction.
    pub fn disagreement(&self) -> f64 {
        let (lo, hi) = self.range();
        hi - lo
    }

    /// `(min, max)` over the model predictions.
    pub fn range(&self) -> (f64, f64) {
        self.0
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }
}

/// Class probability vectors of the `K` models at one input (`K x C`).
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    n_classes: usize,
    rows: Vec<Vec<f64>>,
}

impl ClassProbabilities {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_classes = rows.first().map(Vec::len).unwrap_or(0);
        if rows.is_empty() || n_classes == 0 {
            return Err(Error::contract("empty probability matrix"));
        }
        for (k, row) in rows.iter().enumerate() {
            if row.len() != n_classes {
                return Err(Error::contract(format!(
                    "model {k} reports {} classes, expected {n_classes}",
                    row.len()
                )));
            }
            if row.iter().any(|p| !(0.0..=1.0 + PROB_TOLERANCE).contains(p)) {
                return Err(Error::contract(format!("model {k} has a probability outside [0, 1]")));
            }
            let total: f64 = row.iter().sum();
            if (total - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::contract(format!(
                    "model {k} probabilities sum to {total}, not 1"
                )));
            }
        }
        Ok(ClassProbabilities { n_classes, rows })
    }

    pub fn n_models(&self) -> usize {
        self.rows.len()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn model(&self, k: usize) -> &[f64] {
        &self.rows[k]
    }
}

/// `|label - prediction|`.
#[inline]
pub fn abs_residual(prediction: f64, label: f64) -> f64 {
    (label - prediction).abs()
}

/// `1 - probs[label]`, clamped to `[0, 1]`.
pub fn one_minus_prob(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or_else(|| {
        Error::contract(format!("class {label} outside 0..{}", probs.len()))
    })?;
    Ok((1.0 - p).clamp(0.0, 1.0))
}

/// Model outputs over a set of points, by task.
#[derive(Debug, Clone)]
pub enum ModelOutputs {
    Regression(Vec<RegressionPredictions>),
    Classification(Vec<ClassProbabilities>),
}

/// Ground-truth labels, by task.
#[derive(Debug, Clone)]
pub enum Labels {
    Regression(Vec<f64>),
    Classification(Vec<usize>),
}

/// Calibration matrix with entry `(i, k)` = score of model `k` at point `i`.
pub fn build_calibration_scores(outputs: &ModelOutputs, labels: &Labels) -> Result<ScoreMatrix> {
    match (outputs, labels) {
        (ModelOutputs::Regression(p), Labels::Regression(y)) => regression_scores(p, y),
        (ModelOutputs::Classification(p), Labels::Classification(y)) => {
            classification_scores(p, y)
        }
        _ => Err(Error::contract("model outputs and labels belong to different tasks")),
    }
}

pub fn regression_scores(preds: &[RegressionPredictions], labels: &[f64]) -> Result<ScoreMatrix> {
    let k = check_lengths(preds.len(), labels.len(), preds.iter().map(|p| p.len()))?;
    let mut data = Vec::with_capacity(preds.len() * k);
    for (p, &y) in preds.iter().zip(labels) {
        data.extend(p.values().iter().map(|&mu| abs_residual(mu, y)));
    }
    ScoreMatrix::new(preds.len(), k, data)
}

pub fn classification_scores(probs: &[ClassProbabilities], labels: &[usize]) -> Result<ScoreMatrix> {
    let k = check_lengths(probs.len(), labels.len(), probs.iter().map(|p| p.n_models()))?;
    let mut data = Vec::with_capacity(probs.len() * k);
    for (p, &y) in probs.iter().zip(labels) {
        for m in 0..k {
            data.push(one_minus_prob(p.model(m), y)?);
        }
    }
    ScoreMatrix::new(probs.len(), k, data)
}

fn check_lengths(
    n_points: usize,
    n_labels: usize,
    mut models: impl Iterator<Item = usize>,
) -> Result<usize> {
    if n_points != n_labels {
        return Err(Error::contract(format!(
            "{n_points} model outputs but {n_labels} labels"
        )));
    }
    let k = models.next().ok_or_else(|| Error::contract("no calibration points"))?;
    if models.any(|m| m != k) {
        return Err(Error::contract("points report different numbers of models"));
    }
    Ok(k)
}

/// Test profile of a regression candidate `y`.
pub fn regression_profile(preds: &RegressionPredictions, y: f64) -> Result<TestScoreProfile> {
    TestScoreProfile::new(preds.values().iter().map(|&mu| abs_residual(mu, y)).collect())
}

/// One test profile per class.
pub fn classification_profiles(probs: &ClassProbabilities) -> Result<Vec<TestScoreProfile>> {
    (0..probs.n_classes())
        .map(|c| {
            let scores = (0..probs.n_models())
                .map(|k| one_minus_prob(probs.model(k), c))
                .collect::<Result<Vec<_>>>()?;
            TestScoreProfile::new(scores)
        })
        .collect()
}
