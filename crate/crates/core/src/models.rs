//! Small built-in base learners and the train-only standardizer.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ridge used when the regularized Gram matrix is not positive definite.
pub const FALLBACK_RIDGE: f64 = 1e-6;
const GRAM_JITTER: f64 = 1e-8;

/// Targets, by task.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Regression(Vec<f64>),
    Classification { labels: Vec<usize>, n_classes: usize },
}

impl Target {
    pub fn len(&self) -> usize {
        match self {
            Target::Regression(y) => y.len(),
            Target::Classification { labels, .. } => labels.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, rows: &[usize]) -> Target {
        match self {
            Target::Regression(y) => Target::Regression(rows.iter().map(|&i| y[i]).collect()),
            Target::Classification { labels, n_classes } => Target::Classification {
                labels: rows.iter().map(|&i| labels[i]).collect(),
                n_classes: *n_classes,
            },
        }
    }
}

/// Feature matrix plus targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: DMatrix<f64>,
    pub y: Target,
}

impl Dataset {
    pub fn new(x: DMatrix<f64>, y: Target) -> Result<Self> {
        if x.nrows() != y.len() {
            return Err(Error::contract(format!("{} feature rows but {} targets", x.nrows(), y.len())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite feature value"));
        }
        match &y {
            Target::Regression(v) if v.iter().any(|t| !t.is_finite()) => {
                return Err(Error::contract("non-finite target value"));
            }
            Target::Classification { labels, n_classes } if labels.iter().any(|c| c >= n_classes) => {
                return Err(Error::contract("class label outside the class range"));
            }
            _ => {}
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: self.y.select(rows),
        }
    }
}

/// Per-column affine standardization fitted on training rows only.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub feature_means: Vec<f64>,
    pub feature_stds: Vec<f64>,
    /// `(mean, std)` of the regression target; `None` for classification.
    pub target: Option<(f64, f64)>,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 0.0 { std } else { 1.0 })
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Self {
        let (feature_means, feature_stds) = train.x.column_iter().map(|c| mean_std(c.iter().copied())).unzip();
        let target = match &train.y {
            Target::Regression(y) => Some(mean_std(y.iter().copied())),
            Target::Classification { .. } => None,
        };
        Standardizer {
            feature_means,
            feature_stds,
            target,
        }
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if data.n_features() != self.feature_means.len() {
            return Err(Error::contract("feature dimension differs from the fitted standardizer"));
        }
        let mut x = data.x.clone();
        for (j, mut col) in x.column_iter_mut().enumerate() {
            col.iter_mut()
                .for_each(|v| *v = (*v - self.feature_means[j]) / self.feature_stds[j]);
        }
        let y = match (&data.y, self.target) {
            (Target::Regression(y), Some((m, s))) => Target::Regression(y.iter().map(|v| (v - m) / s).collect()),
            (other, _) => other.clone(),
        };
        Ok(Dataset { x, y })
    }

    pub fn destandardize_target(&self, v: f64) -> f64 {
        match self.target {
            Some((m, s)) => v * s + m,
            None => v,
        }
    }

    /// Converts a standardized length (or width) back to target units.
    pub fn target_scale(&self) -> f64 {
        self.target.map_or(1.0, |(_, s)| s)
    }
}

/// Learner kinds and their hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    Ols,
    Ridge { lambda: f64 },
    Knn { k: usize },
    RandomFeatureRidge { width: usize, lambda: f64, seed: u64 },
    LogisticGd { lr: f64, iters: usize },
    KnnClassifier { k: usize },
}

impl ModelKind {
    pub fn is_classifier(&self) -> bool {
        matches!(self, ModelKind::LogisticGd { .. } | ModelKind::KnnClassifier { .. })
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            ModelKind::Ols => true,
            ModelKind::Ridge { lambda } => lambda >= 0.0 && lambda.is_finite(),
            ModelKind::Knn { k } | ModelKind::KnnClassifier { k } => k >= 1,
            ModelKind::RandomFeatureRidge { width, lambda, .. } => width >= 1 && lambda >= 0.0 && lambda.is_finite(),
            ModelKind::LogisticGd { lr, iters } => lr > 0.0 && lr.is_finite() && iters >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid hyperparameters for {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    /// Coefficients with the intercept first.
    Linear(DVector<f64>),
    Knn { x: DMatrix<f64>, y: Vec<f64>, k: usize },
    RandomFeatures { w: DMatrix<f64>, b: DVector<f64>, coef: DVector<f64> },
    /// `(d + 1) x C` weights, intercept row first.
    Softmax(DMatrix<f64>),
    KnnClassifier { x: DMatrix<f64>, labels: Vec<usize>, k: usize, n_classes: usize },
}

/// Outputs of one model over a batch of inputs.
#[derive(Debug, Clone, PartialEq)]
pub enum Predictions {
    Regression(Vec<f64>),
    /// One probability row per input.
    Classification(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FittedModel {
    pub kind: ModelKind,
    n_features: usize,
    params: Params,
    /// Set when the ridge fallback was needed to solve the normal equations.
    pub ill_conditioned: bool,
}

fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Ridge solution with an unpenalized intercept (column 0).
fn ridge_solve(design: &DMatrix<f64>, y: &DVector<f64>, lambda: f64) -> (DVector<f64>, bool) {
    let gram = design.transpose() * design;
    let rhs = design.transpose() * y;
    let attempt = |lambda: f64| {
        let mut g = gram.clone();
        for j in 0..g.nrows() {
            g[(j, j)] += GRAM_JITTER + if j == 0 { 0.0 } else { lambda };
        }
        g.cholesky().map(|c| c.solve(&rhs))
    };
    match attempt(lambda) {
        Some(c) if c.iter().all(|v| v.is_finite()) => (c, false),
        _ => {
            log::warn!("normal equations not positive definite; retrying with ridge {FALLBACK_RIDGE}");
            let c = attempt(lambda.max(FALLBACK_RIDGE))
                .unwrap_or_else(|| DVector::zeros(gram.nrows()));
            (c, true)
        }
    }
}

fn regression_targets(train: &Dataset) -> Result<&[f64]> {
    match &train.y {
        Target::Regression(y) => Ok(y),
        _ => Err(Error::config("regression model fitted on class labels")),
    }
}

fn class_targets(train: &Dataset) -> Result<(&[usize], usize)> {
    match &train.y {
        Target::Classification { labels, n_classes } => Ok((labels, *n_classes)),
        _ => Err(Error::config("classifier fitted on real-valued targets")),
    }
}

fn random_features(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &DVector<f64>) -> DMatrix<f64> {
    let scale = (2.0 / w.ncols() as f64).sqrt();
    let mut z = x * w;
    for (j, mut col) in z.column_iter_mut().enumerate() {
        col.iter_mut().for_each(|v| *v = scale * (*v + b[j]).cos());
    }
    z
}

fn softmax_rows(logits: &mut DMatrix<f64>) {
    for mut row in logits.row_iter_mut() {
        let max = row.max();
        row.iter_mut().for_each(|v| *v = (*v - max).exp());
        let total = row.sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
}

/// Neighbour indices of `query` sorted by (distance, index).
fn nearest(x: &DMatrix<f64>, query: &[f64], k: usize) -> Vec<usize> {
    let mut d: Vec<(f64, usize)> = (0..x.nrows())
        .map(|i| {
            let dist = x.row(i).iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            (dist, i)
        })
        .collect();
    let k = k.min(d.len());
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < d.len() {
        d.select_nth_unstable_by(k - 1, cmp);
        d.truncate(k);
    }
    d.sort_by(cmp);
    d.into_iter().map(|(_, i)| i).collect()
}

impl FittedModel {
    /// Deterministic given `(kind, train, seed)`.
    pub fn fit(kind: ModelKind, train: &Dataset, seed: u64) -> Result<Self> {
        kind.validate()?;
        if train.is_empty() {
            return Err(Error::config("empty training set"));
        }
        let mut ill_conditioned = false;
        let params = match kind {
            ModelKind::Ols | ModelKind::Ridge { .. } => {
                let lambda = if let ModelKind::Ridge { lambda } = kind { lambda } else { 0.0 };
                let y = DVector::from_column_slice(regression_targets(train)?);
                let (coef, flag) = ridge_solve(&with_intercept(&train.x), &y, lambda);
                ill_conditioned = flag;
                Params::Linear(coef)
            }
            ModelKind::Knn { k } => Params::Knn {
                x: train.x.clone(),
                y: regression_targets(train)?.to_vec(),
                k,
            },
            ModelKind::RandomFeatureRidge { width, lambda, seed: own } => {
                let y = DVector::from_column_slice(regression_targets(train)?);
                let mut rng = ChaCha8Rng::seed_from_u64(own ^ seed.rotate_left(17));
                let d = train.n_features();
                let w = DMatrix::from_fn(d, width, |_, _| rng.sample::<f64, _>(StandardNormal));
                let b = DVector::from_fn(width, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
                let z = random_features(&train.x, &w, &b);
                let (coef, flag) = ridge_solve(&with_intercept(&z), &y, lambda);
                ill_conditioned = flag;
                Params::RandomFeatures { w, b, coef }
            }
            ModelKind::LogisticGd { lr, iters } => {
                let (labels, n_classes) = class_targets(train)?;
                let design = with_intercept(&train.x);
                let n = design.nrows() as f64;
                let mut onehot = DMatrix::zeros(design.nrows(), n_classes);
                for (i, &c) in labels.iter().enumerate() {
                    onehot[(i, c)] = 1.0;
                }
                let xt = design.transpose();
                let mut weights = DMatrix::zeros(design.ncols(), n_classes);
                for _ in 0..iters {
                    let mut probs = &design * &weights;
                    softmax_rows(&mut probs);
                    let grad = &xt * (probs - &onehot) / n;
                    weights -= grad * lr;
                }
                Params::Softmax(weights)
            }
            ModelKind::KnnClassifier { k } => {
                let (labels, n_classes) = class_targets(train)?;
                Params::KnnClassifier {
                    x: train.x.clone(),
                    labels: labels.to_vec(),
                    k,
                    n_classes,
                }
            }
        };
        Ok(FittedModel {
            kind,
            n_features: train.n_features(),
            params,
            ill_conditioned,
        })
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<Predictions> {
        if x.ncols() != self.n_features {
            return Err(Error::contract(format!(
                "model fitted on {} features, got {}",
                self.n_features,
                x.ncols()
            )));
        }
        let rows = || (0..x.nrows()).map(|i| x.row(i).iter().copied().collect::<Vec<f64>>());
        Ok(match &self.params {
            Params::Linear(coef) => Predictions::Regression((with_intercept(x) * coef).iter().copied().collect()),
            Params::RandomFeatures { w, b, coef } => {
                let z = random_features(x, w, b);
                Predictions::Regression((with_intercept(&z) * coef).iter().copied().collect())
            }
            Params::Knn { x: train, y, k } => Predictions::Regression(
                rows()
                    .map(|q| {
                        let nb = nearest(train, &q, *k);
                        nb.iter().map(|&i| y[i]).sum::<f64>() / nb.len() as f64
                    })
                    .collect(),
            ),
            Params::Softmax(weights) => {
                let mut probs = with_intercept(x) * weights;
                softmax_rows(&mut probs);
                Predictions::Classification(probs.row_iter().map(|r| r.iter().copied().collect()).collect())
            }
            Params::KnnClassifier { x: train, labels, k, n_classes } => Predictions::Classification(
                rows()
                    .map(|q| {
                        let nb = nearest(train, &q, *k);
                        let mut p = vec![0.0; *n_classes];
                        for &i in &nb {
                            p[labels[i]] += 1.0;
                        }
                        p.iter_mut().for_each(|v| *v /= nb.len() as f64);
                        p
                    })
                    .collect(),
            ),
        })
    }
}
