//! Reference aggregators: per-model split CP, best-model selection, set-level
//! majority votes, weighted score aggregation and projection envelopes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::primitives::{
    order_statistic, upper_conformal_quantile, upper_quantile_index, Alpha, ScoreMatrix,
    TestScoreProfile, UpperIndex, SCORE_FLOOR,
};
use crate::scores::{one_minus_prob, ClassProbabilities};

/// Simplex tolerance for weight vectors.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

/// Split-CP decision for one model: `test_score <= Q_hat` (accept-all on overflow).
pub fn split_cp_single(calib_col: &[f64], test_score: f64, alpha: Alpha) -> bool {
    test_score <= split_cp_quantile(calib_col, alpha)
}

/// `Q_hat` of a score column, `+inf` when the rank overflows.
pub fn split_cp_quantile(calib_col: &[f64], alpha: Alpha) -> f64 {
    match upper_quantile_index(calib_col.len(), alpha) {
        UpperIndex::Rank(k) => order_statistic(calib_col, k).unwrap_or(f64::INFINITY),
        UpperIndex::Infinite => f64::INFINITY,
    }
}

/// Per-model `Q_hat` for every column.
pub fn column_quantiles(calib: &ScoreMatrix, alpha: Alpha) -> Vec<f64> {
    (0..calib.cols())
        .map(|k| split_cp_quantile(&calib.column(k), alpha))
        .collect()
}

/// What the best-model selector measures.
#[derive(Debug, Clone, Copy)]
pub enum BlTask<'a> {
    /// Interval length proxy `2 * Q_hat^k`.
    Regression,
    /// Average class-set size over the calibration points.
    Classification { calibration_probs: &'a [ClassProbabilities] },
}

/// Index of the model with the shortest calibration sets; ties go to the smallest index.
pub fn bl_select(calib: &ScoreMatrix, alpha: Alpha, task: BlTask<'_>) -> Result<usize> {
    let quantiles = column_quantiles(calib, alpha);
    let cost: Vec<f64> = match task {
        BlTask::Regression => quantiles.iter().map(|q| 2.0 * q).collect(),
        BlTask::Classification { calibration_probs } => {
            if calibration_probs.len() != calib.rows() {
                return Err(Error::contract(format!(
                    "{} probability rows for {} calibration points",
                    calibration_probs.len(),
                    calib.rows()
                )));
            }
            let mut cost = vec![0.0; calib.cols()];
            for (k, (c, q)) in cost.iter_mut().zip(&quantiles).enumerate() {
                let mut total = 0usize;
                for probs in calibration_probs {
                    let model = probs.model(k);
                    for class in 0..probs.n_classes() {
                        if one_minus_prob(model, class)?.max(SCORE_FLOOR) <= *q {
                            total += 1;
                        }
                    }
                }
                *c = total as f64 / calib.rows() as f64;
            }
            cost
        }
    };
    Ok(argmin_first(&cost))
}

fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

fn check_universe(sets: &[Vec<bool>]) -> Result<usize> {
    let first = sets.first().ok_or_else(|| Error::contract("no sets to merge"))?;
    if sets.iter().any(|s| s.len() != first.len()) {
        return Err(Error::contract("sets are over different universes"));
    }
    Ok(first.len())
}

fn votes(sets: &[Vec<bool>], j: usize) -> usize {
    sets.iter().filter(|s| s[j]).count()
}

/// Majority vote: accepted iff strictly more than half of the sets contain it.
pub fn cm_merge(sets: &[Vec<bool>]) -> Result<Vec<bool>> {
    let g = check_universe(sets)?;
    let k = sets.len();
    Ok((0..g).map(|j| 2 * votes(sets, j) > k).collect())
}

/// Randomized majority vote with threshold `(1 + u) / 2`.
pub fn cr_merge(sets: &[Vec<bool>], u: f64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::contract(format!("u = {u} outside [0, 1)")));
    }
    let g = check_universe(sets)?;
    let k = sets.len() as f64;
    Ok((0..g).map(|j| 2.0 * votes(sets, j) as f64 > k * (1.0 + u)).collect())
}

pub fn sets_union(sets: &[Vec<bool>]) -> Result<Vec<bool>> {
    let g = check_universe(sets)?;
    Ok((0..g).map(|j| sets.iter().any(|s| s[j])).collect())
}

pub fn sets_intersection(sets: &[Vec<bool>]) -> Result<Vec<bool>> {
    let g = check_universe(sets)?;
    Ok((0..g).map(|j| sets.iter().all(|s| s[j])).collect())
}

/// Deterministic 50/50 row split: `(half_1, half_2)` indices.
pub fn split_halves(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let second = idx.split_off(n / 2);
    (idx, second)
}

fn need_split(calib: &ScoreMatrix, method: &str) -> Result<()> {
    if calib.rows() < 4 {
        return Err(Error::config(format!(
            "{method} needs at least 4 calibration points, got {}",
            calib.rows()
        )));
    }
    Ok(())
}

/// A point of the probability simplex.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::contract("weights must be finite and nonnegative"));
        }
        let total: f64 = w.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::contract(format!("weights sum to {total}, not 1")));
        }
        Ok(WeightVector(w))
    }

    pub fn vertex(k: usize, dim: usize) -> Self {
        let mut w = vec![0.0; dim];
        w[k] = 1.0;
        WeightVector(w)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    #[inline]
    pub fn combine(&self, scores: &[f64]) -> f64 {
        self.0.iter().zip(scores).map(|(w, s)| w * s).sum()
    }
}

/// Candidate weights: the `K` vertices first, then a shifted Kronecker
/// sequence mapped onto the simplex by uniform spacings.
pub fn simplex_candidates(dim: usize, count: usize, seed: u64) -> Vec<WeightVector> {
    let mut out: Vec<WeightVector> = (0..dim.min(count)).map(|k| WeightVector::vertex(k, dim)).collect();
    if dim == 1 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let steps: Vec<f64> = (0..dim - 1).map(|j| (nth_prime(j) as f64).sqrt().fract()).collect();
    let shift: Vec<f64> = (0..dim - 1).map(|_| rng.random::<f64>()).collect();
    let mut i = 1u64;
    while out.len() < count {
        let mut cuts: Vec<f64> = steps
            .iter()
            .zip(&shift)
            .map(|(a, s)| (s + i as f64 * a).fract())
            .collect();
        cuts.sort_by(f64::total_cmp);
        let mut w = Vec::with_capacity(dim);
        let mut prev = 0.0;
        for c in cuts.iter().chain(std::iter::once(&1.0)) {
            w.push(c - prev);
            prev = *c;
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        out.push(WeightVector(w));
        i += 1;
    }
    out
}

fn nth_prime(j: usize) -> u64 {
    (2u64..).filter(|&p| (2..p).take_while(|d| d * d <= p).all(|d| p % d != 0)).nth(j).unwrap()
}

/// How a weight candidate is scored on the selection half.
#[derive(Debug, Clone, Copy)]
pub enum WaggProxy<'a> {
    /// `2 * Q_hat` of the combined scores.
    Regression,
    /// Average class-set size; one profile per class for every calibration row.
    Classification { class_profiles: &'a [Vec<TestScoreProfile>] },
}

/// Fitted weighted aggregation: accept iff `w . s <= threshold`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaggModel {
    pub weights: WeightVector,
    pub threshold: f64,
}

impl WaggModel {
    pub fn accepts(&self, test: &[f64]) -> bool {
        self.weights.combine(test) <= self.threshold
    }
}

pub fn wagg_fit(
    calib: &ScoreMatrix,
    alpha: Alpha,
    n_weights: usize,
    seed: u64,
    proxy: WaggProxy<'_>,
) -> Result<WaggModel> {
    if n_weights == 0 {
        return Err(Error::config("wagg needs at least one weight vector"));
    }
    let candidates = simplex_candidates(calib.cols(), n_weights, seed ^ 0x005e_ed0f_3a66);
    wagg_fit_with_candidates(calib, alpha, &candidates, seed, proxy)
}

/// [`wagg_fit`] over an explicit candidate list; the first minimizer wins.
pub fn wagg_fit_with_candidates(
    calib: &ScoreMatrix,
    alpha: Alpha,
    candidates: &[WeightVector],
    seed: u64,
    proxy: WaggProxy<'_>,
) -> Result<WaggModel> {
    need_split(calib, "wagg")?;
    if candidates.is_empty() {
        return Err(Error::config("wagg needs at least one weight vector"));
    }
    if let Some(w) = candidates.iter().find(|w| w.values().len() != calib.cols()) {
        return Err(Error::contract(format!(
            "weight vector of length {} for {} models",
            w.values().len(),
            calib.cols()
        )));
    }
    if let WaggProxy::Classification { class_profiles } = proxy {
        if class_profiles.len() != calib.rows() {
            return Err(Error::contract("class profiles must align with calibration rows"));
        }
    }
    let (first, second) = split_halves(calib.rows(), seed);
    let mut best: Option<(f64, usize)> = None;
    for (ci, w) in candidates.iter().enumerate() {
        let combined: Vec<f64> = first.iter().map(|&i| w.combine(calib.row(i))).collect();
        let q = upper_conformal_quantile(&combined, alpha)?;
        let cost = match proxy {
            WaggProxy::Regression => 2.0 * q,
            WaggProxy::Classification { class_profiles } => {
                let accepted: usize = first
                    .iter()
                    .map(|&i| {
                        class_profiles[i]
                            .iter()
                            .filter(|p| w.combine(p.scores()) <= q)
                            .count()
                    })
                    .sum();
                accepted as f64 / first.len() as f64
            }
        };
        if best.is_none_or(|(c, _)| cost < c) {
            best = Some((cost, ci));
        }
    }
    let weights = candidates[best.unwrap().1].clone();
    let combined: Vec<f64> = second.iter().map(|&i| weights.combine(calib.row(i))).collect();
    let threshold = upper_conformal_quantile(&combined, alpha)?;
    Ok(WaggModel { weights, threshold })
}

/// Fitted projection envelope.
#[derive(Debug, Clone, PartialEq)]
pub struct CsaModel {
    pub directions: Vec<Vec<f64>>,
    pub thresholds: Vec<f64>,
    pub beta_star: f64,
    pub t_star: f64,
}

impl CsaModel {
    /// `max_m (u_m . s) / q_m`.
    pub fn statistic(&self, scores: &[f64]) -> f64 {
        self.directions
            .iter()
            .zip(&self.thresholds)
            .map(|(u, q)| dot(u, scores) / q)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn csa_membership(model: &CsaModel, test: &[f64]) -> bool {
    model.statistic(test) <= model.t_star
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Directions drawn as `|N(0, I)|` normalized to unit length.
pub fn sample_directions(dim: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..m)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal).abs()).collect();
            let norm = dot(&v, &v).sqrt();
            if norm > 0.0 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

pub fn csa_fit(
    calib: &ScoreMatrix,
    alpha: Alpha,
    m_directions: usize,
    bisect_iters: usize,
    seed: u64,
) -> Result<CsaModel> {
    if m_directions == 0 {
        return Err(Error::config("csa needs at least one direction"));
    }
    let directions = sample_directions(calib.cols(), m_directions, seed ^ 0xc5a0_d1e7);
    csa_fit_with_directions(calib, alpha, directions, bisect_iters, seed)
}

/// [`csa_fit`] with explicit directions (nonnegative, unit norm).
pub fn csa_fit_with_directions(
    calib: &ScoreMatrix,
    alpha: Alpha,
    directions: Vec<Vec<f64>>,
    bisect_iters: usize,
    seed: u64,
) -> Result<CsaModel> {
    need_split(calib, "csa")?;
    if directions.is_empty() {
        return Err(Error::config("csa needs at least one direction"));
    }
    for u in &directions {
        if u.len() != calib.cols() || u.iter().any(|x| x.is_nan() || *x < 0.0) || (dot(u, u).sqrt() - 1.0).abs() > 1e-9 {
            return Err(Error::contract("csa directions must be nonnegative unit vectors"));
        }
    }
    let (first, second) = split_halves(calib.rows(), seed);
    let n1 = first.len();
    // Projections on half 1, one sorted column per direction.
    let projections: Vec<Vec<f64>> = directions
        .iter()
        .map(|u| {
            let mut p: Vec<f64> = first.iter().map(|&i| dot(u, calib.row(i))).collect();
            p.sort_by(f64::total_cmp);
            p
        })
        .collect();
    let thresholds_at = |beta: f64| -> Vec<f64> {
        let rank = (((1.0 - beta) * n1 as f64).ceil() as usize).clamp(1, n1);
        projections.iter().map(|p| p[rank - 1].max(SCORE_FLOOR)).collect()
    };
    let coverage = |q: &[f64]| -> f64 {
        let inside = first
            .iter()
            .filter(|&&i| directions.iter().zip(q).all(|(u, q)| dot(u, calib.row(i)) <= *q))
            .count();
        inside as f64 / n1 as f64
    };
    let target = 1.0 - alpha.value();
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..bisect_iters {
        let mid = 0.5 * (lo + hi);
        if coverage(&thresholds_at(mid)) >= target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta_star = if lo > 0.0 { lo } else { 0.5 * hi };
    let thresholds = thresholds_at(beta_star);
    let mut model = CsaModel {
        directions,
        thresholds,
        beta_star,
        t_star: f64::INFINITY,
    };
    let stats: Vec<f64> = second.iter().map(|&i| model.statistic(calib.row(i))).collect();
    model.t_star = upper_conformal_quantile(&stats, alpha)?;
    Ok(model)
}
