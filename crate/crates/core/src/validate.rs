//! Monte-Carlo checks of the coverage and efficiency theory. Each check
//! returns a JSON-serializable [`Report`]; all of them are deterministic
//! given the seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::aggregate::{apply_aggregator, normalize_to_evalues, rule_for_direction, AggregatorKind, AggregatorSpec, Direction};
use crate::error::{Error, Result};
use crate::primitives::{upper_conformal_quantile, Alpha, ScoreMatrix, TestScoreProfile};
use crate::sacp::{sacp_regress, TargetGrid};
use crate::scores::{regression_scores, RegressionPredictions};

/// Significance level of the rank-uniformity test.
pub const UNIFORMITY_SIGNIFICANCE: f64 = 0.001;
/// Relative slack when comparing two sides of an inequality computed with
/// different summation orders.
pub const COMPARISON_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub check: String,
    pub params: Value,
    pub trials: usize,
    pub violations: usize,
    pub statistic: f64,
    pub pass: bool,
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn exp_matrix(rng: &mut ChaCha8Rng, n: usize, k: usize) -> ScoreMatrix {
    ScoreMatrix::new(n, k, (0..n * k).map(|_| rng.sample::<f64, _>(Exp1)).collect()).unwrap()
}

/// Rank of the test aggregate among all `n + 1` aggregated scores under
/// SACP-Sum, tested for uniformity with a chi-square statistic. `test_scale`
/// multiplies the test scores; any value other than 1 breaks exchangeability.
pub fn check_rank_uniformity(n: usize, k: usize, trials: usize, test_scale: f64, seed: u64) -> Result<Report> {
    if n < 10 || trials < 1000 || k < 1 {
        return Err(Error::config(format!(
            "rank uniformity needs n >= 10, trials >= 1000, K >= 1 (got n={n}, trials={trials}, K={k})"
        )));
    }
    let ranks: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let calib = exp_matrix(&mut rng, n, k);
            let test = TestScoreProfile::new((0..k).map(|_| test_scale * rng.sample::<f64, _>(Exp1)).collect())?;
            let f = apply_aggregator(&normalize_to_evalues(&calib, &test)?, &AggregatorSpec::SUM);
            Ok(1 + f.f_cal.iter().filter(|&&v| v < f.f_test).count())
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![0usize; n + 1];
    for r in ranks {
        counts[r - 1] += 1;
    }
    let expected = trials as f64 / (n + 1) as f64;
    let statistic: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p_value = ChiSquared::new(n as f64).map_err(|e| Error::config(e.to_string()))?.sf(statistic);
    let pass = p_value >= UNIFORMITY_SIGNIFICANCE;
    Ok(Report {
        check: "uniformity".into(),
        params: json!({"n": n, "k": k, "test_scale": test_scale, "seed": seed, "p_value": p_value}),
        trials,
        violations: usize::from(!pass),
        statistic,
        pass,
    })
}

fn require_theory_alpha(n: usize, k: usize, alpha: f64) -> Result<Alpha> {
    let a = Alpha::new(alpha)?;
    let lower = k as f64 / (n + 1) as f64;
    if alpha < lower {
        return Err(Error::config(format!("alpha = {alpha} is below K/(n+1) = {lower}")));
    }
    Ok(a)
}

/// `Q(rowsums, alpha) <= sum_k Q(col_k, alpha / K)` on random matrices.
pub fn check_quantile_lemma(trials: usize, n: usize, k: usize, alpha: f64, seed: u64) -> Result<Report> {
    if trials == 0 || n == 0 || k == 0 {
        return Err(Error::config("quantile lemma needs trials, n and K >= 1"));
    }
    let a = require_theory_alpha(n, k, alpha)?;
    let margins: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            // Columns on different scales, some heavy-tailed.
            let cols: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let scale = rng.random_range(0.1..10.0);
                    let heavy = rng.random_bool(0.3);
                    (0..n)
                        .map(|_| {
                            let z: f64 = rng.sample(StandardNormal);
                            scale * if heavy { z.exp() } else { z.abs() }
                        })
                        .collect()
                })
                .collect();
            let rowsums: Vec<f64> = (0..n).map(|i| cols.iter().map(|c| c[i]).sum()).collect();
            let lhs = upper_conformal_quantile(&rowsums, a)?;
            let rhs: f64 = cols
                .iter()
                .map(|c| upper_conformal_quantile(c, a.divided(k)))
                .sum::<Result<f64>>()?;
            Ok(rhs * (1.0 + COMPARISON_TOLERANCE) - lhs)
        })
        .collect::<Result<_>>()?;
    let violations = margins.iter().filter(|m| **m < 0.0).count();
    Ok(Report {
        check: "lemma".into(),
        params: json!({"n": n, "k": k, "alpha": alpha, "seed": seed}),
        trials,
        violations,
        statistic: margins.iter().copied().fold(f64::INFINITY, f64::min),
        pass: violations == 0,
    })
}

/// Settings of the worst-case length check.
#[derive(Debug, Clone, Copy)]
pub struct BoundParams {
    pub trials: usize,
    pub n: usize,
    pub k: usize,
    pub alpha: f64,
    pub grid_size: usize,
    pub spec: AggregatorSpec,
    /// Give every model the same coefficients (zero disagreement).
    pub identical_models: bool,
    pub seed: u64,
}

impl BoundParams {
    pub fn new(trials: usize, n: usize, k: usize, alpha: f64, seed: u64) -> Self {
        BoundParams {
            trials,
            n,
            k,
            alpha,
            grid_size: 255,
            spec: AggregatorSpec::SUM,
            identical_models: false,
            seed,
        }
    }
}

/// Length of the regression set against model disagreement plus the widest
/// per-model interval at level `alpha / K`, with two grid steps of slack.
/// `statistic` is the smallest margin observed.
pub fn check_worst_case_bound(p: BoundParams) -> Result<Report> {
    if p.k < 2 {
        return Err(Error::config("the worst-case bound needs K > 1"));
    }
    if p.trials == 0 || p.n == 0 {
        return Err(Error::config("worst-case bound needs trials >= 1 and n >= 1"));
    }
    match p.spec.kind() {
        AggregatorKind::Sum => {}
        AggregatorKind::Power(e) if e > 0.0 => {}
        _ => return Err(Error::config("the worst-case bound covers the sum and positive powers only")),
    }
    let a = require_theory_alpha(p.n, p.k, p.alpha)?;
    let d = 3;
    let margins: Vec<f64> = (0..p.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(p.seed, t);
            let beta: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let noise = rng.random_range(0.2..2.0);
            // Each model is the true coefficient vector with its own perturbation.
            let shared: Vec<f64> = (0..d).map(|j| beta[j] + 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
            let coefs: Vec<Vec<f64>> = (0..p.k)
                .map(|_| {
                    if p.identical_models {
                        shared.clone()
                    } else {
                        let spread = rng.random_range(0.05..1.0);
                        (0..d).map(|j| beta[j] + spread * rng.sample::<f64, _>(StandardNormal)).collect()
                    }
                })
                .collect();
            let draw = |rng: &mut ChaCha8Rng| {
                let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                let y = x.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() + noise * rng.sample::<f64, _>(StandardNormal);
                let preds = coefs.iter().map(|c| c.iter().zip(&x).map(|(a, b)| a * b).sum()).collect();
                (RegressionPredictions::new(preds).unwrap(), y)
            };
            let (cal_preds, cal_y): (Vec<_>, Vec<_>) = (0..p.n).map(|_| draw(&mut rng)).unzip();
            let (test_preds, _) = draw(&mut rng);
            let calib = regression_scores(&cal_preds, &cal_y)?;
            let max_q = (0..p.k)
                .map(|k| upper_conformal_quantile(&calib.column(k), a.divided(p.k)))
                .collect::<Result<Vec<_>>>()?
                .into_iter()
                .fold(0.0f64, f64::max);
            let (y0, y1) = test_preds.range();
            // The grid covers the calibration targets and the region the set can reach.
            let lo = cal_y.iter().copied().fold(y0 - 2.0 * max_q - 1.0, f64::min);
            let hi = cal_y.iter().copied().fold(y1 + 2.0 * max_q + 1.0, f64::max);
            let grid = TargetGrid::new(lo, hi, p.grid_size)?;
            let set = sacp_regress(&calib, &test_preds, &grid, &p.spec, a)?;
            let bound = test_preds.disagreement() + 2.0 * max_q + 2.0 * grid.step();
            Ok(bound - set.length)
        })
        .collect::<Result<_>>()?;
    let violations = margins.iter().filter(|m| **m < 0.0).count();
    Ok(Report {
        check: "bound".into(),
        params: json!({
            "n": p.n, "k": p.k, "alpha": p.alpha, "grid_size": p.grid_size,
            "aggregator": p.spec.to_string(), "identical_models": p.identical_models, "seed": p.seed
        }),
        trials: p.trials,
        violations,
        statistic: margins.iter().copied().fold(f64::INFINITY, f64::min),
        pass: violations == 0,
    })
}

fn flip(direction: Direction) -> Direction {
    match direction {
        Direction::Increasing => Direction::Decreasing,
        Direction::Decreasing => Direction::Increasing,
    }
}

/// Membership decisions on random e-value blocks are unchanged by an
/// increasing transform (log) and by negation with the opposite rule.
pub fn check_rho_invariance(trials: usize, seed: u64) -> Result<Report> {
    if trials == 0 {
        return Err(Error::config("rho invariance needs trials >= 1"));
    }
    let specs = [
        AggregatorSpec::SUM,
        AggregatorSpec::power(2.0)?,
        AggregatorSpec::power(-1.0)?,
        AggregatorSpec::power(0.5)?,
        AggregatorSpec::MIN,
        AggregatorSpec::MAX,
    ];
    let mismatches: Vec<usize> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(seed, t);
            let n = rng.random_range(5..60);
            let k = rng.random_range(1..6);
            let alpha = Alpha::new(rng.random_range(0.02..0.5))?;
            let calib = exp_matrix(&mut rng, n, k);
            let test = TestScoreProfile::new((0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect())?;
            let block = normalize_to_evalues(&calib, &test)?;
            let mut bad = 0;
            for spec in &specs {
                let f = apply_aggregator(&block, spec);
                let dir = spec.direction();
                let base = rule_for_direction(&f.f_cal, dir, alpha).accepts(f.f_test);
                let logged: Vec<f64> = f.f_cal.iter().map(|v| v.ln()).collect();
                let log_rule = rule_for_direction(&logged, dir, alpha).accepts(f.f_test.ln());
                let negated: Vec<f64> = f.f_cal.iter().map(|v| -v).collect();
                let neg_rule = rule_for_direction(&negated, flip(dir), alpha).accepts(-f.f_test);
                bad += usize::from(base != log_rule) + usize::from(base != neg_rule);
            }
            Ok(bad)
        })
        .collect::<Result<_>>()?;
    let violations: usize = mismatches.iter().sum();
    let comparisons = trials * specs.len() * 2;
    Ok(Report {
        check: "rho".into(),
        params: json!({"seed": seed, "aggregators": specs.iter().map(|s| s.to_string()).collect::<Vec<_>>()}),
        trials,
        violations,
        statistic: 1.0 - violations as f64 / comparisons as f64,
        pass: violations == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniformity_passes_and_shift_fails() {
        assert!(check_rank_uniformity(20, 3, 20000, 1.0, 7).unwrap().pass);
        assert!(check_rank_uniformity(20, 1, 20000, 1.0, 8).unwrap().pass);
        assert!(!check_rank_uniformity(20, 3, 20000, 1.5, 7).unwrap().pass);
        assert!(check_rank_uniformity(5, 3, 20000, 1.0, 7).is_err());
    }

    #[test]
    fn lemma_holds() {
        let r = check_quantile_lemma(1000, 50, 4, 0.2, 3).unwrap();
        assert_eq!(r.violations, 0);
        assert!(check_quantile_lemma(200, 50, 1, 0.1, 3).unwrap().pass);
        let err = check_quantile_lemma(10, 50, 4, 4.0 / 51.0 - 1e-3, 3).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn bound_holds() {
        let r = check_worst_case_bound(BoundParams::new(50, 200, 3, 0.1, 5)).unwrap();
        assert!(r.pass, "{r:?}");
        let same = BoundParams { identical_models: true, ..BoundParams::new(30, 200, 3, 0.1, 6) };
        assert!(check_worst_case_bound(same).unwrap().pass);
        let pow = BoundParams { spec: AggregatorSpec::power(4.0).unwrap(), ..BoundParams::new(30, 200, 3, 0.1, 6) };
        assert!(check_worst_case_bound(pow).unwrap().pass);
        let neg = BoundParams { spec: AggregatorSpec::power(-1.0).unwrap(), ..BoundParams::new(3, 200, 3, 0.1, 6) };
        assert!(check_worst_case_bound(neg).is_err());
        assert!(check_worst_case_bound(BoundParams::new(3, 20, 3, 0.1, 6)).is_err());
    }

    #[test]
    fn rho_invariance_holds() {
        let r = check_rho_invariance(300, 1).unwrap();
        assert_eq!(r.violations, 0);
        assert_eq!(r.statistic, 1.0);
    }

    #[test]
    fn reports_are_deterministic_and_serialize() {
        let a = check_quantile_lemma(50, 30, 2, 0.1, 9).unwrap();
        assert_eq!(a, check_quantile_lemma(50, 30, 2, 0.1, 9).unwrap());
        let v = serde_json::to_value(&a).unwrap();
        for key in ["check", "params", "trials", "violations", "statistic", "pass"] {
            assert!(v.get(key).is_some());
        }
    }
}
