//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Built with `harness = false` so the lines are
//! always visible.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Exp1, StandardNormal};

use sacp::aggregate::{normalize_to_evalues, AggregatorSpec};
use sacp::baselines::split_cp_quantile;
use sacp::bench::{run_experiment, ExperimentConfig, RunResult};
use sacp::primitives::{Alpha, ScoreMatrix, TestScoreProfile};
use sacp::sacp::{sacp_classify, sacp_membership_exact, sacp_regress, TargetGrid};
use sacp::scores::{classification_profiles, classification_scores, regression_scores, ClassProbabilities, RegressionPredictions};
use sacp::validate::{
    check_quantile_lemma, check_rank_uniformity, check_rho_invariance, check_worst_case_bound, BoundParams,
};

const ALPHAS: [f64; 2] = [0.05, 0.1];
/// Coverage runs: 50 seeds x 500 test points.
const COVERAGE_DRAWS: f64 = 25_000.0;
const RUNTIME_LIMIT: Duration = Duration::from_secs(300);
const MASS_TOLERANCE: f64 = 1e-9;
const SHIFT_SCALE: f64 = 1.5;
const EFFICIENCY_ALPHA: f64 = 0.05;
const EFFICIENCY_WINS_NEEDED: usize = 4;

fn coverage_tolerance(alpha: f64) -> f64 {
    3.0 * (alpha * (1.0 - alpha) / COVERAGE_DRAWS).sqrt()
}

type Outcome = (bool, String);

/// Shared by criteria 1, 2 and 9: 2000 points split 1300/200/500.
fn coverage_harness() -> (RunResult, Duration) {
    let cfg = ExperimentConfig::from_json_str(
        r#"{"name": "linear",
            "data": {"source": "synthetic", "generator": "linear", "n": 2000, "d": 5},
            "split": {"train": 0.65, "calibration": 0.1, "test": 0.25},
            "n_seeds": 50,
            "alphas": [0.05, 0.1],
            "methods": ["sacp", "sacp++", "cm", "wagg", "csa"]}"#,
    )
    .unwrap();
    let start = Instant::now();
    let result = run_experiment(&cfg).unwrap();
    (result, start.elapsed())
}

fn mean_coverage(result: &RunResult, method: &str, alpha: f64) -> f64 {
    result.summary_for(method, alpha).unwrap().coverage.mean
}

fn criterion_coverage(result: &RunResult, elapsed: Duration) -> Outcome {
    let mut ok = elapsed <= RUNTIME_LIMIT;
    let mut detail = format!("runtime {:.1}s;", elapsed.as_secs_f64());
    for alpha in ALPHAS {
        let floor = 1.0 - alpha - coverage_tolerance(alpha);
        for method in ["sacp", "sacp++"] {
            let c = mean_coverage(result, method, alpha);
            ok &= c >= floor;
            detail += &format!(" {method}@{alpha}={c:.4} (>= {floor:.4})");
        }
    }
    (ok, detail)
}

fn criterion_dominance(result: &RunResult) -> Outcome {
    let mut checked = 0;
    let mut bad = 0;
    for alpha in ALPHAS {
        let plain = result.rows_for("sacp", alpha);
        let tuned = result.rows_for("sacp++", alpha);
        for (p, t) in plain.iter().zip(&tuned) {
            assert_eq!(p.seed, t.seed);
            checked += 1;
            bad += usize::from(t.avg_length > p.avg_length);
        }
    }
    (checked == 100 && bad == 0, format!("{bad} of {checked} seed/alpha pairs with sacp++ longer than sacp"))
}

fn criterion_k1_reduction() -> Outcome {
    let mut mismatches = 0;
    let mut decisions = 0;
    for t in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + t);
        let n = rng.random_range(10..300);
        let alpha = Alpha::new(rng.random_range(0.02..0.4)).unwrap();
        let mu: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = mu.iter().map(|m| m + rng.random_range(0.5..2.0) * rng.sample::<f64, _>(StandardNormal)).collect();
        let preds: Vec<RegressionPredictions> = mu.iter().map(|&m| RegressionPredictions::new(vec![m]).unwrap()).collect();
        let calib = regression_scores(&preds, &y).unwrap();
        let raw: Vec<f64> = mu.iter().zip(&y).map(|(m, y)| (y - m).abs()).collect();
        let q = split_cp_quantile(&raw, alpha);
        let test_mu: f64 = rng.sample(StandardNormal);
        let test = RegressionPredictions::new(vec![test_mu]).unwrap();
        let grid = TargetGrid::new(-6.0, 6.0, 255).unwrap();
        let set = sacp_regress(&calib, &test, &grid, &AggregatorSpec::SUM, alpha).unwrap();
        for (j, &inside) in set.mask.iter().enumerate() {
            decisions += 1;
            mismatches += usize::from(inside != ((grid.point(j) - test_mu).abs() <= q));
        }
        for _ in 0..20 {
            let y_true = test_mu + 3.0 * rng.sample::<f64, _>(StandardNormal);
            let exact = sacp_membership_exact(&calib, &test, y_true, &AggregatorSpec::SUM, alpha).unwrap();
            decisions += 1;
            mismatches += usize::from(exact != ((y_true - test_mu).abs() <= q));
        }
    }
    for t in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + t);
        let n = rng.random_range(10..300);
        let classes = rng.random_range(2..8);
        let alpha = Alpha::new(rng.random_range(0.02..0.4)).unwrap();
        let draw = |rng: &mut ChaCha8Rng| {
            let w: Vec<f64> = (0..classes).map(|_| rng.sample::<f64, _>(Exp1)).collect();
            let s: f64 = w.iter().sum();
            ClassProbabilities::new(vec![w.iter().map(|v| v / s).collect()]).unwrap()
        };
        let probs: Vec<ClassProbabilities> = (0..n).map(|_| draw(&mut rng)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let calib = classification_scores(&probs, &labels).unwrap();
        let raw: Vec<f64> = probs.iter().zip(&labels).map(|(p, &c)| 1.0 - p.model(0)[c]).collect();
        let q = split_cp_quantile(&raw, alpha);
        let test = draw(&mut rng);
        let set = sacp_classify(&calib, &classification_profiles(&test).unwrap(), &AggregatorSpec::SUM, alpha).unwrap();
        for c in 0..classes {
            decisions += 1;
            mismatches += usize::from(set.contains(c) != (1.0 - test.model(0)[c] <= q));
        }
    }
    (mismatches == 0, format!("{mismatches} mismatches in {decisions} decisions"))
}

fn criterion_rho() -> Outcome {
    let r = check_rho_invariance(1000, 4).unwrap();
    (r.pass, format!("{} disagreements, agreement {}", r.violations, r.statistic))
}

fn criterion_lemma() -> Outcome {
    let r = check_quantile_lemma(1000, 50, 4, 0.2, 5).unwrap();
    (r.pass, format!("{} violations, smallest margin {:.3e}", r.violations, r.statistic))
}

fn criterion_bound() -> Outcome {
    let r = check_worst_case_bound(BoundParams::new(200, 200, 3, 0.1, 6)).unwrap();
    (r.pass, format!("{} violations, smallest margin {:.4}", r.violations, r.statistic))
}

fn criterion_mass() -> Outcome {
    let mut worst = 0.0f64;
    for t in 0..1000u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(9000 + t);
        let n = rng.random_range(1..200);
        let k = rng.random_range(1..6);
        let data: Vec<f64> = (0..n * k).map(|_| rng.sample::<f64, _>(Exp1) * rng.random_range(0.01..100.0)).collect();
        let calib = ScoreMatrix::new(n, k, data).unwrap();
        let test = TestScoreProfile::new((0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect()).unwrap();
        let block = normalize_to_evalues(&calib, &test).unwrap();
        for m in 0..k {
            let total: f64 = block.calibration_column(m).iter().sum::<f64>() + block.test()[m];
            let target = (n + 1) as f64;
            worst = worst.max((total - target).abs() / target);
        }
    }
    (worst <= MASS_TOLERANCE, format!("worst relative error {worst:.2e}"))
}

fn criterion_uniformity() -> Outcome {
    let null = check_rank_uniformity(20, 3, 20000, 1.0, 8).unwrap();
    let shifted = check_rank_uniformity(20, 3, 20000, SHIFT_SCALE, 8).unwrap();
    (
        null.pass && !shifted.pass,
        format!(
            "exchangeable p={:.4}, shifted p={:.2e}",
            null.params["p_value"].as_f64().unwrap(),
            shifted.params["p_value"].as_f64().unwrap()
        ),
    )
}

fn criterion_baseline_laws(result: &RunResult) -> Outcome {
    let mut ok = true;
    let mut detail = String::new();
    for alpha in ALPHAS {
        let tol = coverage_tolerance(alpha);
        for (method, target) in [("cm", 1.0 - 2.0 * alpha), ("wagg", 1.0 - alpha), ("csa", 1.0 - alpha)] {
            let c = mean_coverage(result, method, alpha);
            ok &= c >= target - tol;
            detail += &format!(" {method}@{alpha}={c:.4} (>= {:.4})", target - tol);
        }
    }
    (ok, detail.trim_start().to_string())
}

fn criterion_efficiency() -> Outcome {
    let roster = r#"[{"kind": "ols"}, {"kind": "ridge", "lambda": 100}, {"kind": "knn", "k": 5},
                     {"kind": "knn", "k": 50}, {"kind": "random_feature_ridge", "width": 200, "lambda": 1, "seed": 3}]"#;
    let datasets = [
        r#""generator": "linear", "n": 1500, "d": 5"#,
        r#""generator": "linear", "n": 1500, "d": 20, "noise": 2"#,
        r#""generator": "friedman-like", "n": 1500, "d": 5"#,
        r#""generator": "friedman-like", "n": 1500, "d": 10, "noise": 3"#,
        r#""generator": "heteroscedastic", "n": 1500, "d": 5"#,
        r#""generator": "heteroscedastic", "n": 1500, "d": 3, "noise": 0.5"#,
    ];
    let mut wins = 0;
    let mut detail = String::new();
    for (i, data) in datasets.iter().enumerate() {
        let cfg = ExperimentConfig::from_json_str(&format!(
            r#"{{"name": "ds{i}", "data": {{"source": "synthetic", {data}}}, "roster": {roster},
                "n_seeds": 20, "alphas": [{EFFICIENCY_ALPHA}], "methods": ["sacp++", "cm", "cr", "csa", "wagg"]}}"#
        ))
        .unwrap();
        let result = run_experiment(&cfg).unwrap();
        let len = |m: &str| result.summary_for(m, EFFICIENCY_ALPHA).unwrap().avg_length.mean;
        let best = ["cm", "cr", "csa", "wagg"].iter().map(|m| len(m)).fold(f64::INFINITY, f64::min);
        let ours = len("sacp++");
        wins += usize::from(ours <= best);
        detail += &format!(" ds{i}: {ours:.3} vs {best:.3};");
    }
    (
        wins >= EFFICIENCY_WINS_NEEDED,
        format!("sacp++ no longer than the best aggregator on {wins}/6 (trend check);{detail}"),
    )
}

fn main() -> ExitCode {
    let (harness, elapsed) = coverage_harness();
    let criteria: Vec<(&str, Box<dyn Fn() -> Outcome>)> = vec![
        ("coverage", Box::new(|| criterion_coverage(&harness, elapsed))),
        ("sacp++ dominance", Box::new(|| criterion_dominance(&harness))),
        ("single-model reduction", Box::new(criterion_k1_reduction)),
        ("rho invariance", Box::new(criterion_rho)),
        ("quantile lemma", Box::new(criterion_lemma)),
        ("worst-case bound", Box::new(criterion_bound)),
        ("e-value mass", Box::new(criterion_mass)),
        ("rank uniformity", Box::new(criterion_uniformity)),
        ("baseline coverage", Box::new(|| criterion_baseline_laws(&harness))),
        ("directional efficiency", Box::new(criterion_efficiency)),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = check();
        failed += usize::from(!ok);
        println!("criterion {:>2} {name}: {} | {detail}", i + 1, if ok { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
