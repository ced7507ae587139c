//! Experiment configuration, the split/standardize/fit protocol, and the
//! multi-seed runner producing per-seed rows and a mean/std summary.

mod io;
mod methods;
mod synth;

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{BlTask, WaggProxy};
use crate::error::{Error, Result};
use crate::models::{Dataset, FittedModel, ModelKind, Predictions, Standardizer, Target};
use crate::primitives::{Alpha, ScoreMatrix, TestScoreProfile};
use crate::sacp::{mean_in_order, PGrid, TargetGrid, TestInputs};
use crate::scores::{classification_profiles, classification_scores, regression_scores, ClassProbabilities, RegressionPredictions};

pub use io::{load_dataset_csv, load_labels_csv, load_scores_csv, write_scores_csv, ScoreData, TestPoint};
pub use methods::{vote_draws, Calibration, Decider, Method, MethodParams};
pub use synth::{synth_generate, Generator, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    #[default]
    Regression,
    Classification,
}

/// Where the data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default)]
        header: bool,
        #[serde(default)]
        n_classes: Option<usize>,
    },
    Synthetic {
        generator: Generator,
        n: usize,
        d: usize,
        #[serde(default = "one")]
        noise: f64,
        #[serde(default = "three")]
        classes: usize,
        /// Draw one fixed dataset instead of a fresh one per seed.
        #[serde(default)]
        data_seed: Option<u64>,
    },
    /// Precomputed scores; seeds only drive the randomized methods.
    Scores { calib: PathBuf, test: PathBuf, labels: PathBuf },
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions { train: 0.8, calibration: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Inferred from the data source when absent.
    #[serde(default)]
    pub task: Option<TaskKind>,
    pub data: DataSource,
    /// Task default when empty.
    #[serde(default)]
    pub roster: Vec<ModelKind>,
    #[serde(default = "default_alphas")]
    pub alphas: Vec<f64>,
    /// Explicit seeds; otherwise `0..n_seeds`.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default = "default_n_seeds")]
    pub n_seeds: usize,
    #[serde(default)]
    pub base_seed: u64,
    #[serde(default)]
    pub split: SplitFractions,
    #[serde(default = "default_grid_size")]
    pub grid_size: usize,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub params: MethodParams,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Record wall-clock times; off by default so outputs are byte-stable.
    #[serde(default)]
    pub timing: bool,
}

fn default_name() -> String {
    "experiment".into()
}

fn default_alphas() -> Vec<f64> {
    vec![0.1]
}

fn default_n_seeds() -> usize {
    20
}

fn default_grid_size() -> usize {
    255
}

fn default_methods() -> Vec<Method> {
    ["split_cp", "bl", "cm", "cr", "wagg", "csa", "sacp", "sacp++"]
        .iter()
        .map(|m| m.parse().unwrap())
        .collect()
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json_str(&text)
    }

    pub fn task(&self) -> TaskKind {
        self.task.unwrap_or(match &self.data {
            DataSource::Synthetic { generator: Generator::GaussianClasses, .. } => TaskKind::Classification,
            DataSource::Scores { .. } => TaskKind::Classification,
            _ => TaskKind::Regression,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.seeds.clone().unwrap_or_else(|| (0..self.n_seeds as u64).collect())
    }

    pub fn roster(&self) -> Vec<ModelKind> {
        if !self.roster.is_empty() {
            return self.roster.clone();
        }
        match self.task() {
            TaskKind::Regression => vec![ModelKind::Ols, ModelKind::Ridge { lambda: 10.0 }, ModelKind::Knn { k: 10 }],
            TaskKind::Classification => vec![
                ModelKind::LogisticGd { lr: 0.5, iters: 300 },
                ModelKind::KnnClassifier { k: 10 },
                ModelKind::KnnClassifier { k: 30 },
            ],
        }
    }

    pub fn alphas(&self) -> Result<Vec<Alpha>> {
        self.alphas.iter().map(|&a| Alpha::new(a)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let SplitFractions { train, calibration, test } = self.split;
        if [train, calibration, test].iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(Error::config("split fractions must lie in (0, 1)"));
        }
        if (train + calibration + test - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split fractions sum to {}, not 1",
                train + calibration + test
            )));
        }
        if self.alphas.is_empty() {
            return Err(Error::config("no alpha levels"));
        }
        self.alphas()?;
        let seeds = self.seeds();
        if seeds.is_empty() {
            return Err(Error::config("no seeds"));
        }
        let mut sorted = seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::config("seeds must be distinct"));
        }
        if self.grid_size < 2 {
            return Err(Error::config("grid size must be at least 2"));
        }
        if self.methods.is_empty() {
            return Err(Error::config("no methods"));
        }
        if let Some(g) = &self.params.p_grid {
            g.candidates()?;
        }
        let task = self.task();
        match &self.data {
            DataSource::Synthetic { generator, .. } => {
                let classification = *generator == Generator::GaussianClasses;
                if classification != (task == TaskKind::Classification) {
                    return Err(Error::config(format!("generator {generator:?} does not match task {task:?}")));
                }
            }
            DataSource::Scores { .. } if task == TaskKind::Regression => {
                return Err(Error::config("score files describe candidate sets; use task classification"));
            }
            _ => {}
        }
        if !matches!(self.data, DataSource::Scores { .. }) {
            for kind in self.roster() {
                if kind.is_classifier() != (task == TaskKind::Classification) {
                    return Err(Error::config(format!("model {kind:?} does not match task {task:?}")));
                }
            }
        }
        Ok(())
    }
}

/// Independent 64-bit seed for `(base, stream)`.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Shuffled `(train, calibration, test)` row indices.
pub fn split_indices(n: usize, fractions: SplitFractions, seed: u64) -> Result<[Vec<usize>; 3]> {
    let n_cal = (fractions.calibration * n as f64).round() as usize;
    let n_test = (fractions.test * n as f64).round() as usize;
    if n_cal == 0 || n_test == 0 || n_cal + n_test >= n {
        return Err(Error::config(format!("{n} rows cannot be split as {fractions:?}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(n - n_test);
    let cal = idx.split_off(n - n_test - n_cal);
    Ok([idx, cal, test])
}

/// `(coverage, average length)` as plain means in index order.
pub fn metrics(covered: &[bool], lengths: &[f64]) -> Result<(f64, f64)> {
    if covered.is_empty() || lengths.is_empty() {
        return Err(Error::contract("metrics over an empty test set"));
    }
    let hits: Vec<f64> = covered.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect();
    Ok((mean_in_order(&hits), mean_in_order(lengths)))
}

/// Coverage and size of one method on one test set.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodOutcome {
    pub method: Method,
    pub coverage: f64,
    pub avg_length: f64,
    pub wall_ms: f64,
}

/// Model outputs and targets for a regression evaluation.
#[derive(Debug, Clone, Copy)]
pub struct RegressionEval<'a> {
    pub calib_predictions: &'a [RegressionPredictions],
    pub calib_targets: &'a [f64],
    pub test_predictions: &'a [RegressionPredictions],
    pub test_targets: &'a [f64],
    pub grid: &'a TargetGrid,
}

/// Runs each method on a regression split: coverage at the exact target,
/// length on the grid.
pub fn evaluate_regression(
    eval: RegressionEval<'_>,
    methods: &[Method],
    alpha: Alpha,
    params: &MethodParams,
    seed: u64,
) -> Result<Vec<MethodOutcome>> {
    let calib = regression_scores(eval.calib_predictions, eval.calib_targets)?;
    if eval.test_predictions.len() != eval.test_targets.len() || eval.test_predictions.is_empty() {
        return Err(Error::contract("test predictions and targets differ in length"));
    }
    let cal = Calibration {
        scores: &calib,
        alpha,
        bl_task: BlTask::Regression,
        wagg_proxy: WaggProxy::Regression,
    };
    let inputs = TestInputs::Regression { predictions: eval.test_predictions, grid: eval.grid };
    methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let start = Instant::now();
            let method_seed = derive_seed(seed, 100 + mi as u64);
            let decider = Decider::fit(method, cal, params, PGrid::regression(), inputs, method_seed)?;
            let u = vote_draws(method, eval.test_targets.len(), derive_seed(method_seed, 1));
            let per_point: Vec<(bool, f64)> = eval
                .test_predictions
                .par_iter()
                .zip(eval.test_targets.par_iter())
                .zip(u.par_iter())
                .map(|((p, &y), &u)| {
                    (decider.accepts_target(p.values(), y, u), decider.regress(p.values(), eval.grid, u).length)
                })
                .collect();
            let (covered, lengths): (Vec<bool>, Vec<f64>) = per_point.into_iter().unzip();
            let (coverage, avg_length) = metrics(&covered, &lengths)?;
            Ok(MethodOutcome { method, coverage, avg_length, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
        })
        .collect()
}

/// Candidate-set evaluation: each test point has a list of candidate score
/// vectors, optionally with the index of the true candidate.
#[derive(Debug, Clone, Copy)]
pub struct CandidateEval<'a> {
    pub calib: &'a ScoreMatrix,
    pub tests: &'a [Vec<TestScoreProfile>],
    pub truth: Option<&'a [usize]>,
    pub bl_task: BlTask<'a>,
    pub wagg_proxy: WaggProxy<'a>,
}

/// Accepted-candidate masks, one per test point.
pub fn candidate_sets(
    eval: CandidateEval<'_>,
    method: Method,
    alpha: Alpha,
    params: &MethodParams,
    seed: u64,
) -> Result<Vec<Vec<bool>>> {
    let cal = Calibration {
        scores: eval.calib,
        alpha,
        bl_task: eval.bl_task,
        wagg_proxy: eval.wagg_proxy,
    };
    for point in eval.tests {
        for p in point {
            if p.len() != eval.calib.cols() {
                return Err(Error::contract(format!(
                    "test profile has {} scores for {} models",
                    p.len(),
                    eval.calib.cols()
                )));
            }
        }
    }
    let inputs = TestInputs::Classification { profiles: eval.tests };
    let decider = Decider::fit(method, cal, params, PGrid::classification(), inputs, seed)?;
    let u = vote_draws(method, eval.tests.len(), derive_seed(seed, 1));
    Ok(eval
        .tests
        .par_iter()
        .zip(u.par_iter())
        .map(|(point, &u)| point.iter().map(|p| decider.accepts(p.scores(), u)).collect())
        .collect())
}

pub fn evaluate_candidates(
    eval: CandidateEval<'_>,
    methods: &[Method],
    alpha: Alpha,
    params: &MethodParams,
    seed: u64,
) -> Result<Vec<MethodOutcome>> {
    let truth = eval.truth.ok_or_else(|| Error::contract("coverage needs the true candidates"))?;
    if truth.len() != eval.tests.len() {
        return Err(Error::contract("one true candidate per test point required"));
    }
    methods
        .iter()
        .enumerate()
        .map(|(mi, &method)| {
            let start = Instant::now();
            let sets = candidate_sets(eval, method, alpha, params, derive_seed(seed, 100 + mi as u64))?;
            let covered: Vec<bool> = sets.iter().zip(truth).map(|(s, &t)| s[t]).collect();
            let lengths: Vec<f64> = sets.iter().map(|s| s.iter().filter(|&&a| a).count() as f64).collect();
            let (coverage, avg_length) = metrics(&covered, &lengths)?;
            Ok(MethodOutcome { method, coverage, avg_length, wall_ms: start.elapsed().as_secs_f64() * 1e3 })
        })
        .collect()
}

/// One results-CSV row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub dataset: String,
    pub method: String,
    pub alpha: f64,
    pub seed: u64,
    pub coverage: f64,
    pub avg_length: f64,
    pub wall_ms: f64,
    /// Regression length in original target units.
    #[serde(skip)]
    pub avg_length_original: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    fn of(values: &[f64]) -> Stat {
        let mean = mean_in_order(values);
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        Stat { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub alpha: f64,
    pub seeds: usize,
    pub coverage: Stat,
    pub avg_length: Stat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub avg_length_original: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunResult {
    pub dataset: String,
    pub task: TaskKind,
    #[serde(skip)]
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
}

impl RunResult {
    /// Rows of one method at one alpha, in seed order.
    pub fn rows_for(&self, method: &str, alpha: f64) -> Vec<&ResultRow> {
        self.rows.iter().filter(|r| r.method == method && r.alpha == alpha).collect()
    }

    pub fn summary_for(&self, method: &str, alpha: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|s| s.method == method && s.alpha == alpha)
    }

    /// Writes `results.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io { path: dir.to_path_buf(), source })?;
        let csv = dir.join("results.csv");
        let json = dir.join("summary.json");
        io::write_csv_rows(&csv, &self.rows)?;
        io::write_json(&json, self)?;
        Ok((csv, json))
    }
}

enum Loaded {
    Table(Dataset),
    /// Fixed dataset seed, or a fresh draw per experiment seed.
    Synthetic(SynthSpec, Option<u64>),
    Scores(ScoreData, Vec<usize>),
}

fn load(cfg: &ExperimentConfig) -> Result<Loaded> {
    Ok(match &cfg.data {
        DataSource::Csv { path, header, n_classes } => {
            Loaded::Table(load_dataset_csv(path, cfg.task(), *header, *n_classes)?)
        }
        DataSource::Synthetic { generator, n, d, noise, classes, data_seed } => {
            let spec = SynthSpec { generator: *generator, n: *n, d: *d, noise: *noise, classes: *classes };
            Loaded::Synthetic(spec, *data_seed)
        }
        DataSource::Scores { calib, test, labels } => {
            let data = load_scores_csv(calib, test)?;
            let map = load_labels_csv(labels)?;
            let mut truth = Vec::with_capacity(data.tests.len());
            for point in &data.tests {
                let label = map
                    .get(&point.id)
                    .ok_or_else(|| Error::ingestion(labels, format!("no label for test point '{}'", point.id)))?;
                let idx = point.candidates.iter().position(|c| c == label).ok_or_else(|| {
                    Error::ingestion(labels, format!("label '{label}' is not a candidate of '{}'", point.id))
                })?;
                truth.push(idx);
            }
            Loaded::Scores(data, truth)
        }
    })
}

fn predict_all(models: &[FittedModel], data: &Dataset) -> Result<Vec<Predictions>> {
    models.iter().map(|m| m.predict(&data.x)).collect()
}

fn per_point_regression(outputs: &[Predictions]) -> Result<Vec<RegressionPredictions>> {
    let cols: Vec<&Vec<f64>> = outputs
        .iter()
        .map(|p| match p {
            Predictions::Regression(v) => Ok(v),
            _ => Err(Error::config("classifier in a regression roster")),
        })
        .collect::<Result<_>>()?;
    (0..cols[0].len())
        .map(|i| RegressionPredictions::new(cols.iter().map(|c| c[i]).collect()))
        .collect()
}

fn per_point_classification(outputs: &[Predictions]) -> Result<Vec<ClassProbabilities>> {
    let cols: Vec<&Vec<Vec<f64>>> = outputs
        .iter()
        .map(|p| match p {
            Predictions::Classification(v) => Ok(v),
            _ => Err(Error::config("regressor in a classification roster")),
        })
        .collect::<Result<_>>()?;
    (0..cols[0].len())
        .map(|i| ClassProbabilities::new(cols.iter().map(|c| c[i].clone()).collect()))
        .collect()
}

/// `(method index, alpha index, outcome, length in original units)`.
type SeedRow = (usize, usize, MethodOutcome, Option<f64>);

fn run_seed(cfg: &ExperimentConfig, loaded: &Loaded, seed: u64) -> Result<Vec<SeedRow>> {
    let stream = derive_seed(cfg.base_seed, seed);
    let alphas = cfg.alphas()?;
    let mut out = Vec::new();
    if let Loaded::Scores(data, truth) = loaded {
        let tests: Vec<Vec<TestScoreProfile>> = data.tests.iter().map(|t| t.profiles.clone()).collect();
        let eval = CandidateEval {
            calib: &data.calib,
            tests: &tests,
            truth: Some(truth),
            bl_task: BlTask::Regression,
            wagg_proxy: WaggProxy::Regression,
        };
        for (ai, &alpha) in alphas.iter().enumerate() {
            for (mi, o) in evaluate_candidates(eval, &cfg.methods, alpha, &cfg.params, stream)?.into_iter().enumerate() {
                out.push((mi, ai, o, None));
            }
        }
        return Ok(out);
    }

    let generated;
    let data = match loaded {
        Loaded::Table(d) => d,
        Loaded::Synthetic(spec, fixed) => {
            generated = synth_generate(spec, fixed.unwrap_or_else(|| derive_seed(stream, 1)))?;
            &generated
        }
        Loaded::Scores(..) => unreachable!(),
    };
    let [train_idx, cal_idx, test_idx] = split_indices(data.len(), cfg.split, derive_seed(stream, 2))?;
    let raw_train = data.select(&train_idx);
    let standardizer = Standardizer::fit(&raw_train);
    let train = standardizer.apply(&raw_train)?;
    let cal = standardizer.apply(&data.select(&cal_idx))?;
    let test = standardizer.apply(&data.select(&test_idx))?;
    let models = cfg
        .roster()
        .iter()
        .enumerate()
        .map(|(k, kind)| FittedModel::fit(*kind, &train, derive_seed(stream, 10 + k as u64)))
        .collect::<Result<Vec<_>>>()?;
    let cal_out = predict_all(&models, &cal)?;
    let test_out = predict_all(&models, &test)?;
    let method_seed = derive_seed(stream, 3);

    match (&cal.y, &test.y) {
        (Target::Regression(cal_y), Target::Regression(test_y)) => {
            let calib_predictions = per_point_regression(&cal_out)?;
            let test_predictions = per_point_regression(&test_out)?;
            let grid = TargetGrid::spanning(cal_y, cfg.grid_size)?;
            let eval = RegressionEval {
                calib_predictions: &calib_predictions,
                calib_targets: cal_y,
                test_predictions: &test_predictions,
                test_targets: test_y,
                grid: &grid,
            };
            let scale = standardizer.target_scale();
            for (ai, &alpha) in alphas.iter().enumerate() {
                for (mi, o) in evaluate_regression(eval, &cfg.methods, alpha, &cfg.params, method_seed)?
                    .into_iter()
                    .enumerate()
                {
                    let original = o.avg_length * scale;
                    out.push((mi, ai, o, Some(original)));
                }
            }
        }
        (Target::Classification { labels: cal_y, .. }, Target::Classification { labels: test_y, .. }) => {
            let cal_probs = per_point_classification(&cal_out)?;
            let test_probs = per_point_classification(&test_out)?;
            let calib = classification_scores(&cal_probs, cal_y)?;
            let cal_profiles = cal_probs.iter().map(classification_profiles).collect::<Result<Vec<_>>>()?;
            let tests = test_probs.iter().map(classification_profiles).collect::<Result<Vec<_>>>()?;
            let eval = CandidateEval {
                calib: &calib,
                tests: &tests,
                truth: Some(test_y),
                bl_task: BlTask::Classification { calibration_probs: &cal_probs },
                wagg_proxy: WaggProxy::Classification { class_profiles: &cal_profiles },
            };
            for (ai, &alpha) in alphas.iter().enumerate() {
                for (mi, o) in evaluate_candidates(eval, &cfg.methods, alpha, &cfg.params, method_seed)?
                    .into_iter()
                    .enumerate()
                {
                    out.push((mi, ai, o, None));
                }
            }
        }
        _ => return Err(Error::contract("mixed target kinds after splitting")),
    }
    Ok(out)
}

/// Runs every seed (concurrently), then sorts rows by (method, alpha, seed)
/// in config order and summarizes them.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    cfg.validate()?;
    let loaded = load(cfg)?;
    let seeds = cfg.seeds();
    let per_seed = seeds
        .par_iter()
        .enumerate()
        .map(|(si, &seed)| {
            run_seed(cfg, &loaded, seed).map(|rows| rows.into_iter().map(move |r| (si, r)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut keyed: Vec<_> = per_seed.into_iter().flatten().collect();
    keyed.sort_by_key(|(si, (mi, ai, _, _))| (*mi, *ai, *si));

    let rows: Vec<ResultRow> = keyed
        .iter()
        .map(|(si, (_, ai, o, original))| ResultRow {
            dataset: cfg.name.clone(),
            method: o.method.to_string(),
            alpha: cfg.alphas[*ai],
            seed: seeds[*si],
            coverage: o.coverage,
            avg_length: o.avg_length,
            wall_ms: if cfg.timing { o.wall_ms } else { 0.0 },
            avg_length_original: *original,
        })
        .collect();

    let mut summary = Vec::new();
    for chunk in rows.chunk_by(|a, b| a.method == b.method && a.alpha == b.alpha) {
        let cov: Vec<f64> = chunk.iter().map(|r| r.coverage).collect();
        let len: Vec<f64> = chunk.iter().map(|r| r.avg_length).collect();
        let orig: Option<Vec<f64>> = chunk.iter().map(|r| r.avg_length_original).collect();
        summary.push(SummaryRow {
            method: chunk[0].method.clone(),
            alpha: chunk[0].alpha,
            seeds: chunk.len(),
            coverage: Stat::of(&cov),
            avg_length: Stat::of(&len),
            avg_length_original: orig.map(|o| Stat::of(&o)),
        });
    }
    Ok(RunResult { dataset: cfg.name.clone(), task: cfg.task(), rows, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synthetic_config(extra: &str) -> ExperimentConfig {
        let text = format!(
            r#"{{"name":"lin","data":{{"source":"synthetic","generator":"linear","n":400,"d":3}},
                "n_seeds":3,"methods":["split_cp","sacp","sacp++","cm","wagg","csa"],"grid_size":101{extra}}}"#
        );
        ExperimentConfig::from_json_str(&text).unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg = synthetic_config("");
        assert_eq!(cfg.split, SplitFractions::default());
        assert_eq!(cfg.task(), TaskKind::Regression);
        assert_eq!(cfg.seeds(), vec![0, 1, 2]);
        let bad = r#"{"data":{"source":"synthetic","generator":"linear","n":100,"d":2},
                      "split":{"train":0.7,"calibration":0.1,"test":0.1}}"#;
        assert!(ExperimentConfig::from_json_str(bad).unwrap_err().is_config());
        let dup = r#"{"data":{"source":"synthetic","generator":"linear","n":100,"d":2},"seeds":[1,1]}"#;
        assert!(ExperimentConfig::from_json_str(dup).is_err());
        let mismatch = r#"{"data":{"source":"synthetic","generator":"linear","n":100,"d":2},"roster":[{"kind":"knn_classifier","k":3}]}"#;
        assert!(ExperimentConfig::from_json_str(mismatch).is_err());
    }

    #[test]
    fn metrics_examples() {
        assert_eq!(metrics(&[true, false, true, true], &[0.0; 4]).unwrap().0, 0.75);
        assert_eq!(metrics(&[true; 3], &[1.0, 2.0, 3.0]).unwrap().1, 2.0);
        assert_eq!(metrics(&[false; 3], &[0.0; 3]).unwrap().1, 0.0);
        assert!(metrics(&[], &[]).is_err());
    }

    #[test]
    fn split_is_a_deterministic_partition() {
        let [a, b, c] = split_indices(100, SplitFractions::default(), 4).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (80, 10, 10));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(100, SplitFractions::default(), 4).unwrap(), [a, b, c]);
    }

    #[test]
    fn run_is_deterministic_and_dominance_holds() {
        let cfg = synthetic_config("");
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows.len(), 6 * 3);
        for (s, pp) in a.rows_for("sacp", 0.1).iter().zip(a.rows_for("sacp++", 0.1)) {
            assert!(pp.avg_length <= s.avg_length);
        }
        assert!(a.summary_for("sacp", 0.1).unwrap().avg_length_original.is_some());
        assert!(a.rows.iter().all(|r| (0.0..=1.0).contains(&r.coverage) && r.wall_ms == 0.0));
    }

    #[test]
    fn single_model_split_cp_equals_sacp() {
        let cfg = synthetic_config(r#","roster":[{"kind":"ols"}]"#);
        let res = run_experiment(&cfg).unwrap();
        for (a, b) in res.rows_for("split_cp", 0.1).iter().zip(res.rows_for("sacp", 0.1)) {
            assert_eq!((a.coverage, a.avg_length), (b.coverage, b.avg_length));
        }
    }

    #[test]
    fn classification_run() {
        let text = r#"{"name":"cls","data":{"source":"synthetic","generator":"gaussian-classes","n":300,"d":2,"noise":2.0},
                       "n_seeds":2,"methods":["split_cp:2","bl","cm","cr","wagg","csa","sacp","sacp++","union","intersection"]}"#;
        let cfg = ExperimentConfig::from_json_str(text).unwrap();
        assert_eq!(cfg.task(), TaskKind::Classification);
        let res = run_experiment(&cfg).unwrap();
        assert_eq!(res.rows.len(), 10 * 2);
        for r in &res.rows {
            assert!(r.avg_length >= 0.0 && r.avg_length <= 3.0, "{r:?}");
        }
        for (s, pp) in res.rows_for("sacp", 0.1).iter().zip(res.rows_for("sacp++", 0.1)) {
            assert!(pp.avg_length <= s.avg_length);
        }
    }
}
