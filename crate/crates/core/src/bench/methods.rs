//! Method registry: every method reduces to a yes/no decision on a candidate's
//! vector of per-model test scores.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregate::AggregatorSpec;
use crate::baselines::{
    bl_select, column_quantiles, csa_fit, csa_membership, wagg_fit, BlTask, CsaModel, WaggModel, WaggProxy,
};
use crate::error::{Error, Result};
use crate::primitives::{Alpha, ScoreMatrix, SCORE_FLOOR};
use crate::sacp::{select_p, Calibrated, PGrid, PredictionSetRegression, TargetGrid, TestInputs};

/// A prediction-set method as named in configs and on the command line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    /// Split CP with a single model (0-based index; written 1-based).
    SplitCp(usize),
    Bl,
    Cm,
    Cr,
    Wagg,
    Csa,
    Sacp(AggregatorSpec),
    SacpPlusPlus,
    Union,
    Intersection,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::SplitCp(0) => write!(f, "split_cp"),
            Method::SplitCp(k) => write!(f, "split_cp:{}", k + 1),
            Method::Bl => write!(f, "bl"),
            Method::Cm => write!(f, "cm"),
            Method::Cr => write!(f, "cr"),
            Method::Wagg => write!(f, "wagg"),
            Method::Csa => write!(f, "csa"),
            Method::Sacp(spec) if spec.is_sum() => write!(f, "sacp"),
            Method::Sacp(spec) => write!(f, "sacp:{spec}"),
            Method::SacpPlusPlus => write!(f, "sacp++"),
            Method::Union => write!(f, "union"),
            Method::Intersection => write!(f, "intersection"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let method = match (head.to_ascii_lowercase().as_str(), arg) {
            ("split_cp", None) => Method::SplitCp(0),
            ("split_cp", Some(k)) => {
                let k: usize = k.parse().map_err(|_| Error::config(format!("bad model index in '{s}'")))?;
                if k == 0 {
                    return Err(Error::config("split_cp model indices start at 1"));
                }
                Method::SplitCp(k - 1)
            }
            ("bl", None) => Method::Bl,
            ("cm", None) => Method::Cm,
            ("cr", None) => Method::Cr,
            ("wagg", None) => Method::Wagg,
            ("csa", None) => Method::Csa,
            ("sacp", None) => Method::Sacp(AggregatorSpec::SUM),
            ("sacp", Some(spec)) => Method::Sacp(spec.parse()?),
            ("sacp++", None) => Method::SacpPlusPlus,
            ("union", None) => Method::Union,
            ("intersection", None) => Method::Intersection,
            _ => return Err(Error::config(format!("unknown method '{s}'"))),
        };
        Ok(method)
    }
}

impl TryFrom<String> for Method {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Hyperparameters shared by the methods.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MethodParams {
    pub csa_directions: usize,
    pub csa_bisect_iters: usize,
    pub wagg_weights: usize,
    /// Exponent grid for SACP++; the task default when absent.
    pub p_grid: Option<PGrid>,
}

impl Default for MethodParams {
    fn default() -> Self {
        MethodParams {
            csa_directions: 50,
            csa_bisect_iters: 20,
            wagg_weights: 200,
            p_grid: None,
        }
    }
}

/// Calibration-side inputs a method may need besides the score matrix.
#[derive(Debug, Clone, Copy)]
pub struct Calibration<'a> {
    pub scores: &'a ScoreMatrix,
    pub alpha: Alpha,
    pub bl_task: BlTask<'a>,
    pub wagg_proxy: WaggProxy<'a>,
}

#[derive(Debug, Clone, Copy)]
pub enum Vote {
    Single(usize),
    Majority,
    Randomized,
    Any,
    All,
}

/// A fitted method, ready to decide candidates.
#[derive(Debug, Clone)]
pub enum Decider<'a> {
    Sacp(Calibrated<'a>),
    PerModel { quantiles: Vec<f64>, vote: Vote },
    Wagg(WaggModel),
    Csa(CsaModel),
}

impl<'a> Decider<'a> {
    /// Fits `method`. SACP++ reads the unlabeled `test_inputs` to pick its exponent.
    pub fn fit(
        method: Method,
        cal: Calibration<'a>,
        params: &MethodParams,
        default_grid: PGrid,
        test_inputs: TestInputs<'_>,
        seed: u64,
    ) -> Result<Self> {
        let name = method.to_string();
        Self::fit_inner(method, cal, params, default_grid, test_inputs, seed).map_err(|e| e.in_method(name))
    }

    fn fit_inner(
        method: Method,
        cal: Calibration<'a>,
        params: &MethodParams,
        default_grid: PGrid,
        test_inputs: TestInputs<'_>,
        seed: u64,
    ) -> Result<Self> {
        let k = cal.scores.cols();
        let per_model = |alpha: Alpha, vote: Vote| Decider::PerModel {
            quantiles: column_quantiles(cal.scores, alpha),
            vote,
        };
        // Majority votes guarantee 1 - 2 alpha, so they run at alpha / 2.
        let half = Alpha::new(cal.alpha.value() / 2.0)?;
        Ok(match method {
            Method::SplitCp(m) => {
                if m >= k {
                    return Err(Error::config(format!("model {} requested but only {k} models", m + 1)));
                }
                per_model(cal.alpha, Vote::Single(m))
            }
            Method::Bl => per_model(cal.alpha, Vote::Single(bl_select(cal.scores, cal.alpha, cal.bl_task)?)),
            Method::Cm => per_model(half, Vote::Majority),
            Method::Cr => per_model(half, Vote::Randomized),
            Method::Union => per_model(cal.alpha, Vote::Any),
            Method::Intersection => per_model(cal.alpha, Vote::All),
            Method::Wagg => Decider::Wagg(wagg_fit(cal.scores, cal.alpha, params.wagg_weights, seed, cal.wagg_proxy)?),
            Method::Csa => Decider::Csa(csa_fit(
                cal.scores,
                cal.alpha,
                params.csa_directions,
                params.csa_bisect_iters,
                seed,
            )?),
            Method::Sacp(spec) => Decider::Sacp(Calibrated::new(cal.scores, spec, cal.alpha)),
            Method::SacpPlusPlus => {
                let candidates = params.p_grid.as_ref().unwrap_or(&default_grid).candidates()?;
                let sel = select_p(cal.scores, test_inputs, &candidates, cal.alpha)?;
                log::debug!("sacp++ picked {} at alpha {}", sel.chosen, cal.alpha);
                Decider::Sacp(Calibrated::new(cal.scores, sel.chosen, cal.alpha))
            }
        })
    }

    /// Decision for one candidate; `u` is the randomized-vote draw.
    pub fn accepts(&self, test: &[f64], u: f64) -> bool {
        match self {
            Decider::Sacp(engine) => engine.accepts(test),
            Decider::Wagg(model) => model.accepts(test),
            Decider::Csa(model) => csa_membership(model, test),
            Decider::PerModel { quantiles, vote } => {
                let mut votes = 0usize;
                for (t, q) in test.iter().zip(quantiles) {
                    if t <= q {
                        votes += 1;
                    }
                }
                let k = quantiles.len();
                match *vote {
                    Vote::Single(m) => test[m] <= quantiles[m],
                    Vote::Majority => 2 * votes > k,
                    Vote::Randomized => 2.0 * votes as f64 > k as f64 * (1.0 + u),
                    Vote::Any => votes > 0,
                    Vote::All => votes == k,
                }
            }
        }
    }

    pub fn accepts_target(&self, predictions: &[f64], y: f64, u: f64) -> bool {
        match self {
            Decider::Sacp(engine) => engine.accepts_target(predictions, y),
            _ => self.accepts(&residuals(predictions, y), u),
        }
    }

    pub fn regress(&self, predictions: &[f64], grid: &TargetGrid, u: f64) -> PredictionSetRegression {
        match self {
            Decider::Sacp(engine) => engine.regress(predictions, grid),
            _ => {
                let mut t = vec![0.0; predictions.len()];
                let mask = (0..grid.len())
                    .map(|j| {
                        let y = grid.point(j);
                        t.iter_mut().zip(predictions).for_each(|(t, mu)| *t = (y - mu).abs().max(SCORE_FLOOR));
                        self.accepts(&t, u)
                    })
                    .collect();
                PredictionSetRegression::from_mask(mask, grid.step())
            }
        }
    }
}

fn residuals(predictions: &[f64], y: f64) -> Vec<f64> {
    predictions.iter().map(|mu| (y - mu).abs().max(SCORE_FLOOR)).collect()
}

/// Per-test-point draws for the randomized vote; zeros for other methods.
pub fn vote_draws(method: Method, n: usize, seed: u64) -> Vec<f64> {
    if method != Method::Cr {
        return vec![0.0; n];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random::<f64>()).collect()
}
