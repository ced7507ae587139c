//! Synthetic data generators.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Dataset, Target};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Generator {
    Linear,
    FriedmanLike,
    Heteroscedastic,
    GaussianClasses,
}

impl std::str::FromStr for Generator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::config(format!("unknown generator '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub generator: Generator,
    pub n: usize,
    pub d: usize,
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Class count for `gaussian-classes`.
    #[serde(default = "default_classes")]
    pub classes: usize,
}

fn default_noise() -> f64 {
    1.0
}

fn default_classes() -> usize {
    3
}

impl SynthSpec {
    pub fn new(generator: Generator, n: usize, d: usize, noise: f64) -> Self {
        SynthSpec {
            generator,
            n,
            d,
            noise,
            classes: default_classes(),
        }
    }

    pub fn is_classification(&self) -> bool {
        self.generator == Generator::GaussianClasses
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Deterministic per `(spec, seed)`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    let SynthSpec { generator, n, d, noise, classes } = *spec;
    if n < 20 || d < 1 {
        return Err(Error::config(format!("synthetic data needs n >= 20 and d >= 1, got n={n}, d={d}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::config(format!("noise must be finite and nonnegative, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match generator {
        Generator::Linear | Generator::Heteroscedastic => {
            let beta: Vec<f64> = (0..d).map(|_| normal(&mut rng)).collect();
            let x = DMatrix::from_fn(n, d, |_, _| normal(&mut rng));
            let y = (0..n)
                .map(|i| {
                    let signal: f64 = (0..d).map(|j| x[(i, j)] * beta[j]).sum();
                    let scale = if generator == Generator::Heteroscedastic { x[(i, 0)].abs() } else { 1.0 };
                    signal + noise * scale * normal(&mut rng)
                })
                .collect();
            Dataset::new(x, Target::Regression(y))
        }
        Generator::FriedmanLike => {
            let x = DMatrix::from_fn(n, d, |_, _| rng.random::<f64>());
            let y = (0..n)
                .map(|i| {
                    let v = |j: usize| if j < d { x[(i, j)] } else { 0.0 };
                    10.0 * (std::f64::consts::PI * v(0) * v(1)).sin()
                        + 20.0 * (v(2) - 0.5).powi(2)
                        + 10.0 * v(3)
                        + 5.0 * v(4)
                        + noise * normal(&mut rng)
                })
                .collect();
            Dataset::new(x, Target::Regression(y))
        }
        Generator::GaussianClasses => {
            if classes < 2 {
                return Err(Error::config("gaussian-classes needs at least 2 classes"));
            }
            let means: Vec<Vec<f64>> = (0..classes)
                .map(|_| (0..d).map(|_| 4.0 * normal(&mut rng)).collect())
                .collect();
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
            let mut x = DMatrix::zeros(n, d);
            for (i, &c) in labels.iter().enumerate() {
                for j in 0..d {
                    x[(i, j)] = means[c][j] + noise * normal(&mut rng);
                }
            }
            Dataset::new(x, Target::Classification { labels, n_classes: classes })
        }
    }
}
