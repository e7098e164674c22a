use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Univariate normal density, fitted by maximum likelihood.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Gaussian1D {
    pub mean: f64,
    pub variance: f64,
}

impl Gaussian1D {
    /// MLE fit: sample mean and the divide-by-n variance, clamped below at
    /// `variance_floor`.
    pub fn fit(samples: &[f64], variance_floor: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
        }
        if samples.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteInput("gaussian samples"));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let variance = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Ok(Self { mean, variance: variance.max(variance_floor) })
    }

    pub fn log_pdf(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * (LN_2PI + self.variance.ln() + d * d / self.variance)
    }

    pub fn std_dev(&self) -> f64 {
        self.variance.sqrt()
    }
}
