//! Maximum-likelihood fitting and sampling of the gamma distribution.
//!
//! Parameters use the shape/scale convention: density proportional to
//! `w^(shape - 1) exp(-w / scale)`, mean `shape * scale`.
//!
//! Setting the partial derivatives of the log-likelihood to zero gives
//!
//! ```text
//! sum(log w) - n log(scale) - n digamma(shape) = 0
//! scale = sum(w) / (n shape)
//! ```
//!
//! Eliminating the scale leaves `log(shape) - digamma(shape) = s` with
//! `s = log(mean(w)) - mean(log w)`, solved here by a safeguarded Newton
//! iteration.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::seed::StreamRng;
use rand::SeedableRng;

const MIN_SHAPE: f64 = 1e-6;
const MAX_SHAPE: f64 = 1e6;
const MAX_NEWTON_STEPS: usize = 100;

#[derive(Debug, Error, PartialEq)]
pub enum GammaError {
    #[error("argument {0} is outside the domain")]
    Domain(f64),
    #[error("sample {index} is not positive: {value}")]
    NonPositive { index: usize, value: f64 },
    #[error("sample has zero variance")]
    DegenerateSample,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("Newton iteration did not converge after {0} steps")]
    NoConvergence(usize),
    #[error("invalid parameters: shape {shape}, scale {scale}")]
    InvalidParams { shape: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaParams {
    shape: f64,
    scale: f64,
}

impl GammaParams {
    pub fn new(shape: f64, scale: f64) -> Result<Self, GammaError> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(shape) && ok(scale) {
            Ok(Self { shape, scale })
        } else {
            Err(GammaError::InvalidParams { shape, scale })
        }
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn mean(&self) -> f64 {
        self.shape * self.scale
    }

    pub fn variance(&self) -> f64 {
        self.shape * self.scale * self.scale
    }

    pub fn ln_pdf(&self, w: f64) -> f64 {
        if w <= 0.0 {
            return f64::NEG_INFINITY;
        }
        (self.shape - 1.0) * w.ln() - w / self.scale - self.shape * self.scale.ln() - ln_gamma(self.shape)
    }

    pub fn pdf(&self, w: f64) -> f64 {
        self.ln_pdf(w).exp()
    }
}

/// Asymptotic series of digamma, accurate to ~1e-13 for `z >= 6`.
fn digamma_asymptotic(z: f64) -> f64 {
    let z2 = 1.0 / (z * z);
    let series = z2
        * (1.0 / 12.0
            - z2 * (1.0 / 120.0
                - z2 * (1.0 / 252.0
                    - z2 * (1.0 / 240.0 - z2 * (1.0 / 132.0 - z2 * (691.0 / 32760.0 - z2 / 12.0))))));
    z.ln() - 0.5 / z - series
}

/// The logarithmic derivative of the gamma function.
pub fn digamma(z: f64) -> Result<f64, GammaError> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(GammaError::Domain(z));
    }
    let mut shift = 0.0;
    let mut x = z;
    while x < 10.0 {
        shift += 1.0 / x;
        x += 1.0;
    }
    Ok(digamma_asymptotic(x) - shift)
}

/// Derivative of [`digamma`].
pub fn trigamma(z: f64) -> Result<f64, GammaError> {
    if !(z > 0.0 && z.is_finite()) {
        return Err(GammaError::Domain(z));
    }
    let mut shift = 0.0;
    let mut x = z;
    while x < 10.0 {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + inv2 / 2.0
        + inv * inv2
            * (1.0 / 6.0
                - inv2 * (1.0 / 30.0 - inv2 * (1.0 / 42.0 - inv2 * (1.0 / 30.0 - inv2 * (5.0 / 66.0 - inv2 * 691.0 / 2730.0)))));
    Ok(series + shift)
}

fn check_positive(samples: &[f64]) -> Result<(), GammaError> {
    for (index, &value) in samples.iter().enumerate() {
        if !(value > 0.0 && value.is_finite()) {
            return Err(GammaError::NonPositive { index, value });
        }
    }
    Ok(())
}

/// Log-likelihood written with a rate parameter:
/// `(shape - 1) sum(log w) - rate sum(w) + n shape log(rate) - n log Gamma(shape)`.
pub fn rate_form_log_likelihood(samples: &[f64], shape: f64, rate: f64) -> Result<f64, GammaError> {
    check_positive(samples)?;
    let n = samples.len() as f64;
    let sum_log: f64 = samples.iter().map(|w| w.ln()).sum();
    let sum: f64 = samples.iter().sum();
    Ok((shape - 1.0) * sum_log - rate * sum + n * shape * rate.ln() - n * ln_gamma(shape))
}

/// Log-likelihood of `params`; the rate form evaluated at `rate = 1 / scale`.
pub fn log_likelihood(samples: &[f64], params: &GammaParams) -> Result<f64, GammaError> {
    rate_form_log_likelihood(samples, params.shape, 1.0 / params.scale)
}

/// Per-sample residuals of the two stationarity conditions:
/// `mean(log w) - log(scale) - digamma(shape)` and
/// `(n shape scale - sum(w)) / sum(w)`.
pub fn stationarity_residuals(samples: &[f64], params: &GammaParams) -> Result<(f64, f64), GammaError> {
    check_positive(samples)?;
    let n = samples.len() as f64;
    let mean_log = samples.iter().map(|w| w.ln()).sum::<f64>() / n;
    let sum: f64 = samples.iter().sum();
    let r_shape = mean_log - params.scale.ln() - digamma(params.shape)?;
    let r_scale = (n * params.shape * params.scale - sum) / sum;
    Ok((r_shape, r_scale))
}

/// Closed-form starting point for the shape, accurate to about 1.5%.
fn initial_shape(s: f64) -> f64 {
    (3.0 - s + ((s - 3.0).powi(2) + 24.0 * s).sqrt()) / (12.0 * s)
}

pub fn fit_gamma(samples: &[f64]) -> Result<GammaParams, GammaError> {
    if samples.len() < 2 {
        return Err(GammaError::TooFewSamples(samples.len()));
    }
    check_positive(samples)?;
    if samples.iter().all(|&w| w == samples[0]) {
        return Err(GammaError::DegenerateSample);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let mean_log = samples.iter().map(|w| w.ln()).sum::<f64>() / n;
    let s = mean.ln() - mean_log;
    if !(s > 0.0) {
        return Err(GammaError::DegenerateSample);
    }

    // f(k) = log k - digamma(k) - s is strictly decreasing in k.
    let f = |k: f64| -> Result<f64, GammaError> { Ok(k.ln() - digamma(k)? - s) };
    let mut lo = MIN_SHAPE;
    let mut hi = MAX_SHAPE;
    if f(hi)? > 0.0 {
        return Err(GammaError::DegenerateSample);
    }
    let mut k = initial_shape(s).clamp(MIN_SHAPE, MAX_SHAPE);
    for _ in 0..MAX_NEWTON_STEPS {
        let fk = f(k)?;
        if fk == 0.0 {
            break;
        }
        if fk > 0.0 {
            lo = lo.max(k);
        } else {
            hi = hi.min(k);
        }
        let slope = 1.0 / k - trigamma(k)?;
        let mut next = k - fk / slope;
        if !(next > lo && next < hi) {
            next = (lo * hi).sqrt();
        }
        let done = (next - k).abs() <= 1e-13 * k;
        k = next;
        if done {
            let shape = k;
            return GammaParams::new(shape, mean / shape);
        }
    }
    let residual = f(k)?;
    if residual.abs() < 1e-10 {
        GammaParams::new(k, mean / k)
    } else {
        Err(GammaError::NoConvergence(MAX_NEWTON_STEPS))
    }
}

/// One Marsaglia-Tsang draw with unit scale.
fn standard_gamma<R: Rng + ?Sized>(rng: &mut R, shape: f64) -> f64 {
    if shape < 1.0 {
        let u: f64 = rng.random();
        return standard_gamma(rng, shape + 1.0) * u.powf(1.0 / shape);
    }
    let d = shape - 1.0 / 3.0;
    let c = 1.0 / (9.0 * d).sqrt();
    loop {
        let x: f64 = rng.sample(StandardNormal);
        let v = 1.0 + c * x;
        if v <= 0.0 {
            continue;
        }
        let v = v * v * v;
        let u: f64 = rng.random();
        let x2 = x * x;
        if u < 1.0 - 0.0331 * x2 * x2 || u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
            return d * v;
        }
    }
}

pub fn sample_gamma_with<R: Rng + ?Sized>(rng: &mut R, params: &GammaParams) -> f64 {
    standard_gamma(rng, params.shape) * params.scale
}

pub fn sample_gamma(params: &GammaParams, count: usize, seed: u64) -> Vec<f64> {
    let mut rng = StreamRng::seed_from_u64(seed);
    (0..count).map(|_| sample_gamma_with(&mut rng, params)).collect()
}

/// Asymptotic standard errors `(shape, scale)` of the MLE from `n` samples,
/// taken from the inverse Fisher information.
pub fn standard_errors(params: &GammaParams, n: usize) -> Result<(f64, f64), GammaError> {
    let k = params.shape;
    let t1 = trigamma(k)?;
    let det = k * t1 - 1.0;
    let n = n as f64;
    Ok((
        (k / (n * det)).sqrt(),
        (params.scale * params.scale * t1 / (n * det)).sqrt(),
    ))
}
