//! Rank-one factorization with an l1 penalty on the left vector.
//!
//! Starting from the dominant singular pair, [`procedure`] alternates
//!
//! ```text
//! x <- argmin_x ||H - x y^T||_F^2 + alpha ||x||_1
//! y <- H^T x / ||x||
//! ```
//!
//! until the left vector stops moving. The x-step is separable and solved in
//! closed form by soft-thresholding `H y` at `alpha / 2` and dividing by
//! `||y||^2`.

use ndarray::{Array1, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const POWER_TOLERANCE: f64 = 1e-10;
const POWER_MAX_ITERATIONS: usize = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum SvdError {
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("{0} vector is zero")]
    ZeroVector(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparseSvdConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub max_iterations: usize,
}

impl Default for SparseSvdConfig {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            epsilon: 1e-6,
            max_iterations: 500,
        }
    }
}

impl SparseSvdConfig {
    pub fn validate(&self) -> Result<(), SvdError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SvdError::InvalidConfig(format!(
                "alpha must be non-negative, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SvdError::InvalidConfig(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_iterations < 1 {
            return Err(SvdError::InvalidConfig(
                "max_iterations must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// One sparse rank-one term `sigma * x * y^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFactor {
    pub x: Array1<f64>,
    pub y: Array1<f64>,
    pub sigma: f64,
    pub iterations: usize,
    pub converged: bool,
    /// The x-step shrank every entry to zero; `x` is the zero vector and
    /// `sigma` is zero.
    pub zero_solution: bool,
    /// Penalized objective after each x-step, `f(x[t+1], y[t])`.
    pub objective_trace: Vec<f64>,
}

impl SparseFactor {
    /// Number of nonzero entries of `x`.
    pub fn support_size(&self) -> usize {
        self.x.iter().filter(|&&v| v != 0.0).count()
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn frobenius_norm_sq(h: ArrayView2<f64>) -> f64 {
    h.iter().map(|v| v * v).sum()
}

/// `||H - x y^T||_F^2 + alpha ||x||_1`, evaluated without forming `x y^T`.
pub fn penalized_objective(h: ArrayView2<f64>, x: ArrayView1<f64>, y: ArrayView1<f64>, alpha: f64) -> f64 {
    let cross = x.dot(&h.dot(&y));
    let fit = frobenius_norm_sq(h) - 2.0 * cross + x.dot(&x) * y.dot(&y);
    fit + alpha * x.iter().map(|v| v.abs()).sum::<f64>()
}

/// `sign(v) * max(|v| - t, 0)`.
pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Flips `(x, y)` jointly so that `sum(x) >= 0`; on an exact tie the largest
/// magnitude entry of `x` is made positive.
pub fn canonicalize_sign(x: &mut Array1<f64>, y: &mut Array1<f64>) {
    let sum: f64 = x.sum();
    let flip = if sum != 0.0 {
        sum < 0.0
    } else {
        x.iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best })
            < 0.0
    };
    if flip {
        x.mapv_inplace(|v| -v);
        y.mapv_inplace(|v| -v);
    }
}

/// Leading singular triple by power iteration on `H^T H`, started from the
/// normalized column sums. Returns unit `x`, unit `y` and `sigma`.
pub fn dominant_pair(h: ArrayView2<f64>) -> Result<(Array1<f64>, Array1<f64>, f64), SvdError> {
    if frobenius_norm_sq(h) == 0.0 {
        return Err(SvdError::ZeroMatrix);
    }
    let mut y = h.sum_axis(ndarray::Axis(0));
    let mut ny = norm(y.view());
    if ny == 0.0 || !ny.is_finite() {
        let j = (0..h.ncols())
            .max_by(|&a, &b| {
                let na = norm(h.column(a));
                let nb = norm(h.column(b));
                na.total_cmp(&nb)
            })
            .expect("matrix has columns");
        y = Array1::zeros(h.ncols());
        y[j] = 1.0;
        ny = 1.0;
    }
    y /= ny;

    for _ in 0..POWER_MAX_ITERATIONS {
        let z = h.t().dot(&h.dot(&y));
        let nz = norm(z.view());
        if nz == 0.0 {
            // Start vector lies in the null space; no other direction to try.
            break;
        }
        let next = z / nz;
        let step = norm((&next - &y).view());
        y = next;
        if step < POWER_TOLERANCE {
            break;
        }
    }
    let hy = h.dot(&y);
    let sigma = norm(hy.view());
    if sigma == 0.0 {
        return Err(SvdError::ZeroMatrix);
    }
    let mut x = hy / sigma;
    canonicalize_sign(&mut x, &mut y);
    Ok((x, y, sigma))
}

/// Exact minimizer of `||H - x y^T||_F^2 + alpha ||x||_1` over `x`.
pub fn update_x(h: ArrayView2<f64>, y: ArrayView1<f64>, alpha: f64) -> Result<Array1<f64>, SvdError> {
    if h.ncols() != y.len() {
        return Err(SvdError::Dimension(format!(
            "H has {} columns but y has {} entries",
            h.ncols(),
            y.len()
        )));
    }
    let y_sq = y.dot(&y);
    if y_sq == 0.0 {
        return Err(SvdError::ZeroVector("y"));
    }
    let g = h.dot(&y);
    Ok(g.mapv(|gi| soft_threshold(gi, alpha / 2.0) / y_sq))
}

/// `H^T x / ||x||`.
pub fn update_y(h: ArrayView2<f64>, x: ArrayView1<f64>) -> Result<Array1<f64>, SvdError> {
    if h.nrows() != x.len() {
        return Err(SvdError::Dimension(format!(
            "H has {} rows but x has {} entries",
            h.nrows(),
            x.len()
        )));
    }
    let nx = norm(x);
    if nx == 0.0 {
        return Err(SvdError::ZeroVector("x"));
    }
    Ok(h.t().dot(&x) / nx)
}

/// Sparse rank-one factor of `h`.
pub fn procedure(h: ArrayView2<f64>, config: &SparseSvdConfig) -> Result<SparseFactor, SvdError> {
    config.validate()?;
    let (mut x, mut y, _) = dominant_pair(h)?;
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iterations {
        iterations += 1;
        let x_next = update_x(h, y.view(), config.alpha)?;
        trace.push(penalized_objective(h, x_next.view(), y.view(), config.alpha));
        if x_next.iter().all(|&v| v == 0.0) {
            let ny = norm(y.view());
            return Ok(SparseFactor {
                x: x_next,
                y: y / ny,
                sigma: 0.0,
                iterations,
                converged: false,
                zero_solution: true,
                objective_trace: trace,
            });
        }
        let step = norm((&x_next - &x).view());
        y = update_y(h, x_next.view())?;
        x = x_next;
        if step < config.epsilon {
            converged = true;
            break;
        }
    }

    let nx = norm(x.view());
    let ny = norm(y.view());
    if ny == 0.0 {
        return Err(SvdError::ZeroVector("y"));
    }
    let mut x1 = x / nx;
    let mut y1 = y / ny;
    canonicalize_sign(&mut x1, &mut y1);
    let mut sigma = x1.dot(&h.dot(&y1));
    if sigma < 0.0 {
        // Only possible when the canonical sign of x disagrees with the
        // orientation of y; report the factor with a non-negative weight.
        y1.mapv_inplace(|v| -v);
        sigma = -sigma;
    }
    Ok(SparseFactor {
        x: x1,
        y: y1,
        sigma,
        iterations,
        converged,
        zero_solution: false,
        objective_trace: trace,
    })
}
