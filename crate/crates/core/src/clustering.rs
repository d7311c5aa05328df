//! Day clustering by repeated sparse rank-one deflation.
//!
//! Each grouping iteration extracts a sparse factor from the current residual,
//! puts every row with a strictly positive left-vector entry into a cluster,
//! and subtracts `sigma * x * y^T`. Rows never picked up land in a final
//! remainder cluster. Clusters may overlap.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::dataset::StackedMatrix;
use crate::sparse_svd::{self, frobenius_norm_sq, procedure, SparseFactor, SparseSvdConfig, SvdError};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error(transparent)]
    Svd(#[from] SvdError),
    #[error("max_clusters must be at least 2, got {0}")]
    TooFewClusters(usize),
    #[error("requested {count} singular values from a {rows}x{cols} matrix")]
    SpectrumCount { count: usize, rows: usize, cols: usize },
}

/// Frobenius bookkeeping for one deflation `H[t+1] = H[t] - sigma x y^T`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeflationStep {
    pub norm_sq_before: f64,
    pub sigma: f64,
    pub norm_sq_after: f64,
}

impl DeflationStep {
    /// Relative violation of `||H[t+1]||^2 = ||H[t]||^2 - sigma^2`.
    pub fn identity_error(&self) -> f64 {
        let predicted = self.norm_sq_before - self.sigma * self.sigma;
        (self.norm_sq_after - predicted).abs() / self.norm_sq_before.max(f64::MIN_POSITIVE)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSet {
    /// Row sets of the stacked matrix; the last one is the remainder.
    pub clusters: Vec<BTreeSet<usize>>,
    /// Right vectors of the grouping iterations, one per non-remainder cluster.
    pub bases: Vec<Array1<f64>>,
    pub factors: Vec<SparseFactor>,
    /// Factor of the residual left after grouping stopped. Reported as an
    /// additional basis but not used for grouping.
    pub trailing_factor: Option<SparseFactor>,
    pub deflation: Vec<DeflationStep>,
    pub rows: usize,
}

impl ClusterSet {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    /// Grouping bases followed by the trailing basis, if any.
    pub fn reported_bases(&self) -> Vec<ArrayView1<'_, f64>> {
        self.bases
            .iter()
            .map(|b| b.view())
            .chain(self.trailing_factor.iter().map(|f| f.y.view()))
            .collect()
    }

    /// Day indices of one consumer's block, per cluster.
    pub fn for_consumer(&self, stacked: &StackedMatrix, consumer: usize) -> Vec<Vec<usize>> {
        let block = stacked.blocks()[consumer].clone();
        self.clusters
            .iter()
            .map(|c| c.range(block.clone()).map(|&r| r - block.start).collect())
            .collect()
    }

    pub fn is_exhaustive(&self) -> bool {
        let covered: BTreeSet<usize> = self.clusters.iter().flatten().copied().collect();
        covered.len() == self.rows && covered.iter().all(|&r| r < self.rows)
    }
}

/// Rows whose entry in `x` is strictly positive.
pub fn assign_cluster(x: ArrayView1<f64>) -> BTreeSet<usize> {
    x.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(i, _)| i)
        .collect()
}

fn deflate(h: &mut Array2<f64>, factor: &SparseFactor) {
    for (i, mut row) in h.rows_mut().into_iter().enumerate() {
        let xi = factor.sigma * factor.x[i];
        if xi != 0.0 {
            row.scaled_add(-xi, &factor.y);
        }
    }
}

pub fn run_clustering(
    h: &StackedMatrix,
    config: &SparseSvdConfig,
    max_clusters: usize,
) -> Result<ClusterSet, ClusterError> {
    cluster_rows(h.values(), config, max_clusters)
}

/// Clustering on a bare matrix; [`run_clustering`] is the stacked-data entry.
pub fn cluster_rows(
    h: ArrayView2<f64>,
    config: &SparseSvdConfig,
    max_clusters: usize,
) -> Result<ClusterSet, ClusterError> {
    if max_clusters < 2 {
        return Err(ClusterError::TooFewClusters(max_clusters));
    }
    config.validate()?;
    let rows = h.nrows();
    let mut residual = h.to_owned();
    let mut clusters = Vec::new();
    let mut bases = Vec::new();
    let mut factors = Vec::new();
    let mut deflation = Vec::new();
    let mut capped = true;

    while clusters.len() < max_clusters - 1 {
        if frobenius_norm_sq(residual.view()) == 0.0 {
            capped = false;
            break;
        }
        let factor = procedure(residual.view(), config)?;
        if factor.zero_solution {
            capped = false;
            break;
        }
        clusters.push(assign_cluster(factor.x.view()));
        bases.push(factor.y.clone());
        let single = factor.support_size() <= 1;
        let before = frobenius_norm_sq(residual.view());
        deflate(&mut residual, &factor);
        deflation.push(DeflationStep {
            norm_sq_before: before,
            sigma: factor.sigma,
            norm_sq_after: frobenius_norm_sq(residual.view()),
        });
        factors.push(factor);
        if single {
            capped = false;
            break;
        }
    }

    let trailing_factor = if capped && frobenius_norm_sq(residual.view()) > 0.0 {
        procedure(residual.view(), config)
            .ok()
            .filter(|f| !f.zero_solution)
    } else {
        None
    };

    let covered: BTreeSet<usize> = clusters.iter().flatten().copied().collect();
    clusters.push((0..rows).filter(|r| !covered.contains(r)).collect());

    Ok(ClusterSet {
        clusters,
        bases,
        factors,
        trailing_factor,
        deflation,
        rows,
    })
}

/// Leading `count` singular values by repeated exact deflation.
pub fn singular_spectrum(h: ArrayView2<f64>, count: usize) -> Result<Vec<f64>, ClusterError> {
    let (rows, cols) = h.dim();
    if count > rows.min(cols) {
        return Err(ClusterError::SpectrumCount { count, rows, cols });
    }
    let mut residual = h.to_owned();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        match sparse_svd::dominant_pair(residual.view()) {
            Ok((x, y, sigma)) => {
                let factor = SparseFactor {
                    x,
                    y,
                    sigma,
                    iterations: 0,
                    converged: true,
                    zero_solution: false,
                    objective_trace: Vec::new(),
                };
                deflate(&mut residual, &factor);
                out.push(sigma);
            }
            Err(SvdError::ZeroMatrix) => out.push(0.0),
            Err(e) => return Err(e.into()),
        }
    }
    // Deflation order is already non-increasing up to round-off.
    for i in 1..out.len() {
        if out[i] > out[i - 1] {
            out[i] = out[i - 1];
        }
    }
    Ok(out)
}
