//! Voltage at a connection point as a linear term in net power plus a signed,
//! weighted combination of gamma variables:
//!
//! ```text
//! v - v_ref = beta p + sum_k (pi[k,+] u[k,+] - pi[k,-] u[k,-])
//! ```
//!
//! `beta` is the no-intercept least-squares slope. Each cluster's residual
//! cells are split by sign, the weights `pi` are the subset sizes over the
//! total, and every `u[k,s]` is a gamma fit to `|residual| / pi[k,s]`.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::ArrayView2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DayMatrix;
use crate::gamma_mle::{self, GammaError, GammaParams};
use crate::seed;

/// Smallest Monte-Carlo sample accepted by [`build_composite`].
pub const MIN_COMPOSITE_SAMPLES: usize = 10_000;
const CHUNK: usize = 1 << 16;
const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("all net powers are zero; the regression slope is undefined")]
    AllZeroPower,
    #[error("cluster {cluster} references day {day}, but only {days} days exist")]
    Index {
        cluster: usize,
        day: usize,
        days: usize,
    },
    #[error("gamma fit of subset ({cluster}, {sign}) failed: {source}")]
    Fit {
        cluster: usize,
        sign: Sign,
        #[source]
        source: GammaError,
    },
    #[error("clusters contain no data cells")]
    NoData,
    #[error("invalid model: {0}")]
    Invalid(String),
    #[error("composite distribution needs at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn of_residual(r: f64) -> Sign {
        if r >= 0.0 {
            Sign::Plus
        } else {
            Sign::Minus
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }
}

impl fmt::Display for Sign {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sign::Plus => "+",
            Sign::Minus => "-",
        })
    }
}

/// One signed gamma term. `cluster` is 1-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub cluster: usize,
    pub sign: Sign,
    pub weight: f64,
    pub params: Option<GammaParams>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageModel {
    pub beta: f64,
    /// Voltage subtracted before regression; zero models raw voltage.
    pub reference_voltage: f64,
    pub components: Vec<Component>,
}

impl VoltageModel {
    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if !self.beta.is_finite() || !self.reference_voltage.is_finite() {
            return Err(ModelError::Invalid("non-finite slope or reference".into()));
        }
        for c in &self.components {
            if !(c.weight >= 0.0 && c.weight <= 1.0) {
                return Err(ModelError::Invalid(format!(
                    "weight of ({}, {}) is {}",
                    c.cluster, c.sign, c.weight
                )));
            }
            if (c.weight == 0.0) != c.params.is_none() {
                return Err(ModelError::Invalid(format!(
                    "component ({}, {}) must have parameters exactly when its weight is positive",
                    c.cluster, c.sign
                )));
            }
        }
        let sum = self.weight_sum();
        if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(ModelError::Invalid(format!("weights sum to {sum}")));
        }
        Ok(())
    }

    pub fn component(&self, cluster: usize, sign: Sign) -> Option<&Component> {
        self.components
            .iter()
            .find(|c| c.cluster == cluster && c.sign == sign)
    }

    fn active(&self) -> impl Iterator<Item = (&Component, &GammaParams)> {
        self.components
            .iter()
            .filter_map(|c| c.params.as_ref().map(|p| (c, p)))
    }
}

fn check_same_shape(p: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<(), ModelError> {
    if p.dim() != v.dim() {
        return Err(ModelError::Shape(format!(
            "power is {:?}, voltage is {:?}",
            p.dim(),
            v.dim()
        )));
    }
    Ok(())
}

/// `sum(v p) / sum(p^2)` over all cells.
pub fn fit_beta(p: ArrayView2<f64>, v: ArrayView2<f64>) -> Result<f64, ModelError> {
    check_same_shape(p, v)?;
    let pp: f64 = p.iter().map(|x| x * x).sum();
    if pp == 0.0 {
        return Err(ModelError::AllZeroPower);
    }
    let vp: f64 = p.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    Ok(vp / pp)
}

/// Raw residual magnitudes `|v - beta p|` keyed by (1-based cluster, sign).
/// Every key is present, possibly with an empty list.
pub type Partition = BTreeMap<(usize, Sign), Vec<f64>>;

pub fn partition_residuals(
    p: ArrayView2<f64>,
    v: ArrayView2<f64>,
    beta: f64,
    clusters: &[Vec<usize>],
) -> Result<Partition, ModelError> {
    check_same_shape(p, v)?;
    let days = p.nrows();
    let mut out = Partition::new();
    for (idx, days_in_cluster) in clusters.iter().enumerate() {
        let k = idx + 1;
        let mut plus = Vec::new();
        let mut minus = Vec::new();
        for &day in days_in_cluster {
            if day >= days {
                return Err(ModelError::Index {
                    cluster: k,
                    day,
                    days,
                });
            }
            for (pj, vj) in p.row(day).iter().zip(v.row(day).iter()) {
                let r = vj - beta * pj;
                match Sign::of_residual(r) {
                    Sign::Plus => plus.push(r.abs()),
                    Sign::Minus => minus.push(r.abs()),
                }
            }
        }
        out.insert((k, Sign::Plus), plus);
        out.insert((k, Sign::Minus), minus);
    }
    Ok(out)
}

/// Fits slope, weights and gamma terms for one consumer. `clusters` holds
/// that consumer's day indices per cluster, remainder last.
pub fn fit_model(
    p: &DayMatrix,
    v: &DayMatrix,
    clusters: &[Vec<usize>],
    reference_voltage: f64,
) -> Result<VoltageModel, ModelError> {
    let rise = v.offset(reference_voltage);
    let beta = fit_beta(p.values(), rise.values())?;
    let partition = partition_residuals(p.values(), rise.values(), beta, clusters)?;
    let total: usize = partition.values().map(Vec::len).sum();
    if total == 0 {
        return Err(ModelError::NoData);
    }
    let components = partition
        .into_par_iter()
        .map(|((cluster, sign), raw)| {
            let count = raw.len();
            if count == 0 {
                return Ok(Component {
                    cluster,
                    sign,
                    weight: 0.0,
                    params: None,
                    sample_count: 0,
                });
            }
            let weight = count as f64 / total as f64;
            let scaled: Vec<f64> = raw.iter().map(|r| r / weight).collect();
            let params = gamma_mle::fit_gamma(&scaled).map_err(|source| ModelError::Fit {
                cluster,
                sign,
                source,
            })?;
            Ok(Component {
                cluster,
                sign,
                weight,
                params: Some(params),
                sample_count: count,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(VoltageModel {
        beta,
        reference_voltage,
        components,
    })
}

/// `v - v_ref - beta p` for every cell, row-major.
pub fn residuals(p: &DayMatrix, v: &DayMatrix, model: &VoltageModel) -> Result<Vec<f64>, ModelError> {
    check_same_shape(p.values(), v.values())?;
    Ok(p.values()
        .iter()
        .zip(v.values().iter())
        .map(|(pj, vj)| vj - model.reference_voltage - model.beta * pj)
        .collect())
}

/// How the gamma terms are combined into one draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CompositeMode {
    /// Every term is drawn independently and the weighted terms are summed.
    #[default]
    Sum,
    /// One term is chosen with probability equal to its weight and
    /// contributes `sign * weight * u`.
    Mixture,
}

/// Sorted Monte-Carlo sample of the residual variable.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeDistribution {
    samples: Vec<f64>,
    seed: Option<u64>,
    mode: Option<CompositeMode>,
    bandwidth: f64,
}

impl CompositeDistribution {
    /// Wraps an arbitrary non-empty sample. Non-finite values are rejected.
    pub fn from_samples(mut samples: Vec<f64>) -> Result<Self, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::TooFewSamples { min: 1, got: 0 });
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(ModelError::Invalid("non-finite sample".into()));
        }
        samples.sort_by(f64::total_cmp);
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        let bandwidth = 1.06 * var.sqrt() * n.powf(-0.2);
        Ok(Self {
            samples,
            seed: None,
            mode: None,
            bandwidth,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn mode(&self) -> Option<CompositeMode> {
        self.mode
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn min(&self) -> f64 {
        self.samples[0]
    }

    pub fn max(&self) -> f64 {
        self.samples[self.samples.len() - 1]
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len() as f64
    }

    /// Number of samples `<= z`.
    pub fn rank(&self, z: f64) -> usize {
        self.samples.partition_point(|&s| s <= z)
    }

    /// Right-continuous empirical CDF.
    pub fn cdf(&self, z: f64) -> f64 {
        self.rank(z) as f64 / self.samples.len() as f64
    }

    /// Centred difference of the empirical CDF over the Silverman bandwidth,
    /// floored at 1e-12.
    pub fn cdf_derivative(&self, z: f64) -> f64 {
        let h = self.bandwidth;
        if h <= 0.0 {
            // Point mass: the density is either zero or unbounded.
            return if (z - self.samples[0]).abs() == 0.0 {
                f64::MAX
            } else {
                1e-12
            };
        }
        ((self.cdf(z + h) - self.cdf(z - h)) / (2.0 * h)).max(1e-12)
    }

    /// Returns a copy with every sample mapped by `f`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self, ModelError> {
        let mut out = Self::from_samples(self.samples.iter().map(|&s| f(s)).collect())?;
        out.seed = self.seed;
        out.mode = self.mode;
        Ok(out)
    }
}

fn draw<R: Rng>(rng: &mut R, model: &VoltageModel, mode: CompositeMode) -> f64 {
    match mode {
        CompositeMode::Sum => model
            .active()
            .map(|(c, p)| c.sign.factor() * c.weight * gamma_mle::sample_gamma_with(rng, p))
            .sum(),
        CompositeMode::Mixture => {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut chosen = None;
            for (c, p) in model.active() {
                acc += c.weight;
                chosen = Some((c, p));
                if u < acc {
                    break;
                }
            }
            let (c, p) = chosen.expect("a validated model has an active component");
            c.sign.factor() * c.weight * gamma_mle::sample_gamma_with(rng, p)
        }
    }
}

/// Monte-Carlo sample of the model's residual variable. Draws are produced in
/// fixed-size chunks, each with its own stream derived from `seed`.
pub fn build_composite(
    model: &VoltageModel,
    sample_count: usize,
    seed: u64,
    mode: CompositeMode,
) -> Result<CompositeDistribution, ModelError> {
    model.validate()?;
    if sample_count < MIN_COMPOSITE_SAMPLES {
        return Err(ModelError::TooFewSamples {
            min: MIN_COMPOSITE_SAMPLES,
            got: sample_count,
        });
    }
    let chunks = sample_count.div_ceil(CHUNK);
    let samples: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = seed::stream(seed, "voltage_model/composite", &[c as u64]);
            let len = CHUNK.min(sample_count - c * CHUNK);
            (0..len).map(move |_| draw(&mut rng, model, mode)).collect::<Vec<_>>()
        })
        .collect();
    let mut dist = CompositeDistribution::from_samples(samples)?;
    dist.seed = Some(seed);
    dist.mode = Some(mode);
    Ok(dist)
}

/// Order-statistic pairs `(a_(i), b_(i))`.
pub fn qq_points(sample_a: &[f64], sample_b: &[f64]) -> Result<Vec<(f64, f64)>, ModelError> {
    if sample_a.len() != sample_b.len() {
        return Err(ModelError::LengthMismatch(sample_a.len(), sample_b.len()));
    }
    if sample_a.len() < 2 {
        return Err(ModelError::TooFewSamples {
            min: 2,
            got: sample_a.len(),
        });
    }
    let mut a = sample_a.to_vec();
    let mut b = sample_b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(a.into_iter().zip(b).collect())
}

/// Largest `|y - x|` among Q-Q points whose rank fraction lies in
/// `[lower, upper]`.
pub fn qq_max_deviation(points: &[(f64, f64)], lower: f64, upper: f64) -> f64 {
    let n = points.len();
    points
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let q = (*i as f64 + 0.5) / n as f64;
            q >= lower && q <= upper
        })
        .map(|(_, (x, y))| (y - x).abs())
        .fold(0.0, f64::max)
}

/// Interquartile range of a sorted sample.
pub fn interquartile_range(sorted: &[f64]) -> f64 {
    let at = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    at(0.75) - at(0.25)
}

/// Two-sample Kolmogorov-Smirnov statistic of two sorted samples.
pub fn ks_distance(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let z = a[i].min(b[j]);
        while i < a.len() && a[i] <= z {
            i += 1;
        }
        while j < b.len() && b[j] <= z {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Unit;
    use approx::assert_relative_eq;
    use ndarray::{array, Array2};

    fn day(values: Array2<f64>, unit: Unit) -> DayMatrix {
        DayMatrix::new(values, unit).unwrap()
    }

    #[test]
    fn beta_of_proportional_data() {
        let p = array![[1.0, -2.0, 0.5], [3.0, 0.0, -1.0]];
        let v = p.mapv(|x| 2.0 * x);
        assert_relative_eq!(fit_beta(p.view(), v.view()).unwrap(), 2.0, epsilon = 1e-15);
        let p = array![[1.0, -1.0]];
        let v = array![[1.0, 1.0]];
        assert_eq!(fit_beta(p.view(), v.view()).unwrap(), 0.0);
        let z = Array2::<f64>::zeros((2, 2));
        assert_eq!(fit_beta(z.view(), z.view()).unwrap_err(), ModelError::AllZeroPower);
    }

    #[test]
    fn beta_minimizes_squared_residuals() {
        let p = array![[1.0, -2.0, 0.5], [3.0, 0.1, -1.0]];
        let v = array![[0.3, 0.1, -0.2], [0.05, 0.4, 0.2]];
        let beta = fit_beta(p.view(), v.view()).unwrap();
        let sse = |b: f64| -> f64 { p.iter().zip(v.iter()).map(|(x, y)| (y - b * x).powi(2)).sum() };
        assert!(sse(beta + 1e-3) > sse(beta));
        assert!(sse(beta - 1e-3) > sse(beta));
    }

    #[test]
    fn zero_residual_goes_to_plus() {
        let p = array![[1.0, 1.0]];
        let v = array![[2.0, 1.0]];
        let part = partition_residuals(p.view(), v.view(), 2.0, &[vec![0]]).unwrap();
        assert_eq!(part[&(1, Sign::Plus)], vec![0.0]);
        assert_eq!(part[&(1, Sign::Minus)], vec![1.0]);
    }

    #[test]
    fn single_cluster_partitions_every_cell() {
        let p = array![[1.0, -1.0, 2.0], [0.5, 0.2, -0.3]];
        let v = array![[0.1, -0.2, 0.3], [-0.4, 0.5, 0.0]];
        let part = partition_residuals(p.view(), v.view(), 0.05, &[vec![0, 1]]).unwrap();
        let n: usize = part.values().map(Vec::len).sum();
        assert_eq!(n, 6);
    }

    #[test]
    fn overlapping_clusters_count_cells_twice() {
        let p = array![[1.0, -1.0], [0.5, 0.2]];
        let v = array![[0.1, -0.2], [-0.4, 0.5]];
        let part = partition_residuals(p.view(), v.view(), 0.0, &[vec![0, 1], vec![1], vec![]]).unwrap();
        let n: usize = part.values().map(Vec::len).sum();
        assert_eq!(n, 6);
        assert_eq!(part.len(), 6);
    }

    #[test]
    fn bad_day_index() {
        let p = array![[1.0, -1.0]];
        let err = partition_residuals(p.view(), p.view(), 0.0, &[vec![3]]).unwrap_err();
        assert!(matches!(err, ModelError::Index { cluster: 1, day: 3, .. }));
    }

    #[test]
    fn planted_signs_are_recovered() {
        let p = array![[1.0, 2.0, -1.0, 0.5]];
        let signs = [1.0, -1.0, -1.0, 1.0];
        let v = Array2::from_shape_fn((1, 4), |(_, j)| -0.01 * p[[0, j]] + signs[j] * 0.003 * (j + 1) as f64);
        let part = partition_residuals(p.view(), v.view(), -0.01, &[vec![0]]).unwrap();
        assert_eq!(part[&(1, Sign::Plus)].len(), 2);
        assert_relative_eq!(part[&(1, Sign::Plus)][1], 0.012, epsilon = 1e-15);
        assert_relative_eq!(part[&(1, Sign::Minus)][0], 0.006, epsilon = 1e-15);
    }

    #[test]
    fn empty_subsets_have_no_parameters() {
        // Cluster 1 is empty, cluster 2 holds every day.
        let p = day(Array2::from_shape_fn((4, 5), |(i, j)| (i + j) as f64 - 3.0), Unit::Kilowatt);
        let v = day(
            Array2::from_shape_fn((4, 5), |(i, j)| 1.0 + 0.01 * (((i * 7 + j * 3) % 5) as f64 - 2.2)),
            Unit::PerUnitVolt,
        );
        let model = fit_model(&p, &v, &[vec![], vec![0, 1, 2, 3]], 1.0).unwrap();
        model.validate().unwrap();
        let c1 = model.component(1, Sign::Plus).unwrap();
        assert_eq!(c1.weight, 0.0);
        assert!(c1.params.is_none());
        assert_relative_eq!(model.weight_sum(), 1.0, epsilon = 1e-12);
    }

    fn single_component_model(shape: f64, scale: f64) -> VoltageModel {
        VoltageModel {
            beta: 0.0,
            reference_voltage: 0.0,
            components: vec![Component {
                cluster: 1,
                sign: Sign::Plus,
                weight: 1.0,
                params: Some(GammaParams::new(shape, scale).unwrap()),
                sample_count: 10,
            }],
        }
    }

    #[test]
    fn single_component_composite_mean() {
        let m = single_component_model(1.5, 0.003);
        let d = build_composite(&m, 1_000_000, 4, CompositeMode::Sum).unwrap();
        assert!((d.mean() / 0.0045 - 1.0).abs() < 0.01);
        assert!(d.samples().windows(2).all(|w| w[0] <= w[1]));
        let again = build_composite(&m, 1_000_000, 4, CompositeMode::Sum).unwrap();
        assert_eq!(d, again);
        assert!(build_composite(&m, 100, 4, CompositeMode::Sum).is_err());
    }

    #[test]
    fn cdf_edges_and_uniform_median() {
        let mut rng = seed::stream(1, "test", &[]);
        let u: Vec<f64> = (0..100_000).map(|_| rng.random::<f64>()).collect();
        let d = CompositeDistribution::from_samples(u).unwrap();
        assert_eq!(d.cdf(-0.1), 0.0);
        assert_eq!(d.cdf(1.1), 1.0);
        assert!((d.cdf(0.5) - 0.5).abs() < 0.01);
    }

    #[test]
    fn density_at_gamma_mode() {
        let p = GammaParams::new(2.0, 1.0).unwrap();
        let d = CompositeDistribution::from_samples(gamma_mle::sample_gamma(&p, 100_000, 9)).unwrap();
        assert!((d.cdf_derivative(1.0) - (-1.0f64).exp()).abs() < 0.02);
        assert_eq!(d.cdf_derivative(1e6), 1e-12);
    }

    #[test]
    fn qq_basics() {
        let a = vec![0.3, 0.1, 0.2];
        let pts = qq_points(&a, &a).unwrap();
        assert!(pts.iter().all(|(x, y)| x == y));
        let b: Vec<f64> = a.iter().map(|x| 2.0 * x).collect();
        assert!(qq_points(&a, &b).unwrap().iter().all(|(x, y)| *y == 2.0 * x));
        assert!(qq_points(&a, &b[..2]).is_err());
    }

    #[test]
    fn ks_of_identical_and_disjoint() {
        let a = [1.0, 2.0, 3.0];
        assert_eq!(ks_distance(&a, &a), 0.0);
        assert_eq!(ks_distance(&a, &[4.0, 5.0]), 1.0);
        assert_relative_eq!(ks_distance(&[1.0, 2.0], &[1.5, 2.5]), 0.5);
    }
}
