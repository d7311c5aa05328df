//! Load-tap-changer control at a slow timescale of `window_minutes`.
//!
//! The conventional controller divides by the window's reference voltage. The
//! stochastic controller replaces that voltage with `v_ref + beta p(T) + gamma`,
//! where `gamma` is the conditional mean of the model's residual variable over
//! a probability window around the observed residual `v_d`.

use std::ops::Range;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::voltage_model::CompositeDistribution;

pub const DEFAULT_WINDOW_MINUTES: usize = 30;
pub const DEFAULT_DELTA: f64 = 0.05;
/// 32 taps spanning +-10 %.
pub const STANDARD_TAP_STEP: f64 = 0.00625;
pub const MAX_TAPS: i64 = 16;
const DIVISION_FLOOR: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum RegulatorError {
    #[error("invalid RegulatorConfig.{field}: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("voltage at minute {minute} is {value}; voltages must be strictly positive")]
    NonPositiveVoltage { minute: usize, value: f64 },
    #[error("voltage has {voltage} minutes but power has {power}")]
    LengthMismatch { voltage: usize, power: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("composite distribution is empty")]
    EmptyDistribution,
    #[error("stochastic regulation needs a composite distribution")]
    MissingDistribution,
    #[error("no sample lies in ({n1}, {n2}]; delta is too small for the sample resolution")]
    EmptyConditioningSet { n1: f64, n2: f64 },
    #[error("LTC denominator {value} in window starting at minute {start} is too close to zero")]
    DivisionNearZero { start: usize, value: f64 },
}

/// Instant at which `v(T)` and `p(T)` are read for a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceSampling {
    /// Mean over the window that just ended. The first window uses its own
    /// first minute.
    #[default]
    PreviousWindowMean,
    WindowStart,
    /// Mean over the window being regulated. Not causal.
    CurrentWindowMean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegulatorConfig {
    pub window_minutes: usize,
    pub delta: f64,
    pub reference: ReferenceSampling,
    /// Tap quantum; `None` keeps positions continuous.
    pub tap_step: Option<f64>,
    pub beta: f64,
    /// Voltage the composite distribution is centred on.
    pub reference_voltage: f64,
    pub composite: Option<Arc<CompositeDistribution>>,
}

impl Default for RegulatorConfig {
    fn default() -> Self {
        Self {
            window_minutes: DEFAULT_WINDOW_MINUTES,
            delta: DEFAULT_DELTA,
            reference: ReferenceSampling::default(),
            tap_step: None,
            beta: 0.0,
            reference_voltage: 0.0,
            composite: None,
        }
    }
}

impl RegulatorConfig {
    pub fn with_model(
        mut self,
        beta: f64,
        reference_voltage: f64,
        composite: Arc<CompositeDistribution>,
    ) -> Self {
        self.beta = beta;
        self.reference_voltage = reference_voltage;
        self.composite = Some(composite);
        self
    }

    pub fn validate(&self) -> Result<(), RegulatorError> {
        let invalid = |field, message: String| Err(RegulatorError::InvalidConfig { field, message });
        if self.window_minutes < 1 {
            return invalid("window_minutes", "must be at least 1".into());
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return invalid("delta", format!("must be positive and finite, got {}", self.delta));
        }
        if let Some(step) = self.tap_step {
            if !(step > 0.0 && step.is_finite()) {
                return invalid("tap_step", format!("must be positive, got {step}"));
            }
        }
        if !self.beta.is_finite() {
            return invalid("beta", "must be finite".into());
        }
        if !self.reference_voltage.is_finite() {
            return invalid("reference_voltage", "must be finite".into());
        }
        Ok(())
    }
}

/// Quantities behind one window's tap position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowRecord {
    pub start: usize,
    pub end: usize,
    pub v_ref: f64,
    pub p_ref: f64,
    pub ltc: f64,
    pub v_d: Option<f64>,
    pub n1: Option<f64>,
    pub n2: Option<f64>,
    pub gamma: Option<f64>,
    /// The conditioning set was empty and `gamma` fell back to `v_d`.
    pub fallback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulatorTrace {
    pub output_voltage: Vec<f64>,
    pub ltc_position: Vec<f64>,
    /// Start minute of each window.
    pub window_boundaries: Vec<usize>,
    pub windows: Vec<WindowRecord>,
}

impl RegulatorTrace {
    pub fn len(&self) -> usize {
        self.ltc_position.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ltc_position.is_empty()
    }

    pub fn fallback_count(&self) -> usize {
        self.windows.iter().filter(|w| w.fallback).count()
    }
}

fn windows(len: usize, width: usize) -> Vec<Range<usize>> {
    (0..len)
        .step_by(width)
        .map(|s| s..(s + width).min(len))
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn reference_value(x: &[f64], w: usize, spans: &[Range<usize>], rule: ReferenceSampling) -> f64 {
    let span = &spans[w];
    match rule {
        ReferenceSampling::PreviousWindowMean if w == 0 => x[span.start],
        ReferenceSampling::PreviousWindowMean => mean(&x[spans[w - 1].clone()]),
        ReferenceSampling::WindowStart => x[span.start],
        ReferenceSampling::CurrentWindowMean => mean(&x[span.clone()]),
    }
}

fn check_voltage(v: &[f64]) -> Result<(), RegulatorError> {
    if v.is_empty() {
        return Err(RegulatorError::EmptyInput);
    }
    match v.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        Some(minute) => Err(RegulatorError::NonPositiveVoltage {
            minute,
            value: v[minute],
        }),
        None => Ok(()),
    }
}

/// Nearest tap position `1 + k step`, `|k| <= 16`.
pub fn quantize_tap(ltc: f64, step: f64) -> f64 {
    let k = ((ltc - 1.0) / step).round().clamp(-MAX_TAPS as f64, MAX_TAPS as f64);
    1.0 + k * step
}

fn assemble(
    v: &[f64],
    spans: &[Range<usize>],
    records: Vec<WindowRecord>,
    tap_step: Option<f64>,
) -> RegulatorTrace {
    let mut ltc_position = Vec::with_capacity(v.len());
    let mut output_voltage = Vec::with_capacity(v.len());
    let mut records = records;
    for (span, rec) in spans.iter().zip(records.iter_mut()) {
        if let Some(step) = tap_step {
            rec.ltc = quantize_tap(rec.ltc, step);
        }
        for &vt in &v[span.clone()] {
            ltc_position.push(rec.ltc);
            output_voltage.push(rec.ltc * vt);
        }
    }
    RegulatorTrace {
        output_voltage,
        ltc_position,
        window_boundaries: spans.iter().map(|s| s.start).collect(),
        windows: records,
    }
}

/// `LTC = 1 / v(T)` held over each window.
pub fn conventional_regulator(v: &[f64], config: &RegulatorConfig) -> Result<RegulatorTrace, RegulatorError> {
    config.validate()?;
    check_voltage(v)?;
    let spans = windows(v.len(), config.window_minutes);
    let records = spans
        .iter()
        .enumerate()
        .map(|(w, span)| {
            let v_ref = reference_value(v, w, &spans, config.reference);
            WindowRecord {
                start: span.start,
                end: span.end,
                v_ref,
                p_ref: 0.0,
                ltc: 1.0 / v_ref,
                v_d: None,
                n1: None,
                n2: None,
                gamma: None,
                fallback: false,
            }
        })
        .collect();
    Ok(assemble(v, &spans, records, config.tap_step))
}

/// `(n1, n2)` for a probability margin `delta * F'(v_d)` around `F(v_d)`.
pub fn quantile_window(
    dist: &CompositeDistribution,
    v_d: f64,
    delta: f64,
) -> Result<(f64, f64), RegulatorError> {
    if dist.is_empty() {
        return Err(RegulatorError::EmptyDistribution);
    }
    quantile_window_for_margin(dist, v_d, delta * dist.cdf_derivative(v_d))
}

/// `n1 = min{z : F(z) >= F(v_d) - margin}`,
/// `n2 = max{z : F(z) < F(v_d) + margin}`, over samples `z`.
///
/// Bounds are clamped to `[0, 1]`; an upper bound at or past 1 yields the
/// largest sample. If no sample satisfies the upper condition, `n2 = n1`.
pub fn quantile_window_for_margin(
    dist: &CompositeDistribution,
    v_d: f64,
    margin: f64,
) -> Result<(f64, f64), RegulatorError> {
    if dist.is_empty() {
        return Err(RegulatorError::EmptyDistribution);
    }
    let s = dist.samples();
    let n = s.len();
    let f = dist.cdf(v_d);

    let lo = (f - margin).clamp(0.0, 1.0);
    let need = ((lo * n as f64).ceil() as usize).clamp(1, n);
    let n1 = s[need - 1];

    let hi = f + margin;
    let n2 = if hi >= 1.0 {
        s[n - 1]
    } else {
        // Largest sample whose rank stays strictly below hi * n.
        let bound = hi.max(0.0) * n as f64;
        let mut i = (bound.ceil() as usize).min(n);
        let mut found = None;
        while i > 0 {
            let z = s[i - 1];
            if (dist.rank(z) as f64) < bound {
                found = Some(z);
                break;
            }
            i -= 1;
        }
        found.unwrap_or(n1)
    };
    Ok((n1, n2.max(n1)))
}

/// Mean of the samples in `(n1, n2]`.
pub fn conditional_mean(dist: &CompositeDistribution, n1: f64, n2: f64) -> Result<f64, RegulatorError> {
    let s = dist.samples();
    let a = s.partition_point(|&z| z <= n1);
    let b = s.partition_point(|&z| z <= n2);
    if b <= a {
        return Err(RegulatorError::EmptyConditioningSet { n1, n2 });
    }
    Ok(mean(&s[a..b]))
}

/// `LTC = 1 / (v_ref + beta p(T) + gamma)` held over each window. When the
/// conditioning set is empty `gamma` falls back to `v_d`, which reproduces
/// the conventional position for that window.
pub fn stochastic_regulator(
    v: &[f64],
    p: &[f64],
    config: &RegulatorConfig,
) -> Result<RegulatorTrace, RegulatorError> {
    config.validate()?;
    check_voltage(v)?;
    if v.len() != p.len() {
        return Err(RegulatorError::LengthMismatch {
            voltage: v.len(),
            power: p.len(),
        });
    }
    let dist = config.composite.as_deref().ok_or(RegulatorError::MissingDistribution)?;
    if dist.is_empty() {
        return Err(RegulatorError::EmptyDistribution);
    }
    let spans = windows(v.len(), config.window_minutes);
    let mut records = Vec::with_capacity(spans.len());
    for (w, span) in spans.iter().enumerate() {
        let v_ref = reference_value(v, w, &spans, config.reference);
        let p_ref = reference_value(p, w, &spans, config.reference);
        let linear = config.reference_voltage + config.beta * p_ref;
        let v_d = v_ref - linear;
        let (n1, n2) = quantile_window(dist, v_d, config.delta)?;
        let (gamma, fallback) = match conditional_mean(dist, n1, n2) {
            Ok(g) => (g, false),
            Err(RegulatorError::EmptyConditioningSet { .. }) => (v_d, true),
            Err(e) => return Err(e),
        };
        let denom = linear + gamma;
        if !(denom.abs() >= DIVISION_FLOOR) {
            return Err(RegulatorError::DivisionNearZero {
                start: span.start,
                value: denom,
            });
        }
        records.push(WindowRecord {
            start: span.start,
            end: span.end,
            v_ref,
            p_ref,
            ltc: 1.0 / denom,
            v_d: Some(v_d),
            n1: Some(n1),
            n2: Some(n2),
            gamma: Some(gamma),
            fallback,
        });
    }
    Ok(assemble(v, &spans, records, config.tap_step))
}

/// `sum_t |LTC(t) - LTC(t-1)|`.
pub fn ltc_variation(trace: &RegulatorTrace) -> f64 {
    trace
        .ltc_position
        .windows(2)
        .map(|w| (w[1] - w[0]).abs())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn uniform(n: usize) -> CompositeDistribution {
        let mut rng = seed::stream(3, "test", &[]);
        CompositeDistribution::from_samples((0..n).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    fn config(window: usize) -> RegulatorConfig {
        RegulatorConfig {
            window_minutes: window,
            ..RegulatorConfig::default()
        }
    }

    #[test]
    fn constant_input_is_flattened() {
        let t = conventional_regulator(&[1.05; 90], &config(30)).unwrap();
        assert!(t.ltc_position.iter().all(|&l| (l - 1.0 / 1.05).abs() < 1e-15));
        assert!(t.output_voltage.iter().all(|&o| (o - 1.0).abs() < 1e-15));
        let t = conventional_regulator(&[1.0; 7], &config(3)).unwrap();
        assert!(t.ltc_position.iter().all(|&l| l == 1.0));
        assert_eq!(t.window_boundaries, vec![0, 3, 6]);
    }

    #[test]
    fn two_window_ramp_by_hand() {
        let v = [1.00, 1.02, 1.04, 1.06];
        let prev = conventional_regulator(&v, &config(2)).unwrap();
        assert_eq!(prev.ltc_position, vec![1.0, 1.0, 1.0 / 1.01, 1.0 / 1.01]);
        let cfg = RegulatorConfig {
            reference: ReferenceSampling::WindowStart,
            ..config(2)
        };
        let start = conventional_regulator(&v, &cfg).unwrap();
        assert_eq!(start.ltc_position, vec![1.0, 1.0, 1.0 / 1.04, 1.0 / 1.04]);
        let cfg = RegulatorConfig {
            reference: ReferenceSampling::CurrentWindowMean,
            ..config(2)
        };
        let cur = conventional_regulator(&v, &cfg).unwrap();
        assert_eq!(cur.ltc_position[0], 1.0 / 1.01);
        assert_eq!(cur.ltc_position[3], 1.0 / 1.05);
        for (o, (l, x)) in cur.output_voltage.iter().zip(cur.ltc_position.iter().zip(v)) {
            assert_eq!(*o, l * x);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            conventional_regulator(&[1.0, 0.0], &config(1)),
            Err(RegulatorError::NonPositiveVoltage { minute: 1, .. })
        ));
        let err = conventional_regulator(&[1.0], &RegulatorConfig { delta: 0.0, ..config(1) }).unwrap_err();
        assert!(err.to_string().contains("RegulatorConfig.delta"));
        assert!(conventional_regulator(&[1.0], &config(0)).is_err());
        assert_eq!(
            stochastic_regulator(&[1.0], &[0.0], &config(1)).unwrap_err(),
            RegulatorError::MissingDistribution
        );
    }

    #[test]
    fn full_clamp_gives_sample_range() {
        let d = uniform(1000);
        let (n1, n2) = quantile_window_for_margin(&d, 0.5, 2.0).unwrap();
        assert_eq!((n1, n2), (d.min(), d.max()));
        let (n1, _) = quantile_window_for_margin(&d, -1.0, 0.01).unwrap();
        assert_eq!(n1, d.min());
    }

    #[test]
    fn uniform_window() {
        let d = uniform(100_000);
        let (n1, n2) = quantile_window_for_margin(&d, 0.5, 0.1).unwrap();
        assert!((n1 - 0.4).abs() < 0.01, "{n1}");
        assert!((n2 - 0.6).abs() < 0.01, "{n2}");
        assert!(d.cdf(n1) >= d.cdf(0.5) - 0.1);
        assert!(d.cdf(n2) < d.cdf(0.5) + 0.1);
    }

    #[test]
    fn conditional_mean_cases() {
        let d = CompositeDistribution::from_samples(vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(conditional_mean(&d, 1.5, 2.0).unwrap(), 2.0);
        assert_eq!(conditional_mean(&d, 0.0, 4.0).unwrap(), 2.5);
        assert!(matches!(
            conditional_mean(&d, 2.0, 2.0),
            Err(RegulatorError::EmptyConditioningSet { .. })
        ));
    }

    #[test]
    fn point_mass_matches_conventional() {
        let v: Vec<f64> = (0..60).map(|t| 1.03 + 0.0001 * t as f64).collect();
        let p = vec![-2.0; 60];
        let beta = -0.01;
        // Residual fixed at v_d of the first window.
        let v_d = v[0] - beta * p[0];
        let spread: Vec<f64> = (0..20_000).map(|i| v_d + 1e-9 * (i as f64 / 20_000.0 - 0.5)).collect();
        let dist = Arc::new(CompositeDistribution::from_samples(spread).unwrap());
        let cfg = RegulatorConfig {
            reference: ReferenceSampling::WindowStart,
            ..config(60)
        }
        .with_model(beta, 0.0, dist);
        let s = stochastic_regulator(&v, &p, &cfg).unwrap();
        let c = conventional_regulator(&v, &cfg).unwrap();
        assert_relative_eq!(s.ltc_position[0], c.ltc_position[0], epsilon = 1e-8);
    }

    #[test]
    fn variation_by_hand() {
        let trace = |ltc: Vec<f64>| RegulatorTrace {
            output_voltage: ltc.clone(),
            ltc_position: ltc,
            window_boundaries: vec![0],
            windows: Vec::new(),
        };
        assert_eq!(ltc_variation(&trace(vec![1.0; 5])), 0.0);
        assert_relative_eq!(ltc_variation(&trace(vec![1.0, 1.1, 1.0])), 0.2, epsilon = 1e-15);
    }

    #[test]
    fn taps_are_quantized_and_bounded() {
        assert_relative_eq!(quantize_tap(0.97, STANDARD_TAP_STEP), 1.0 - 5.0 * STANDARD_TAP_STEP);
        assert_relative_eq!(quantize_tap(0.5, STANDARD_TAP_STEP), 0.9);
        let cfg = RegulatorConfig {
            tap_step: Some(STANDARD_TAP_STEP),
            ..config(2)
        };
        let t = conventional_regulator(&[1.03, 1.03, 1.03], &cfg).unwrap();
        assert!(t.ltc_position.iter().all(|&l| l == quantize_tap(1.0 / 1.03, STANDARD_TAP_STEP)));
    }
}
