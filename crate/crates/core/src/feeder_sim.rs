//! Synthetic per-minute net power and PCC voltage on a radial feeder.
//!
//! Consumers sit on a chain of line segments, ordered from the distribution
//! transformer outwards. Bus voltages follow the squared-magnitude recursion
//!
//! ```text
//! V[k+1]^2 = V[k]^2 - 2 (R[k] * P_down[k] + X[k] * Q_down[k])
//! ```
//!
//! where `P_down[k]` is the total net power of every consumer beyond segment
//! `k`. Load and PV attenuation are driven by per-consumer Markov chains.

use ndarray::Array2;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DayMatrix, Unit};
use crate::seed;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("non-positive squared voltage {value} at bus {bus}{}", location(*.day, *.minute))]
    NonPositiveSquaredVoltage {
        bus: usize,
        value: f64,
        day: Option<usize>,
        minute: Option<usize>,
    },
    #[error("length mismatch: expected {expected}, got {actual} ({what})")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("cumulative impedances must be distinct and positive: {0}")]
    NonMonotonic(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("invalid process parameters for consumer {consumer}: {message}")]
    InvalidProcess { consumer: usize, message: String },
    #[error("invalid simulation request: {0}")]
    InvalidRequest(String),
}

fn location(day: Option<usize>, minute: Option<usize>) -> String {
    match (day, minute) {
        (Some(d), Some(m)) => format!(" (day {d}, minute {m})"),
        _ => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineSegment {
    pub resistance_pu: f64,
    pub reactance_pu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Consumer {
    pub id: String,
    pub pv_capacity_kw: f64,
}

/// A radial chain: segment `k` feeds consumer `k` and everything beyond it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeederTopology {
    segments: Vec<LineSegment>,
    consumers: Vec<Consumer>,
    source_voltage_pu: f64,
    base_power_kva: f64,
    /// Line compensator rating. Carried for completeness, never dispatched.
    reactive_compensator_kvar: Option<f64>,
}

impl FeederTopology {
    pub const DEFAULT_BASE_POWER_KVA: f64 = 10.0;
    pub const DEFAULT_BASE_VOLTAGE_V: f64 = 240.0;

    pub fn new(
        segments: Vec<LineSegment>,
        consumers: Vec<Consumer>,
        source_voltage_pu: f64,
        base_power_kva: f64,
    ) -> Result<Self, SimError> {
        let topology = Self {
            segments,
            consumers,
            source_voltage_pu,
            base_power_kva,
            reactive_compensator_kvar: None,
        };
        topology.validate()?;
        Ok(topology)
    }

    pub fn with_reactive_compensator(mut self, kvar: Option<f64>) -> Self {
        self.reactive_compensator_kvar = kvar;
        self
    }

    /// Builds a chain from each consumer's total impedance to the transformer,
    /// given in ohms. Consumers are reordered by ascending impedance, i.e.
    /// electrical distance from the transformer.
    pub fn from_cumulative_ohms(
        consumers: &[(Consumer, f64, f64)],
        base_voltage_v: f64,
        base_power_kva: f64,
        source_voltage_pu: f64,
    ) -> Result<Self, SimError> {
        if base_voltage_v <= 0.0 || !base_voltage_v.is_finite() {
            return Err(SimError::InvalidTopology(format!(
                "base voltage must be positive, got {base_voltage_v}"
            )));
        }
        let mut ordered: Vec<_> = consumers.to_vec();
        ordered.sort_by(|a, b| a.1.total_cmp(&b.1));
        let z_base = base_voltage_v * base_voltage_v / (base_power_kva * 1e3);
        let resistances: Vec<f64> = ordered.iter().map(|c| c.1).collect();
        let r_segments = segment_impedances_from_cumulative(&resistances)?;
        // Reactances follow the resistance ordering and may be zero.
        let mut x_prev = 0.0;
        let mut segments = Vec::with_capacity(ordered.len());
        for (c, r) in ordered.iter().zip(&r_segments) {
            let dx = c.2 - x_prev;
            if dx < 0.0 {
                return Err(SimError::InvalidTopology(format!(
                    "cumulative reactance of {} decreases along the feeder",
                    c.0.id
                )));
            }
            x_prev = c.2;
            segments.push(LineSegment {
                resistance_pu: r / z_base,
                reactance_pu: dx / z_base,
            });
        }
        Self::new(
            segments,
            ordered.into_iter().map(|c| c.0).collect(),
            source_voltage_pu,
            base_power_kva,
        )
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let n = self.consumers.len();
        if n == 0 {
            return Err(SimError::InvalidTopology("no consumers".into()));
        }
        if self.segments.len() != n {
            return Err(SimError::LengthMismatch {
                what: "segments per consumer",
                expected: n,
                actual: self.segments.len(),
            });
        }
        for (k, s) in self.segments.iter().enumerate() {
            let ok = |v: f64| v.is_finite() && v >= 0.0;
            if !ok(s.resistance_pu) || !ok(s.reactance_pu) {
                return Err(SimError::InvalidTopology(format!(
                    "segment {k} has negative or non-finite impedance"
                )));
            }
        }
        if !(self.source_voltage_pu > 0.0 && self.source_voltage_pu.is_finite()) {
            return Err(SimError::InvalidTopology(
                "source voltage must be positive".into(),
            ));
        }
        if !(self.base_power_kva > 0.0 && self.base_power_kva.is_finite()) {
            return Err(SimError::InvalidTopology("base power must be positive".into()));
        }
        for c in &self.consumers {
            if !(c.pv_capacity_kw >= 0.0 && c.pv_capacity_kw.is_finite()) {
                return Err(SimError::InvalidTopology(format!(
                    "consumer {} has invalid PV capacity",
                    c.id
                )));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[LineSegment] {
        &self.segments
    }

    pub fn consumers(&self) -> &[Consumer] {
        &self.consumers
    }

    pub fn len(&self) -> usize {
        self.consumers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.consumers.is_empty()
    }

    pub fn source_voltage_pu(&self) -> f64 {
        self.source_voltage_pu
    }

    pub fn base_power_kva(&self) -> f64 {
        self.base_power_kva
    }

    pub fn reactive_compensator_kvar(&self) -> Option<f64> {
        self.reactive_compensator_kvar
    }

    /// Total (R, X) between consumer `k` and the source.
    pub fn cumulative_impedance(&self, k: usize) -> (f64, f64) {
        self.segments[..=k].iter().fold((0.0, 0.0), |(r, x), s| {
            (r + s.resistance_pu, x + s.reactance_pu)
        })
    }
}

/// First differences of cumulative impedances sorted by electrical distance.
pub fn segment_impedances_from_cumulative(cumulative: &[f64]) -> Result<Vec<f64>, SimError> {
    if cumulative.is_empty() {
        return Err(SimError::NonMonotonic("empty input".into()));
    }
    let mut sorted = cumulative.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] <= 0.0 || !sorted.iter().all(|z| z.is_finite()) {
        return Err(SimError::NonMonotonic(format!(
            "impedances must be positive and finite, got {}",
            sorted[0]
        )));
    }
    let mut out = Vec::with_capacity(sorted.len());
    let mut prev = 0.0;
    for &z in &sorted {
        if z <= prev {
            return Err(SimError::NonMonotonic(format!(
                "two consumers share cumulative impedance {z}"
            )));
        }
        out.push(z - prev);
        prev = z;
    }
    Ok(out)
}

/// Consumer PCC voltages (per unit) for one instant of net powers (kW) and
/// reactive powers (kVAr). Positive power is consumption.
pub fn solve_feeder_voltages(
    topology: &FeederTopology,
    net_powers_kw: &[f64],
    reactive_powers_kvar: &[f64],
) -> Result<Vec<f64>, SimError> {
    let mut out = vec![0.0; topology.len()];
    solve_into(topology, net_powers_kw, reactive_powers_kvar, &mut out)?;
    Ok(out)
}

fn solve_into(
    topology: &FeederTopology,
    net_powers_kw: &[f64],
    reactive_powers_kvar: &[f64],
    out: &mut [f64],
) -> Result<(), SimError> {
    let n = topology.len();
    for (what, len) in [("net powers", net_powers_kw.len()), ("reactive powers", reactive_powers_kvar.len())] {
        if len != n {
            return Err(SimError::LengthMismatch {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    let base = topology.base_power_kva;
    let mut p_down: f64 = net_powers_kw.iter().sum::<f64>() / base;
    let mut q_down: f64 = reactive_powers_kvar.iter().sum::<f64>() / base;
    let mut v_sq = topology.source_voltage_pu * topology.source_voltage_pu;
    for k in 0..n {
        let seg = topology.segments[k];
        v_sq -= 2.0 * (seg.resistance_pu * p_down + seg.reactance_pu * q_down);
        if v_sq <= 0.0 || !v_sq.is_finite() {
            return Err(SimError::NonPositiveSquaredVoltage {
                bus: k + 1,
                value: v_sq,
                day: None,
                minute: None,
            });
        }
        out[k] = v_sq.sqrt();
        p_down -= net_powers_kw[k] / base;
        q_down -= reactive_powers_kvar[k] / base;
    }
    Ok(())
}

/// Stochastic drivers of one consumer's net power.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerProcessParams {
    pub load_mean_kw: f64,
    /// Load multipliers of `load_mean_kw`, one per Markov state.
    pub load_levels: Vec<f64>,
    pub load_transition: Vec<Vec<f64>>,
    /// Clear-sky output per kW of installed capacity, one value per minute.
    pub clear_sky_profile: Vec<f64>,
    /// Fraction of clear-sky output delivered in each cloud state.
    pub cloud_levels: Vec<f64>,
    pub cloud_transition: Vec<Vec<f64>>,
    pub seed: u64,
    /// Consumers sharing a group follow one cloud trajectory per day; `None`
    /// gives the consumer its own chain.
    #[serde(default)]
    pub cloud_group: Option<u64>,
}

impl ConsumerProcessParams {
    pub const DEFAULT_LOAD_LEVELS: [f64; 5] = [0.3, 0.6, 1.0, 1.4, 1.7];
    pub const DEFAULT_CLOUD_LEVELS: [f64; 3] = [1.0, 0.6, 0.2];

    /// Five load states and three cloud states with sticky transitions.
    pub fn with_defaults(load_mean_kw: f64, clear_sky_profile: Vec<f64>, seed: u64) -> Self {
        Self {
            load_mean_kw,
            load_levels: Self::DEFAULT_LOAD_LEVELS.to_vec(),
            load_transition: sticky_transition(5, 0.97),
            clear_sky_profile,
            cloud_levels: Self::DEFAULT_CLOUD_LEVELS.to_vec(),
            cloud_transition: sticky_transition(3, 0.98),
            seed,
            cloud_group: None,
        }
    }

    pub fn validate(&self, consumer: usize, minutes: usize) -> Result<(), SimError> {
        let fail = |message: String| SimError::InvalidProcess { consumer, message };
        if !(self.load_mean_kw >= 0.0 && self.load_mean_kw.is_finite()) {
            return Err(fail("load mean must be non-negative".into()));
        }
        check_chain(&self.load_levels, &self.load_transition).map_err(|m| fail(format!("load chain: {m}")))?;
        check_chain(&self.cloud_levels, &self.cloud_transition).map_err(|m| fail(format!("cloud chain: {m}")))?;
        if self.load_levels.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(fail("load levels must be non-negative".into()));
        }
        if self.cloud_levels.iter().any(|&a| !(0.0..=1.0).contains(&a)) {
            return Err(fail("cloud attenuation levels must lie in [0, 1]".into()));
        }
        if self.clear_sky_profile.len() != minutes {
            return Err(fail(format!(
                "clear-sky profile has {} minutes, expected {minutes}",
                self.clear_sky_profile.len()
            )));
        }
        if self.clear_sky_profile.iter().any(|&g| !(g >= 0.0 && g.is_finite())) {
            return Err(fail("clear-sky profile must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_chain(levels: &[f64], transition: &[Vec<f64>]) -> Result<(), String> {
    if levels.is_empty() {
        return Err("no states".into());
    }
    if transition.len() != levels.len() {
        return Err(format!(
            "{} transition rows for {} states",
            transition.len(),
            levels.len()
        ));
    }
    for (i, row) in transition.iter().enumerate() {
        if row.len() != levels.len() {
            return Err(format!("row {i} has {} entries", row.len()));
        }
        if row.iter().any(|&p| !(p >= 0.0 && p.is_finite())) {
            return Err(format!("row {i} has a negative probability"));
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(format!("row {i} sums to {sum}"));
        }
    }
    Ok(())
}

/// Row-stochastic matrix that stays put with probability `stay` and otherwise
/// moves to a neighbouring state.
pub fn sticky_transition(states: usize, stay: f64) -> Vec<Vec<f64>> {
    (0..states)
        .map(|i| {
            let mut row = vec![0.0; states];
            if states == 1 {
                row[0] = 1.0;
                return row;
            }
            let neighbours: Vec<usize> = [i.checked_sub(1), (i + 1 < states).then_some(i + 1)]
                .into_iter()
                .flatten()
                .collect();
            row[i] = stay;
            for &j in &neighbours {
                row[j] = (1.0 - stay) / neighbours.len() as f64;
            }
            row
        })
        .collect()
}

/// Half-sine irradiance shape between sunrise and sunset, peaking at 1.
pub fn clear_sky_bell(minutes_per_day: usize, sunrise_minute: usize, sunset_minute: usize) -> Vec<f64> {
    (0..minutes_per_day)
        .map(|t| {
            if t <= sunrise_minute || t >= sunset_minute {
                0.0
            } else {
                let phase = (t - sunrise_minute) as f64 / (sunset_minute - sunrise_minute) as f64;
                (std::f64::consts::PI * phase).sin()
            }
        })
        .collect()
}

/// Per-consumer power (kW) and voltage (pu) matrices, in topology order.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationResult {
    pub power: Vec<DayMatrix>,
    pub voltage: Vec<DayMatrix>,
}

fn next_state<R: Rng>(rng: &mut R, row: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Runs every consumer's load and cloud chains for `days` days and solves the
/// feeder each minute. Each (consumer, day) pair draws from its own stream.
pub fn simulate_days(
    topology: &FeederTopology,
    params: &[ConsumerProcessParams],
    days: usize,
    minutes_per_day: usize,
    seed: u64,
) -> Result<SimulationResult, SimError> {
    topology.validate()?;
    if days < 1 {
        return Err(SimError::InvalidRequest("at least one day is required".into()));
    }
    if minutes_per_day < 2 {
        return Err(SimError::InvalidRequest(
            "at least two minutes per day are required".into(),
        ));
    }
    let n = topology.len();
    if params.len() != n {
        return Err(SimError::LengthMismatch {
            what: "process parameters per consumer",
            expected: n,
            actual: params.len(),
        });
    }
    for (k, p) in params.iter().enumerate() {
        p.validate(k, minutes_per_day)?;
        let Some(g) = p.cloud_group else { continue };
        if let Some(first) = params.iter().find(|q| q.cloud_group == Some(g)) {
            if first.cloud_levels != p.cloud_levels || first.cloud_transition != p.cloud_transition {
                return Err(SimError::InvalidProcess {
                    consumer: k,
                    message: format!("cloud group {g} members must share one cloud chain"),
                });
            }
        }
    }

    // (net power, voltage) rows for each day: [consumer][minute].
    let per_day: Vec<(Vec<Vec<f64>>, Vec<Vec<f64>>)> = (0..days)
        .into_par_iter()
        .map(|day| simulate_one_day(topology, params, minutes_per_day, seed, day))
        .collect::<Result<_, _>>()?;

    let mut power = Vec::with_capacity(n);
    let mut voltage = Vec::with_capacity(n);
    for k in 0..n {
        let p = Array2::from_shape_fn((days, minutes_per_day), |(d, t)| per_day[d].0[k][t]);
        let v = Array2::from_shape_fn((days, minutes_per_day), |(d, t)| per_day[d].1[k][t]);
        power.push(DayMatrix::new(p, Unit::Kilowatt).expect("simulated values are finite"));
        voltage.push(DayMatrix::new(v, Unit::PerUnitVolt).expect("simulated values are finite"));
    }
    Ok(SimulationResult { power, voltage })
}

fn simulate_one_day(
    topology: &FeederTopology,
    params: &[ConsumerProcessParams],
    minutes: usize,
    seed: u64,
    day: usize,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), SimError> {
    let n = topology.len();
    let mut power = vec![vec![0.0; minutes]; n];
    for (k, p) in params.iter().enumerate() {
        let mut rng = seed::stream(seed, "feeder_sim/consumer-day", &[k as u64, p.seed, day as u64]);
        let capacity = topology.consumers[k].pv_capacity_kw;
        let mut cloud_rng = match p.cloud_group {
            Some(g) => seed::stream(seed, "feeder_sim/cloud-group-day", &[g, day as u64]),
            None => seed::stream(seed, "feeder_sim/cloud-day", &[k as u64, p.seed, day as u64]),
        };
        let mut load_state = rng.random_range(0..p.load_levels.len());
        let mut cloud_state = cloud_rng.random_range(0..p.cloud_levels.len());
        for t in 0..minutes {
            load_state = next_state(&mut rng, &p.load_transition[load_state]);
            cloud_state = next_state(&mut cloud_rng, &p.cloud_transition[cloud_state]);
            let load = p.load_mean_kw * p.load_levels[load_state];
            let pv = p.cloud_levels[cloud_state] * p.clear_sky_profile[t] * capacity;
            power[k][t] = load - pv;
        }
    }
    let mut voltage = vec![vec![0.0; minutes]; n];
    let q = vec![0.0; n];
    let mut p_now = vec![0.0; n];
    let mut v_now = vec![0.0; n];
    for t in 0..minutes {
        for k in 0..n {
            p_now[k] = power[k][t];
        }
        solve_into(topology, &p_now, &q, &mut v_now).map_err(|e| match e {
            SimError::NonPositiveSquaredVoltage { bus, value, .. } => {
                SimError::NonPositiveSquaredVoltage {
                    bus,
                    value,
                    day: Some(day),
                    minute: Some(t),
                }
            }
            other => other,
        })?;
        for k in 0..n {
            voltage[k][t] = v_now[k];
        }
    }
    Ok((power, voltage))
}
