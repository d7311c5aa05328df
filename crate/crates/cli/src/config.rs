//! Run configuration. Every field is checked at load time and unknown keys
//! are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pvvolt_core::feeder_sim::{clear_sky_bell, sticky_transition, Consumer, FeederTopology};
use pvvolt_core::regulator::{ReferenceSampling, RegulatorConfig, DEFAULT_DELTA, DEFAULT_WINDOW_MINUTES};
use pvvolt_core::voltage_model::MIN_COMPOSITE_SAMPLES;
use pvvolt_core::{seed, CompositeMode, ConsumerProcessParams, SparseSvdConfig};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub feeder: FeederSection,
    #[serde(default)]
    pub process: ProcessSection,
    #[serde(default)]
    pub simulation: SimulationSection,
    #[serde(default)]
    pub analysis_window: WindowSection,
    #[serde(default)]
    pub sparse_svd: SparseSvdConfig,
    #[serde(default = "default_max_clusters")]
    pub max_clusters: usize,
    #[serde(default = "default_samples")]
    pub monte_carlo_samples: usize,
    #[serde(default)]
    pub composite_mode: CompositeMode,
    /// Voltage that residuals are measured from.
    #[serde(default)]
    pub reference_voltage: ReferenceVoltage,
    #[serde(default)]
    pub regulator: RegulatorSection,
}

/// Either a fixed voltage in pu or the mean voltage of each consumer over
/// the analysis window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ReferenceVoltage {
    Fixed(f64),
    Rule(ReferenceRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceRule {
    ConsumerMean,
}

impl Default for ReferenceVoltage {
    fn default() -> Self {
        ReferenceVoltage::Rule(ReferenceRule::ConsumerMean)
    }
}

impl ReferenceVoltage {
    /// Reference for one consumer given its windowed voltage.
    pub fn resolve(self, voltage: &pvvolt_core::DayMatrix) -> f64 {
        match self {
            ReferenceVoltage::Fixed(v) => v,
            ReferenceVoltage::Rule(ReferenceRule::ConsumerMean) => voltage.values().mean().unwrap_or(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConsumerEntry {
    pub id: String,
    pub pv_capacity_kw: f64,
    /// Line resistance from the transformer to this consumer, in ohm.
    pub impedance_ohm: f64,
    #[serde(default)]
    pub reactance_ohm: f64,
    #[serde(default)]
    pub load_mean_kw: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeederSection {
    #[serde(default = "default_base_voltage")]
    pub base_voltage_v: f64,
    #[serde(default = "default_base_power")]
    pub base_power_kva: f64,
    #[serde(default = "one")]
    pub source_voltage_pu: f64,
    pub consumers: Vec<ConsumerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProcessSection {
    pub load_mean_kw: f64,
    pub load_levels: Vec<f64>,
    pub load_stay: f64,
    pub cloud_levels: Vec<f64>,
    pub cloud_stay: f64,
    /// One cloud trajectory per day for the whole feeder.
    pub shared_clouds: bool,
    pub sunrise_minute: usize,
    pub sunset_minute: usize,
}

impl Default for ProcessSection {
    fn default() -> Self {
        Self {
            load_mean_kw: 1.0,
            load_levels: ConsumerProcessParams::DEFAULT_LOAD_LEVELS.to_vec(),
            load_stay: 0.97,
            cloud_levels: ConsumerProcessParams::DEFAULT_CLOUD_LEVELS.to_vec(),
            cloud_stay: 0.98,
            shared_clouds: true,
            sunrise_minute: 360,
            sunset_minute: 1140,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationSection {
    pub days: usize,
    pub minutes_per_day: usize,
}

impl Default for SimulationSection {
    fn default() -> Self {
        Self {
            days: 160,
            minutes_per_day: 1440,
        }
    }
}

/// Half-open minute range `[start_minute, end_minute)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSection {
    pub start_minute: usize,
    pub end_minute: usize,
}

impl Default for WindowSection {
    fn default() -> Self {
        Self {
            start_minute: 600,
            end_minute: 1020,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegulatorSection {
    pub window_minutes: usize,
    pub delta: f64,
    pub reference: ReferenceSampling,
    pub tap_step: Option<f64>,
    /// Consumer whose connection point is regulated; defaults to the one
    /// farthest from the transformer.
    pub consumer: Option<String>,
    /// Regulated span; defaults to the analysis window.
    pub span: Option<WindowSection>,
    pub midday: WindowSection,
}

impl Default for RegulatorSection {
    fn default() -> Self {
        Self {
            window_minutes: DEFAULT_WINDOW_MINUTES,
            delta: DEFAULT_DELTA,
            reference: ReferenceSampling::default(),
            tap_step: None,
            consumer: None,
            span: None,
            midday: WindowSection {
                start_minute: 600,
                end_minute: 840,
            },
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_max_clusters() -> usize {
    3
}
fn default_samples() -> usize {
    1_000_000
}
fn default_base_voltage() -> f64 {
    FeederTopology::DEFAULT_BASE_VOLTAGE_V
}
fn default_base_power() -> f64 {
    FeederTopology::DEFAULT_BASE_POWER_KVA
}
fn one() -> f64 {
    1.0
}

fn invalid(field: &str, message: impl Into<String>) -> CliError {
    CliError::config("config", "validate", format!("RunConfig.{field}: {}", message.into()))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::config("config", "load", format!("{}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::config("config", "parse", format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// Re-validates every module-level constraint.
    pub fn validate(&self) -> Result<(), CliError> {
        let topology = self.topology()?;
        let sim = self.simulation;
        if sim.days < 1 {
            return Err(invalid("simulation.days", "must be at least 1"));
        }
        if sim.minutes_per_day < 2 {
            return Err(invalid("simulation.minutes_per_day", "must be at least 2"));
        }
        for (k, p) in self.process_params(&topology)?.iter().enumerate() {
            p.validate(k, sim.minutes_per_day)
                .map_err(|e| invalid("process", e.to_string()))?;
        }
        let check_window = |name: &str, w: &WindowSection| {
            if w.start_minute >= w.end_minute || w.end_minute > sim.minutes_per_day {
                Err(invalid(
                    name,
                    format!(
                        "[{}, {}) is not a non-empty range within {} minutes",
                        w.start_minute, w.end_minute, sim.minutes_per_day
                    ),
                ))
            } else {
                Ok(())
            }
        };
        check_window("analysis_window", &self.analysis_window)?;
        if self.analysis_window.end_minute - self.analysis_window.start_minute < 2 {
            return Err(invalid("analysis_window", "must span at least two minutes"));
        }
        let span = self.regulator_span();
        check_window("regulator.span", &span)?;
        check_window("regulator.midday", &self.regulator.midday)?;
        if self.regulator.midday.start_minute < span.start_minute || self.regulator.midday.end_minute > span.end_minute {
            return Err(invalid("regulator.midday", "must lie inside the regulated span"));
        }
        self.sparse_svd
            .validate()
            .map_err(|e| invalid("sparse_svd", e.to_string()))?;
        if self.max_clusters < 2 {
            return Err(invalid("max_clusters", "must be at least 2"));
        }
        if self.monte_carlo_samples < MIN_COMPOSITE_SAMPLES {
            return Err(invalid(
                "monte_carlo_samples",
                format!("must be at least {MIN_COMPOSITE_SAMPLES}"),
            ));
        }
        if let ReferenceVoltage::Fixed(v) = self.reference_voltage {
            if !v.is_finite() {
                return Err(invalid("reference_voltage", "must be finite"));
            }
        }
        self.regulator_config()
            .validate()
            .map_err(|e| CliError::config("regulator", "validate", e.to_string()))?;
        self.regulated_consumer(&topology)?;
        Ok(())
    }

    /// Topology in order of increasing distance from the transformer.
    pub fn topology(&self) -> Result<FeederTopology, CliError> {
        let mut seen = std::collections::BTreeSet::new();
        for c in &self.feeder.consumers {
            if c.id.is_empty() || !c.id.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return Err(invalid("feeder.consumers", format!("id {:?} must be non-empty [A-Za-z0-9_-]", c.id)));
            }
            if !seen.insert(c.id.as_str()) {
                return Err(invalid("feeder.consumers", format!("duplicate id {:?}", c.id)));
            }
            if let Some(l) = c.load_mean_kw {
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(invalid("feeder.consumers", format!("{}: load_mean_kw must be non-negative", c.id)));
                }
            }
        }
        let entries: Vec<(Consumer, f64, f64)> = self
            .feeder
            .consumers
            .iter()
            .map(|c| {
                (
                    Consumer {
                        id: c.id.clone(),
                        pv_capacity_kw: c.pv_capacity_kw,
                    },
                    c.impedance_ohm,
                    c.reactance_ohm,
                )
            })
            .collect();
        FeederTopology::from_cumulative_ohms(
            &entries,
            self.feeder.base_voltage_v,
            self.feeder.base_power_kva,
            self.feeder.source_voltage_pu,
        )
        .map_err(|e| invalid("feeder", e.to_string()))
    }

    pub fn entry(&self, id: &str) -> Option<&ConsumerEntry> {
        self.feeder.consumers.iter().find(|c| c.id == id)
    }

    /// Process parameters aligned with `topology`.
    pub fn process_params(&self, topology: &FeederTopology) -> Result<Vec<ConsumerProcessParams>, CliError> {
        let pr = &self.process;
        if pr.sunrise_minute >= pr.sunset_minute || pr.sunset_minute > self.simulation.minutes_per_day {
            return Err(invalid("process", "sunrise must precede sunset within the day"));
        }
        let profile = clear_sky_bell(self.simulation.minutes_per_day, pr.sunrise_minute, pr.sunset_minute);
        for (name, stay) in [("process.load_stay", pr.load_stay), ("process.cloud_stay", pr.cloud_stay)] {
            if !(0.0..=1.0).contains(&stay) {
                return Err(invalid(name, "must lie in [0, 1]"));
            }
        }
        Ok(topology
            .consumers()
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let entry = self.entry(&c.id).expect("topology ids come from the config");
                ConsumerProcessParams {
                    load_mean_kw: entry.load_mean_kw.unwrap_or(pr.load_mean_kw),
                    load_levels: pr.load_levels.clone(),
                    load_transition: sticky_transition(pr.load_levels.len(), pr.load_stay),
                    clear_sky_profile: profile.clone(),
                    cloud_levels: pr.cloud_levels.clone(),
                    cloud_transition: sticky_transition(pr.cloud_levels.len(), pr.cloud_stay),
                    seed: seed::derive_seed(self.seed, "cli/process", &[k as u64]),
                    cloud_group: pr.shared_clouds.then_some(0),
                }
            })
            .collect())
    }

    pub fn regulator_span(&self) -> WindowSection {
        self.regulator.span.unwrap_or(self.analysis_window)
    }

    /// Regulator scalars; the model-dependent fields are filled in later.
    pub fn regulator_config(&self) -> RegulatorConfig {
        RegulatorConfig {
            window_minutes: self.regulator.window_minutes,
            delta: self.regulator.delta,
            reference: self.regulator.reference,
            tap_step: self.regulator.tap_step,
            ..RegulatorConfig::default()
        }
    }

    pub fn regulated_consumer(&self, topology: &FeederTopology) -> Result<String, CliError> {
        match &self.regulator.consumer {
            Some(id) if self.entry(id).is_some() => Ok(id.clone()),
            Some(id) => Err(invalid("regulator.consumer", format!("unknown consumer {id:?}"))),
            None => Ok(topology
                .consumers()
                .last()
                .map(|c| c.id.clone())
                .ok_or_else(|| invalid("feeder.consumers", "no consumers"))?),
        }
    }

    /// Seed for the composite sample of one consumer.
    pub fn composite_seed(&self, id: &str) -> u64 {
        let k = self
            .feeder
            .consumers
            .iter()
            .position(|c| c.id == id)
            .unwrap_or(usize::MAX) as u64;
        seed::derive_seed(self.seed, "cli/composite", &[k])
    }
}
