//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its artifacts there and returns a one-line summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use pvvolt_core::dataset::{load_day_matrix, restrict_to_window, save_day_matrix, stack};
use pvvolt_core::feeder_sim::simulate_days;
use pvvolt_core::gamma_mle::GammaParams;
use pvvolt_core::regulator::{conventional_regulator, ltc_variation, stochastic_regulator};
use pvvolt_core::report::{beta_table, gamma_table, weight_table, Column, Table};
use pvvolt_core::voltage_model::{
    build_composite, fit_model, interquartile_range, ks_distance, qq_max_deviation, qq_points, residuals,
    Component,
};
use pvvolt_core::{run_clustering, singular_spectrum, DayMatrix, Sign, Unit, VoltageModel};

use crate::config::RunConfig;
use crate::error::CliError;

/// Central quantile range used for the Q-Q deviation summary.
pub const QQ_TRIM: (f64, f64) = (0.01, 0.99);
const SPECTRUM_COUNT: usize = 10;

fn path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir.join(name)
}

fn ensure_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io("create_dir", &cfg.output_dir, e))
}

fn write_text(p: &Path, text: &str) -> Result<(), CliError> {
    fs::write(p, text).map_err(|e| CliError::io("write", p, e))
}

fn write_json<T: Serialize>(p: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::io("write", p, e))?;
    text.push('\n');
    write_text(p, &text)
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(p).map_err(|e| CliError::io("read", p, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::io("read", p, e))
}

fn load(cfg: &RunConfig, kind: &str, id: &str, unit: Unit) -> Result<DayMatrix, CliError> {
    let p = path(cfg, &format!("{kind}_{id}.csv"));
    let m = load_day_matrix(&p, cfg.simulation.minutes_per_day, unit).map_err(|e| CliError::from_core("load", e))?;
    if m.days() != cfg.simulation.days {
        return Err(CliError::data(
            "cli",
            "load",
            format!("{} has {} days, expected {}", p.display(), m.days(), cfg.simulation.days),
        ));
    }
    Ok(m)
}

fn windowed(cfg: &RunConfig, m: &DayMatrix) -> Result<DayMatrix, CliError> {
    let w = cfg.analysis_window;
    restrict_to_window(m, w.start_minute, w.end_minute).map_err(|e| CliError::from_core("restrict_to_window", e))
}

/// Consumer ids in order of increasing distance from the transformer.
fn ordered_ids(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    Ok(cfg.topology()?.consumers().iter().map(|c| c.id.clone()).collect())
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<String, CliError> {
    let topology = cfg.topology()?;
    let params = cfg.process_params(&topology)?;
    let sim = simulate_days(
        &topology,
        &params,
        cfg.simulation.days,
        cfg.simulation.minutes_per_day,
        cfg.seed,
    )
    .map_err(|e| CliError::from_core("simulate_days", e))?;
    ensure_dir(cfg)?;
    let mut v_max = f64::MIN;
    for (k, c) in topology.consumers().iter().enumerate() {
        for (kind, m) in [("power", &sim.power[k]), ("voltage", &sim.voltage[k])] {
            save_day_matrix(path(cfg, &format!("{kind}_{}.csv", c.id)), m)
                .map_err(|e| CliError::from_core("save_day_matrix", e))?;
        }
        v_max = sim.voltage[k].values().iter().copied().fold(v_max, f64::max);
    }
    Ok(format!(
        "simulate: {} consumers x {} days x {} minutes, peak voltage {:.4} pu",
        topology.len(),
        cfg.simulation.days,
        cfg.simulation.minutes_per_day,
        v_max
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeflationRecord {
    pub norm_sq_before: f64,
    pub sigma: f64,
    pub norm_sq_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterFile {
    /// Consumer ids in stacking order; each contributes `days` rows.
    pub consumers: Vec<String>,
    pub days: usize,
    /// 1-based cluster id to stacked row indices; the last is the remainder.
    pub clusters: BTreeMap<usize, Vec<usize>>,
    pub deflation: Vec<DeflationRecord>,
}

impl ClusterFile {
    /// Day indices of one consumer per cluster, in cluster order.
    pub fn days_for(&self, id: &str) -> Option<Vec<Vec<usize>>> {
        let k = self.consumers.iter().position(|c| c == id)?;
        let block = k * self.days..(k + 1) * self.days;
        Some(
            self.clusters
                .values()
                .map(|rows| rows.iter().filter(|r| block.contains(r)).map(|r| r - block.start).collect())
                .collect(),
        )
    }
}

pub fn cmd_cluster(cfg: &RunConfig) -> Result<String, CliError> {
    let ids = ordered_ids(cfg)?;
    let power = ids
        .iter()
        .map(|id| windowed(cfg, &load(cfg, "power", id, Unit::Kilowatt)?))
        .collect::<Result<Vec<_>, _>>()?;
    let stacked = stack(&power).map_err(|e| CliError::from_core("stack", e))?;
    let set = run_clustering(&stacked, &cfg.sparse_svd, cfg.max_clusters)
        .map_err(|e| CliError::from_core("run_clustering", e))?;
    let h = stacked.values();
    let count = SPECTRUM_COUNT.min(h.nrows()).min(h.ncols());
    let spectrum = singular_spectrum(h, count).map_err(|e| CliError::from_core("singular_spectrum", e))?;

    let bases = set.reported_bases();
    let mut csv = String::from("minute");
    for b in 1..=bases.len() {
        write!(csv, ",y{b}").unwrap();
    }
    csv.push('\n');
    for j in 0..h.ncols() {
        write!(csv, "{}", cfg.analysis_window.start_minute + j).unwrap();
        for b in &bases {
            write!(csv, ",{}", b[j]).unwrap();
        }
        csv.push('\n');
    }
    let mut spec_csv = String::from("index,sigma\n");
    for (i, s) in spectrum.iter().enumerate() {
        writeln!(spec_csv, "{},{}", i + 1, s).unwrap();
    }
    let file = ClusterFile {
        consumers: ids,
        days: cfg.simulation.days,
        clusters: set
            .clusters
            .iter()
            .enumerate()
            .map(|(i, c)| (i + 1, c.iter().copied().collect()))
            .collect(),
        deflation: set
            .deflation
            .iter()
            .map(|d| DeflationRecord {
                norm_sq_before: d.norm_sq_before,
                sigma: d.sigma,
                norm_sq_after: d.norm_sq_after,
            })
            .collect(),
    };
    ensure_dir(cfg)?;
    write_text(&path(cfg, "bases.csv"), &csv)?;
    write_text(&path(cfg, "spectrum.csv"), &spec_csv)?;
    write_json(&path(cfg, "clusters.json"), &file)?;
    let sizes: Vec<String> = set.clusters.iter().map(|c| c.len().to_string()).collect();
    Ok(format!(
        "cluster: {} rows into {} clusters of sizes [{}], sigma_1 = {:.4}",
        h.nrows(),
        set.len(),
        sizes.join(", "),
        spectrum.first().copied().unwrap_or(0.0)
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub k: usize,
    pub s: Sign,
    pub pi: f64,
    pub lambda: Option<f64>,
    pub theta: Option<f64>,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub id: String,
    pub pv_capacity_kw: f64,
    pub impedance_ohm: f64,
    pub beta: f64,
    pub reference_voltage: f64,
    pub components: Vec<ComponentRecord>,
}

impl ModelFile {
    fn from_model(id: &str, cfg: &RunConfig, m: &VoltageModel) -> Self {
        let entry = cfg.entry(id).expect("id comes from the config");
        Self {
            id: id.to_string(),
            pv_capacity_kw: entry.pv_capacity_kw,
            impedance_ohm: entry.impedance_ohm,
            beta: m.beta,
            reference_voltage: m.reference_voltage,
            components: m
                .components
                .iter()
                .map(|c| ComponentRecord {
                    k: c.cluster,
                    s: c.sign,
                    pi: c.weight,
                    lambda: c.params.map(|p| p.shape()),
                    theta: c.params.map(|p| p.scale()),
                    n: c.sample_count,
                })
                .collect(),
        }
    }

    pub fn to_model(&self) -> Result<VoltageModel, CliError> {
        let bad = |m: String| CliError::data("cli", "read_model", format!("model {}: {m}", self.id));
        let components = self
            .components
            .iter()
            .map(|c| {
                let params = match (c.lambda, c.theta) {
                    (Some(l), Some(t)) => Some(GammaParams::new(l, t).map_err(|e| bad(e.to_string()))?),
                    (None, None) => None,
                    _ => return Err(bad("lambda and theta must be given together".into())),
                };
                Ok(Component {
                    cluster: c.k,
                    sign: c.s,
                    weight: c.pi,
                    params,
                    sample_count: c.n,
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let model = VoltageModel {
            beta: self.beta,
            reference_voltage: self.reference_voltage,
            components,
        };
        model.validate().map_err(|e| bad(e.to_string()))?;
        Ok(model)
    }
}

fn read_model(cfg: &RunConfig, id: &str) -> Result<ModelFile, CliError> {
    read_json(&path(cfg, &format!("model_{id}.json")))
}

pub fn cmd_fit(cfg: &RunConfig) -> Result<String, CliError> {
    let ids = ordered_ids(cfg)?;
    let clusters: ClusterFile = read_json(&path(cfg, "clusters.json"))?;
    if clusters.consumers != ids || clusters.days != cfg.simulation.days {
        return Err(CliError::data(
            "cli",
            "fit",
            "clusters.json does not match the configured consumers; rerun cluster",
        ));
    }
    let models = ids
        .par_iter()
        .map(|id| {
            let p = windowed(cfg, &load(cfg, "power", id, Unit::Kilowatt)?)?;
            let v = windowed(cfg, &load(cfg, "voltage", id, Unit::PerUnitVolt)?)?;
            let days = clusters.days_for(id).expect("ids match");
            let model = fit_model(&p, &v, &days, cfg.reference_voltage.resolve(&v)).map_err(|e| CliError::from_core("fit_model", e))?;
            Ok(ModelFile::from_model(id, cfg, &model))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ensure_dir(cfg)?;
    for m in &models {
        write_json(&path(cfg, &format!("model_{}.json", m.id)), m)?;
    }
    let betas: Vec<String> = models.iter().map(|m| format!("{}={:.5}", m.id, m.beta)).collect();
    Ok(format!("fit: {} models, beta {}", models.len(), betas.join(" ")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqRecord {
    pub ks_distance: f64,
    /// Largest trimmed Q-Q deviation over the residual interquartile range.
    pub max_deviation_over_iqr: f64,
    pub points: usize,
}

/// Composite values at the plotting positions `(i + 0.5) / n`.
fn matched_quantiles(sorted: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let q = (i as f64 + 0.5) / n as f64;
            sorted[((q * sorted.len() as f64) as usize).min(sorted.len() - 1)]
        })
        .collect()
}

pub fn cmd_qq(cfg: &RunConfig) -> Result<String, CliError> {
    let ids = ordered_ids(cfg)?;
    let results = ids
        .par_iter()
        .map(|id| {
            let model = read_model(cfg, id)?.to_model()?;
            let p = windowed(cfg, &load(cfg, "power", id, Unit::Kilowatt)?)?;
            let v = windowed(cfg, &load(cfg, "voltage", id, Unit::PerUnitVolt)?)?;
            let mut r = residuals(&p, &v, &model).map_err(|e| CliError::from_core("residuals", e))?;
            r.sort_by(f64::total_cmp);
            let dist = build_composite(&model, cfg.monte_carlo_samples, cfg.composite_seed(id), cfg.composite_mode)
                .map_err(|e| CliError::from_core("build_composite", e))?;
            let matched = matched_quantiles(dist.samples(), r.len());
            let points = qq_points(&r, &matched).map_err(|e| CliError::from_core("qq_points", e))?;
            let iqr = interquartile_range(&r);
            let record = QqRecord {
                ks_distance: ks_distance(&r, dist.samples()),
                max_deviation_over_iqr: qq_max_deviation(&points, QQ_TRIM.0, QQ_TRIM.1) / iqr,
                points: points.len(),
            };
            let mut csv = String::from("residual,model\n");
            for (x, y) in &points {
                writeln!(csv, "{x},{y}").unwrap();
            }
            Ok((id.clone(), csv, record))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    ensure_dir(cfg)?;
    let mut summary = BTreeMap::new();
    for (id, csv, record) in results {
        write_text(&path(cfg, &format!("qq_{id}.csv")), &csv)?;
        summary.insert(id, record);
    }
    write_json(&path(cfg, "qq_summary.json"), &summary)?;
    let worst = summary.values().map(|r| r.ks_distance).fold(0.0, f64::max);
    Ok(format!("qq: {} consumers, largest KS distance {:.4}", summary.len(), worst))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegulateSummary {
    pub consumer: String,
    pub ltc_variation_conventional: f64,
    pub ltc_variation_stochastic: f64,
    pub mean_midday_output_conventional: f64,
    pub mean_midday_output_stochastic: f64,
    pub fallback_windows: usize,
}

/// Day-averaged voltage and power over the regulated span of one consumer.
pub fn regulation_inputs(cfg: &RunConfig, id: &str) -> Result<(Vec<f64>, Vec<f64>), CliError> {
    let span = cfg.regulator_span();
    let cut = |m: &DayMatrix| {
        restrict_to_window(m, span.start_minute, span.end_minute).map_err(|e| CliError::from_core("restrict_to_window", e))
    };
    let v = cut(&load(cfg, "voltage", id, Unit::PerUnitVolt)?)?.minute_means();
    let p = cut(&load(cfg, "power", id, Unit::Kilowatt)?)?.minute_means();
    Ok((v, p))
}

pub fn cmd_regulate(cfg: &RunConfig) -> Result<String, CliError> {
    let topology = cfg.topology()?;
    let id = cfg.regulated_consumer(&topology)?;
    let model = read_model(cfg, &id)?.to_model()?;
    let dist = build_composite(&model, cfg.monte_carlo_samples, cfg.composite_seed(&id), cfg.composite_mode)
        .map_err(|e| CliError::from_core("build_composite", e))?;
    let (v, p) = regulation_inputs(cfg, &id)?;
    let rc = cfg
        .regulator_config()
        .with_model(model.beta, model.reference_voltage, Arc::new(dist));
    let conv = conventional_regulator(&v, &rc).map_err(|e| CliError::from_core("conventional_regulator", e))?;
    let stoch = stochastic_regulator(&v, &p, &rc).map_err(|e| CliError::from_core("stochastic_regulator", e))?;

    let span = cfg.regulator_span();
    let mid = cfg.regulator.midday;
    let midday = (mid.start_minute - span.start_minute)..(mid.end_minute - span.start_minute);
    let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
    let summary = RegulateSummary {
        consumer: id.clone(),
        ltc_variation_conventional: ltc_variation(&conv),
        ltc_variation_stochastic: ltc_variation(&stoch),
        mean_midday_output_conventional: mean(&conv.output_voltage[midday.clone()]),
        mean_midday_output_stochastic: mean(&stoch.output_voltage[midday]),
        fallback_windows: stoch.fallback_count(),
    };
    let mut csv = String::from("minute,input_v,conventional_ltc,conventional_out,stochastic_ltc,stochastic_out\n");
    for t in 0..v.len() {
        writeln!(
            csv,
            "{},{},{},{},{},{}",
            span.start_minute + t,
            v[t],
            conv.ltc_position[t],
            conv.output_voltage[t],
            stoch.ltc_position[t],
            stoch.output_voltage[t]
        )
        .unwrap();
    }
    ensure_dir(cfg)?;
    write_text(&path(cfg, "regulate.csv"), &csv)?;
    write_json(&path(cfg, "regulate_summary.json"), &summary)?;
    Ok(format!(
        "regulate: {id}, midday output {:.5} (stochastic) vs {:.5} (conventional), LTC variation {:.5} vs {:.5}",
        summary.mean_midday_output_stochastic,
        summary.mean_midday_output_conventional,
        summary.ltc_variation_stochastic,
        summary.ltc_variation_conventional
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsumerReport {
    pub id: String,
    pub pv_capacity_kw: f64,
    pub impedance_ohm: f64,
    pub beta: f64,
    pub weight_sum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Ordered by increasing impedance.
    pub consumers: Vec<ConsumerReport>,
    pub beta_all_negative: bool,
    pub beta_magnitude_nondecreasing_in_impedance: bool,
    pub spectrum: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub max_deflation_identity_error: f64,
    pub qq: BTreeMap<String, QqRecord>,
    pub regulator: RegulateSummary,
}

fn read_spectrum(p: &Path) -> Result<Vec<f64>, CliError> {
    let text = fs::read_to_string(p).map_err(|e| CliError::io("read", p, e))?;
    text.lines()
        .skip(1)
        .map(|l| {
            l.split(',')
                .nth(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| CliError::io("read", p, format!("bad line {l:?}")))
        })
        .collect()
}

pub fn cmd_report(cfg: &RunConfig) -> Result<String, CliError> {
    let ids = ordered_ids(cfg)?;
    let files = ids.iter().map(|id| read_model(cfg, id)).collect::<Result<Vec<_>, _>>()?;
    let models = files.iter().map(ModelFile::to_model).collect::<Result<Vec<_>, _>>()?;
    let labels: Vec<String> = files.iter().map(|f| f.pv_capacity_kw.to_string()).collect();
    let columns: Vec<Column> = labels
        .iter()
        .zip(&models)
        .map(|(label, model)| Column { label, model })
        .collect();
    let tables: [(&str, Table); 3] = [
        ("table_beta.csv", beta_table(&columns)),
        ("table_weights.csv", weight_table(&columns)),
        ("table_gamma.csv", gamma_table(&columns)),
    ];

    let consumers: Vec<ConsumerReport> = files
        .iter()
        .zip(&models)
        .map(|(f, m)| ConsumerReport {
            id: f.id.clone(),
            pv_capacity_kw: f.pv_capacity_kw,
            impedance_ohm: f.impedance_ohm,
            beta: m.beta,
            weight_sum: m.weight_sum(),
        })
        .collect();
    let clusters: ClusterFile = read_json(&path(cfg, "clusters.json"))?;
    let report = Report {
        beta_all_negative: consumers.iter().all(|c| c.beta < 0.0),
        beta_magnitude_nondecreasing_in_impedance: consumers.windows(2).all(|w| w[1].beta.abs() >= w[0].beta.abs()),
        consumers,
        spectrum: read_spectrum(&path(cfg, "spectrum.csv"))?,
        cluster_sizes: clusters.clusters.values().map(Vec::len).collect(),
        max_deflation_identity_error: clusters
            .deflation
            .iter()
            .map(|d| (d.norm_sq_after - (d.norm_sq_before - d.sigma * d.sigma)).abs() / d.norm_sq_before)
            .fold(0.0, f64::max),
        qq: read_json(&path(cfg, "qq_summary.json"))?,
        regulator: read_json(&path(cfg, "regulate_summary.json"))?,
    };
    ensure_dir(cfg)?;
    for (name, table) in &tables {
        write_text(&path(cfg, name), &table.to_csv())?;
    }
    write_json(&path(cfg, "report.json"), &report)?;
    Ok(format!(
        "report: {} consumers, beta negative: {}, |beta| monotone in impedance: {}",
        report.consumers.len(),
        report.beta_all_negative,
        report.beta_magnitude_nondecreasing_in_impedance
    ))
}

/// Every stage in order.
pub fn run_all(cfg: &RunConfig) -> Result<Vec<String>, CliError> {
    [cmd_simulate, cmd_cluster, cmd_fit, cmd_qq, cmd_regulate, cmd_report]
        .iter()
        .map(|stage| stage(cfg))
        .collect()
}
