use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

use pvvolt_cli::{CliError, ErrorKind};
use pvvolt_core::regulator::RegulatorError;

fn small_config() -> Value {
    json!({
        "seed": 42,
        "feeder": {
            "consumers": [
                { "id": "near", "pv_capacity_kw": 5.0, "impedance_ohm": 0.02 },
                { "id": "far", "pv_capacity_kw": 3.0, "impedance_ohm": 0.06 }
            ]
        },
        "simulation": { "days": 12, "minutes_per_day": 1440 },
        "monte_carlo_samples": 20000
    })
}

fn write_config(dir: &Path, value: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn pvvolt(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_pvvolt"));
    cmd.args(args).env_remove("PVVOLT_SEED").env_remove("PVVOLT_OUT");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn run(stage: &str, config: &Path, out: &Path) -> Output {
    pvvolt(&[stage, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()], &[])
}

#[test]
fn full_pipeline_succeeds_on_small_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    for stage in ["simulate", "cluster", "fit", "qq", "regulate", "report"] {
        let o = run(stage, &config, &out);
        assert_eq!(o.status.code(), Some(0), "{stage}: {}", stderr(&o));
    }
    for f in ["power_far.csv", "clusters.json", "model_near.json", "qq_summary.json", "regulate.csv", "report.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let report: Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["regulator"]["consumer"], "far");
}

#[test]
fn zero_delta_is_a_config_error_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["regulator"] = json!({ "delta": 0.0 });
    let config = write_config(dir.path(), &cfg);
    let o = run("simulate", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("RegulatorConfig.delta"), "{}", stderr(&o));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["simulation"]["dayz"] = json!(3);
    let config = write_config(dir.path(), &cfg);
    let o = run("simulate", &config, &dir.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("dayz"), "{}", stderr(&o));
}

#[test]
fn invalid_values_are_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (path, value, field) in [
        ("max_clusters", json!(1), "RunConfig.max_clusters"),
        ("monte_carlo_samples", json!(10), "RunConfig.monte_carlo_samples"),
        ("analysis_window", json!({ "start_minute": 900, "end_minute": 600 }), "RunConfig.analysis_window"),
    ] {
        let mut cfg = small_config();
        cfg[path] = value;
        let config = write_config(dir.path(), &cfg);
        let o = run("simulate", &config, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(2), "{path}");
        assert!(stderr(&o).contains(field), "{path}: {}", stderr(&o));
    }
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run("simulate", &dir.path().join("nope.json"), dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn missing_inputs_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let o = run("fit", &config, &dir.path().join("empty"));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("data error"), "{}", stderr(&o));
}

#[test]
fn numerical_failures_map_to_exit_four() {
    let e = CliError::from_core("stochastic_regulator", RegulatorError::DivisionNearZero { start: 3, value: 1e-12 });
    assert_eq!(e.kind, ErrorKind::Numerical);
    assert_eq!(e.exit_code(), 4);
    assert_eq!(e.module, "regulator");
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(run("simulate", &config, &a).status.code(), Some(0));
    assert_eq!(run("simulate", &config, &b).status.code(), Some(0));
    for f in ["power_near.csv", "voltage_far.csv"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn environment_overrides_seed_and_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let cfg = config.to_str().unwrap();
    let by_flag = dir.path().join("flag");
    let by_env = dir.path().join("env");
    let o = pvvolt(&["simulate", "--config", cfg, "--out", by_flag.to_str().unwrap(), "--seed", "7"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = pvvolt(
        &["simulate", "--config", cfg],
        &[("PVVOLT_SEED", "7"), ("PVVOLT_OUT", by_env.to_str().unwrap())],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let read = |d: &Path| std::fs::read(d.join("power_near.csv")).unwrap();
    assert_eq!(read(&by_flag), read(&by_env));

    let default_seed = dir.path().join("default");
    assert_eq!(run("simulate", &config, &default_seed).status.code(), Some(0));
    assert_ne!(read(&default_seed), read(&by_env));
}

#[test]
fn flags_take_precedence_over_environment() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let flag_out = dir.path().join("flag");
    let env_out = dir.path().join("env");
    let o = pvvolt(
        &["simulate", "--config", config.to_str().unwrap(), "--out", flag_out.to_str().unwrap()],
        &[("PVVOLT_OUT", env_out.to_str().unwrap())],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(flag_out.join("power_near.csv").is_file());
    assert!(!env_out.exists());
}

#[test]
fn unknown_command_is_a_usage_error() {
    let o = pvvolt(&["frobnicate", "--config", "x.json"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn reference_voltage_accepts_a_number_or_the_consumer_mean_rule() {
    let dir = tempfile::tempdir().unwrap();
    for (value, code) in [(json!(1.0), 0), (json!("consumer_mean"), 0), (json!("median"), 2)] {
        let mut cfg = small_config();
        cfg["reference_voltage"] = value.clone();
        let config = write_config(dir.path(), &cfg);
        let o = run("simulate", &config, &dir.path().join("out"));
        assert_eq!(o.status.code(), Some(code), "{value}: {}", stderr(&o));
    }
}

#[test]
fn fixed_reference_is_recorded_in_the_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg["reference_voltage"] = json!(1.0);
    let config = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    for stage in ["simulate", "cluster", "fit"] {
        assert_eq!(run(stage, &config, &out).status.code(), Some(0), "{stage}");
    }
    let model: Value = serde_json::from_str(&std::fs::read_to_string(out.join("model_far.json")).unwrap()).unwrap();
    assert_eq!(model["reference_voltage"], json!(1.0));
}

#[test]
fn rerunning_a_stage_reproduces_its_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    let stages = ["simulate", "cluster", "fit", "qq", "regulate", "report"];
    for stage in stages {
        assert_eq!(run(stage, &config, &out).status.code(), Some(0), "{stage}");
    }
    let snapshot = || -> Vec<(String, Vec<u8>)> {
        let mut files: Vec<_> = std::fs::read_dir(&out)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let first = snapshot();
    for stage in stages {
        assert_eq!(run(stage, &config, &out).status.code(), Some(0), "{stage}");
        assert!(snapshot() == first, "{stage} changed its outputs on rerun");
    }
}

fn csv_rows(p: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(p)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn emitted_tables_are_well_formed() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), &small_config());
    let out = dir.path().join("out");
    for stage in ["simulate", "cluster", "fit", "qq", "regulate", "report"] {
        assert_eq!(run(stage, &config, &out).status.code(), Some(0), "{stage}");
    }
    let window = 1020 - 600;

    let bases = csv_rows(&out.join("bases.csv"));
    assert_eq!(bases[0][0], "minute");
    assert_eq!(bases.len(), window + 1);
    for col in 1..bases[0].len() {
        let norm: f64 = bases[1..].iter().map(|r| r[col].parse::<f64>().unwrap().powi(2)).sum();
        assert!((norm.sqrt() - 1.0).abs() < 1e-9, "basis {col} has norm {}", norm.sqrt());
    }

    let spectrum = csv_rows(&out.join("spectrum.csv"));
    let sigmas: Vec<f64> = spectrum[1..].iter().map(|r| r[1].parse().unwrap()).collect();
    assert!(sigmas.windows(2).all(|w| w[0] >= w[1] - 1e-9 * w[0]));

    for id in ["near", "far"] {
        let qq = csv_rows(&out.join(format!("qq_{id}.csv")));
        assert_eq!(qq[0], ["residual", "model"]);
        let pts: Vec<(f64, f64)> = qq[1..].iter().map(|r| (r[0].parse().unwrap(), r[1].parse().unwrap())).collect();
        assert!(pts.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
    }

    let reg = csv_rows(&out.join("regulate.csv"));
    assert_eq!(reg.len(), window + 1);
    for r in &reg[1..] {
        let x: Vec<f64> = r.iter().map(|c| c.parse().unwrap()).collect();
        assert!((x[1] * x[2] - x[3]).abs() < 1e-12);
        assert!((x[1] * x[4] - x[5]).abs() < 1e-12);
    }

    let weights = csv_rows(&out.join("table_weights.csv"));
    assert_eq!(weights[0], ["kW", "5", "3"]);
    for col in 1..3 {
        let sum: f64 = weights[1..].iter().map(|r| r[col].parse::<f64>().unwrap()).sum();
        assert!((sum - 1.0).abs() <= 0.0005 * (weights.len() - 1) as f64, "column {col} sums to {sum}");
    }
    let beta = csv_rows(&out.join("table_beta.csv"));
    assert_eq!(beta[1][0], "beta");
    let gamma = std::fs::read_to_string(out.join("table_gamma.csv")).unwrap();
    assert_eq!(gamma.lines().count(), weights.len());
}
