//! Per-consumer summary tables: slope, weights and gamma parameters, one
//! column per consumer.

use std::fmt::Write as _;

use crate::voltage_model::{Sign, VoltageModel};

/// A labelled grid of preformatted cells.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub corner: String,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let mut line = |cells: Vec<&str>| {
            let quoted: Vec<String> = cells
                .into_iter()
                .map(|c| {
                    if c.contains([',', '"']) {
                        format!("\"{}\"", c.replace('"', "\"\""))
                    } else {
                        c.to_string()
                    }
                })
                .collect();
            writeln!(out, "{}", quoted.join(",")).unwrap();
        };
        line(std::iter::once(self.corner.as_str()).chain(self.columns.iter().map(String::as_str)).collect());
        for (label, cells) in &self.rows {
            line(std::iter::once(label.as_str()).chain(cells.iter().map(String::as_str)).collect());
        }
        out
    }

    /// Column sums of the cells read as numbers; blank cells count as zero.
    pub fn column_sums(&self) -> Result<Vec<f64>, String> {
        let mut sums = vec![0.0; self.columns.len()];
        for (label, cells) in &self.rows {
            if cells.len() != sums.len() {
                return Err(format!("row {label} has {} cells", cells.len()));
            }
            for (s, c) in sums.iter_mut().zip(cells) {
                if !c.trim().is_empty() {
                    *s += c.trim().parse::<f64>().map_err(|e| format!("row {label}: {e}"))?;
                }
            }
        }
        Ok(sums)
    }
}

/// One consumer's fitted model with its column label.
#[derive(Debug, Clone, Copy)]
pub struct Column<'a> {
    pub label: &'a str,
    pub model: &'a VoltageModel,
}

fn cluster_count(columns: &[Column<'_>]) -> usize {
    columns
        .iter()
        .flat_map(|c| c.model.components.iter().map(|m| m.cluster))
        .max()
        .unwrap_or(0)
}

fn component_rows<'a>(
    columns: &'a [Column<'a>],
    cell: impl Fn(Option<&crate::voltage_model::Component>) -> String + 'a,
    prefix: &'a str,
) -> Vec<(String, Vec<String>)> {
    let mut rows = Vec::new();
    for k in 1..=cluster_count(columns) {
        for sign in [Sign::Plus, Sign::Minus] {
            let cells = columns.iter().map(|c| cell(c.model.component(k, sign))).collect();
            rows.push((format!("{prefix}_{k}^{sign}"), cells));
        }
    }
    rows
}

fn header(columns: &[Column<'_>]) -> Vec<String> {
    columns.iter().map(|c| c.label.to_string()).collect()
}

pub fn beta_table(columns: &[Column<'_>]) -> Table {
    Table {
        corner: "kW".into(),
        columns: header(columns),
        rows: vec![(
            "beta".into(),
            columns.iter().map(|c| format!("{:.4}", c.model.beta)).collect(),
        )],
    }
}

/// Weights to three decimals; absent subsets print as 0.
pub fn weight_table(columns: &[Column<'_>]) -> Table {
    Table {
        corner: "kW".into(),
        columns: header(columns),
        rows: component_rows(columns, |c| format!("{:.3}", c.map_or(0.0, |c| c.weight)), "pi"),
    }
}

/// `shape,scale` per subset; empty subsets are blank.
pub fn gamma_table(columns: &[Column<'_>]) -> Table {
    Table {
        corner: "kW".into(),
        columns: header(columns),
        rows: component_rows(
            columns,
            |c| match c.and_then(|c| c.params.as_ref()) {
                Some(p) => format!("{:.1},{:.3}", p.shape(), p.scale()),
                None => String::new(),
            },
            "u",
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gamma_mle::GammaParams;
    use crate::voltage_model::Component;

    fn model_with_weights(w: [f64; 6]) -> VoltageModel {
        let mut components = Vec::new();
        for (i, &weight) in w.iter().enumerate() {
            components.push(Component {
                cluster: i / 2 + 1,
                sign: if i % 2 == 0 { Sign::Plus } else { Sign::Minus },
                weight,
                params: (weight > 0.0).then(|| GammaParams::new(1.5, 0.003).unwrap()),
                sample_count: (weight * 1000.0).round() as usize,
            });
        }
        VoltageModel {
            beta: -0.01,
            reference_voltage: 1.0,
            components,
        }
    }

    /// Published weight table, one array per consumer column.
    const FIXTURE: [(&str, [f64; 6]); 5] = [
        ("1.9", [0.0, 0.0, 0.020, 0.014, 0.528, 0.438]),
        ("3.9", [0.0, 0.0, 0.003, 0.003, 0.558, 0.436]),
        ("7.3", [0.003, 0.003, 0.017, 0.018, 0.496, 0.463]),
        ("11.6", [0.236, 0.223, 0.147, 0.138, 0.136, 0.120]),
        ("9.2", [0.051, 0.042, 0.121, 0.110, 0.348, 0.328]),
    ];

    #[test]
    fn fixture_weight_columns_sum_to_one() {
        let models: Vec<VoltageModel> = FIXTURE.iter().map(|(_, w)| model_with_weights(*w)).collect();
        let columns: Vec<Column> = FIXTURE
            .iter()
            .zip(&models)
            .map(|((label, _), model)| Column { label, model })
            .collect();
        let table = weight_table(&columns);
        assert_eq!(table.rows.len(), 6);
        assert_eq!(table.rows[0].0, "pi_1^+");
        assert_eq!(table.rows[3].1[3], "0.138");
        for (sum, m) in table.column_sums().unwrap().iter().zip(&models) {
            assert!((sum - 1.0).abs() < 1e-9, "{sum}");
            assert!((m.weight_sum() - 1.0).abs() < 1e-12);
        }
        let csv = table.to_csv();
        assert!(csv.starts_with("kW,1.9,3.9,7.3,11.6,9.2\n"));
        assert!(csv.contains("pi_1^+,0.000,0.000,0.003,0.236,0.051\n"));
    }

    #[test]
    fn gamma_cells_blank_when_absent() {
        let m = model_with_weights([0.0, 0.0, 0.2, 0.2, 0.3, 0.3]);
        let table = gamma_table(&[Column { label: "1.9", model: &m }]);
        assert_eq!(table.rows[0].1[0], "");
        assert_eq!(table.rows[2].1[0], "1.5,0.003");
        assert!(table.to_csv().contains("u_2^+,\"1.5,0.003\"\n"));
        let beta = beta_table(&[Column { label: "1.9", model: &m }]);
        assert_eq!(beta.rows[0].1[0], "-0.0100");
    }
}
