//! Day-by-minute matrices, CSV ingestion and the stacked consumer matrix.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },
    #[error("shape error at row {row}: {message}")]
    Shape { row: usize, message: String },
    #[error("non-finite value at row {row}, column {column}")]
    NonFinite { row: usize, column: usize },
    #[error("window [{start}, {end}) is not a valid range for {minutes} minutes")]
    Range {
        start: usize,
        end: usize,
        minutes: usize,
    },
    #[error("cannot stack matrices with different units")]
    UnitMismatch,
    #[error("cannot stack an empty list of matrices")]
    Empty,
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Physical unit of the entries of a [`DayMatrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Unit {
    #[serde(rename = "kW")]
    Kilowatt,
    #[serde(rename = "pu")]
    PerUnitVolt,
}

/// An `m` days by `n` minutes matrix of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct DayMatrix {
    values: Array2<f64>,
    unit: Unit,
}

impl DayMatrix {
    pub fn new(values: Array2<f64>, unit: Unit) -> Result<Self, DataError> {
        let (m, n) = values.dim();
        if m < 1 {
            return Err(DataError::Shape {
                row: 0,
                message: "at least one day is required".into(),
            });
        }
        if n < 2 {
            return Err(DataError::Shape {
                row: 0,
                message: format!("at least two minutes are required, got {n}"),
            });
        }
        if let Some(((row, column), _)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataError::NonFinite { row, column });
        }
        Ok(Self { values, unit })
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn unit(&self) -> Unit {
        self.unit
    }

    pub fn days(&self) -> usize {
        self.values.nrows()
    }

    pub fn minutes(&self) -> usize {
        self.values.ncols()
    }

    /// Per-minute average over all days.
    pub fn minute_means(&self) -> Vec<f64> {
        self.values
            .mean_axis(Axis(0))
            .expect("a day matrix has at least one row")
            .to_vec()
    }

    /// Elementwise `value - offset`, keeping the unit.
    pub fn offset(&self, offset: f64) -> DayMatrix {
        DayMatrix {
            values: self.values.mapv(|v| v - offset),
            unit: self.unit,
        }
    }
}

/// Parses a headerless CSV of `expected_minutes` columns into a matrix.
pub fn read_day_matrix<R: Read>(
    reader: R,
    expected_minutes: usize,
    unit: Unit,
) -> Result<DayMatrix, DataError> {
    let mut csv = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, record) in csv.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| DataError::Parse {
            row,
            column: 0,
            message: e.to_string(),
        })?;
        if record.len() != expected_minutes {
            return Err(DataError::Shape {
                row,
                message: format!("expected {expected_minutes} columns, found {}", record.len()),
            });
        }
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field.parse().map_err(|_| DataError::Parse {
                row,
                column: j + 1,
                message: format!("not a number: {field:?}"),
            })?;
            if !value.is_finite() {
                return Err(DataError::Parse {
                    row,
                    column: j + 1,
                    message: format!("non-finite value {field:?}"),
                });
            }
            data.push(value);
        }
        rows += 1;
    }
    let values = Array2::from_shape_vec((rows, expected_minutes), data).map_err(|e| {
        DataError::Shape {
            row: rows,
            message: e.to_string(),
        }
    })?;
    DayMatrix::new(values, unit)
}

pub fn load_day_matrix(
    path: impl AsRef<Path>,
    expected_minutes: usize,
    unit: Unit,
) -> Result<DayMatrix, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_day_matrix(BufReader::new(file), expected_minutes, unit)
}

/// Writes one row per day. Values use the shortest decimal representation
/// that parses back to the identical `f64`, never exponent notation.
pub fn write_day_matrix<W: Write>(writer: W, matrix: &DayMatrix) -> std::io::Result<()> {
    let mut out = BufWriter::new(writer);
    let mut line = String::new();
    for row in matrix.values.rows() {
        line.clear();
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                line.push(',');
            }
            // `Display` for f64 is exact round-trip and never uses exponents.
            line.push_str(&format!("{v}"));
        }
        line.push('\n');
        out.write_all(line.as_bytes())?;
    }
    out.flush()
}

pub fn save_day_matrix(path: impl AsRef<Path>, matrix: &DayMatrix) -> Result<(), DataError> {
    let path = path.as_ref();
    let io_err = |source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    write_day_matrix(file, matrix).map_err(io_err)
}

/// Keeps only minutes in `[start_minute, end_minute)`.
pub fn restrict_to_window(
    matrix: &DayMatrix,
    start_minute: usize,
    end_minute: usize,
) -> Result<DayMatrix, DataError> {
    let n = matrix.minutes();
    if start_minute >= end_minute || end_minute > n {
        return Err(DataError::Range {
            start: start_minute,
            end: end_minute,
            minutes: n,
        });
    }
    DayMatrix::new(
        matrix.values.slice(s![.., start_minute..end_minute]).to_owned(),
        matrix.unit,
    )
}

/// Collapses consecutive groups of `samples_per_minute` columns to their
/// maximum. Used when ingesting sub-minute voltage records, where each minute
/// keeps the largest value observed in that interval.
pub fn aggregate_max(matrix: &DayMatrix, samples_per_minute: usize) -> Result<DayMatrix, DataError> {
    let n = matrix.minutes();
    if samples_per_minute == 0 || !n.is_multiple_of(samples_per_minute) {
        return Err(DataError::Shape {
            row: 0,
            message: format!("{n} columns do not split into groups of {samples_per_minute}"),
        });
    }
    let minutes = n / samples_per_minute;
    let values = Array2::from_shape_fn((matrix.days(), minutes), |(i, j)| {
        matrix
            .values
            .slice(s![i, j * samples_per_minute..(j + 1) * samples_per_minute])
            .fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    });
    DayMatrix::new(values, matrix.unit)
}

/// Matrices of several consumers appended row-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMatrix {
    values: Array2<f64>,
    blocks: Vec<Range<usize>>,
}

impl StackedMatrix {
    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    pub fn consumers(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, consumer: usize) -> ArrayView2<'_, f64> {
        let range = self.blocks[consumer].clone();
        self.values.slice(s![range, ..])
    }

    /// Maps a stacked row to `(consumer, day)`.
    pub fn locate(&self, row: usize) -> Option<(usize, usize)> {
        self.blocks
            .iter()
            .position(|b| b.contains(&row))
            .map(|k| (k, row - self.blocks[k].start))
    }
}

pub fn stack(matrices: &[DayMatrix]) -> Result<StackedMatrix, DataError> {
    let first = matrices.first().ok_or(DataError::Empty)?;
    let n = first.minutes();
    let mut blocks = Vec::with_capacity(matrices.len());
    let mut offset = 0;
    for (k, m) in matrices.iter().enumerate() {
        if m.unit != first.unit {
            return Err(DataError::UnitMismatch);
        }
        if m.minutes() != n {
            return Err(DataError::Shape {
                row: offset,
                message: format!(
                    "block {k} has {} columns, expected {n}",
                    m.minutes()
                ),
            });
        }
        blocks.push(offset..offset + m.days());
        offset += m.days();
    }
    let views: Vec<_> = matrices.iter().map(|m| m.values.view()).collect();
    let values = ndarray::concatenate(Axis(0), &views).expect("column counts were checked");
    Ok(StackedMatrix { values, blocks })
}
