use std::fmt;

use pvvolt_core::clustering::ClusterError;
use pvvolt_core::dataset::DataError;
use pvvolt_core::feeder_sim::SimError;
use pvvolt_core::gamma_mle::GammaError;
use pvvolt_core::regulator::RegulatorError;
use pvvolt_core::sparse_svd::SvdError;
use pvvolt_core::voltage_model::ModelError;
use pvvolt_core::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numerical => 4,
        }
    }
}

/// Error with the module and operation that raised it.
#[derive(Debug, Clone, PartialEq)]
pub struct CliError {
    pub kind: ErrorKind,
    pub module: &'static str,
    pub operation: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(kind: ErrorKind, module: &'static str, operation: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            module,
            operation,
            message: message.into(),
        }
    }

    pub fn config(module: &'static str, operation: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Config, module, operation, message)
    }

    pub fn data(module: &'static str, operation: &'static str, message: impl Into<String>) -> Self {
        Self::new(ErrorKind::Data, module, operation, message)
    }

    pub fn io(operation: &'static str, path: &std::path::Path, err: impl fmt::Display) -> Self {
        Self::data("cli", operation, format!("{}: {err}", path.display()))
    }

    /// Wraps a library error raised by `operation`.
    pub fn from_core(operation: &'static str, err: impl Into<Error>) -> Self {
        let err = err.into();
        let (kind, module) = classify(&err);
        let message = match &err {
            Error::Feeder(e) => e.to_string(),
            Error::Data(e) => e.to_string(),
            Error::Svd(e) => e.to_string(),
            Error::Cluster(e) => e.to_string(),
            Error::Gamma(e) => e.to_string(),
            Error::Model(e) => e.to_string(),
            Error::Regulator(e) => e.to_string(),
        };
        Self::new(kind, module, operation, message)
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ErrorKind::Config => "config error",
            ErrorKind::Data => "data error",
            ErrorKind::Numerical => "numerical failure",
        };
        write!(f, "{kind} in {}::{}: {}", self.module, self.operation, self.message)
    }
}

impl std::error::Error for CliError {}

fn gamma_kind(e: &GammaError) -> ErrorKind {
    match e {
        GammaError::NoConvergence(_) | GammaError::Domain(_) => ErrorKind::Numerical,
        GammaError::InvalidParams { .. } => ErrorKind::Data,
        GammaError::NonPositive { .. } | GammaError::DegenerateSample | GammaError::TooFewSamples(_) => {
            ErrorKind::Data
        }
    }
}

fn svd_kind(e: &SvdError) -> ErrorKind {
    match e {
        SvdError::ZeroMatrix | SvdError::ZeroVector(_) => ErrorKind::Numerical,
        SvdError::Dimension(_) => ErrorKind::Data,
        SvdError::InvalidConfig(_) => ErrorKind::Config,
    }
}

fn classify(err: &Error) -> (ErrorKind, &'static str) {
    use ErrorKind::*;
    match err {
        Error::Feeder(e) => (
            match e {
                SimError::NonPositiveSquaredVoltage { .. } => Numerical,
                _ => Config,
            },
            "feeder_sim",
        ),
        Error::Data(e) => (
            match e {
                DataError::Range { .. } => Config,
                _ => Data,
            },
            "dataset",
        ),
        Error::Svd(e) => (svd_kind(e), "sparse_svd"),
        Error::Cluster(e) => (
            match e {
                ClusterError::Svd(s) => svd_kind(s),
                ClusterError::TooFewClusters(_) => Config,
                ClusterError::SpectrumCount { .. } => Data,
            },
            "clustering",
        ),
        Error::Gamma(e) => (gamma_kind(e), "gamma_mle"),
        Error::Model(e) => (
            match e {
                ModelError::AllZeroPower => Numerical,
                ModelError::Fit { source, .. } => gamma_kind(source),
                ModelError::TooFewSamples { .. } => Config,
                ModelError::Shape(_)
                | ModelError::Index { .. }
                | ModelError::NoData
                | ModelError::Invalid(_)
                | ModelError::LengthMismatch(..) => Data,
            },
            "voltage_model",
        ),
        Error::Regulator(e) => (
            match e {
                RegulatorError::InvalidConfig { .. } => Config,
                RegulatorError::EmptyConditioningSet { .. } | RegulatorError::DivisionNearZero { .. } => Numerical,
                RegulatorError::NonPositiveVoltage { .. }
                | RegulatorError::LengthMismatch { .. }
                | RegulatorError::EmptyInput
                | RegulatorError::EmptyDistribution
                | RegulatorError::MissingDistribution => Data,
            },
            "regulator",
        ),
    }
}
