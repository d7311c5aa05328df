//! Stochastic modelling of PV-driven voltage rise at consumer connection
//! points, and tap-changer regulation driven by that model.
//!
//! The pipeline runs in five stages:
//!
//! 1. [`feeder_sim`] produces per-minute net power and voltage for consumers on
//!    a radial feeder (a stand-in for field measurements).
//! 2. [`dataset`] windows and stacks the day-by-minute matrices.
//! 3. [`sparse_svd`] and [`clustering`] extract sparse rank-one factors from the
//!    stacked net-power matrix and group days by their support.
//! 4. [`gamma_mle`] and [`voltage_model`] regress voltage on power and describe
//!    the residual as a weighted combination of gamma variables.
//! 5. [`regulator`] compares a conventional LTC controller with one that uses
//!    the fitted residual distribution.

pub mod clustering;
pub mod dataset;
pub mod feeder_sim;
pub mod gamma_mle;
pub mod regulator;
pub mod report;
pub mod seed;
pub mod sparse_svd;
pub mod voltage_model;

mod error;

pub use clustering::{run_clustering, singular_spectrum, ClusterSet};
pub use dataset::{DayMatrix, StackedMatrix, Unit};
pub use error::Error;
pub use feeder_sim::{ConsumerProcessParams, FeederTopology, SimulationResult};
pub use gamma_mle::GammaParams;
pub use regulator::{RegulatorConfig, RegulatorTrace};
pub use sparse_svd::{SparseFactor, SparseSvdConfig};
pub use voltage_model::{CompositeDistribution, CompositeMode, Sign, VoltageModel};
