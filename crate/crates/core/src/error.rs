use thiserror::Error;

use crate::{clustering, dataset, feeder_sim, gamma_mle, regulator, sparse_svd, voltage_model};

/// Any error raised by the library, grouped by the module that produced it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("feeder_sim: {0}")]
    Feeder(#[from] feeder_sim::SimError),
    #[error("dataset: {0}")]
    Data(#[from] dataset::DataError),
    #[error("sparse_svd: {0}")]
    Svd(#[from] sparse_svd::SvdError),
    #[error("clustering: {0}")]
    Cluster(#[from] clustering::ClusterError),
    #[error("gamma_mle: {0}")]
    Gamma(#[from] gamma_mle::GammaError),
    #[error("voltage_model: {0}")]
    Model(#[from] voltage_model::ModelError),
    #[error("regulator: {0}")]
    Regulator(#[from] regulator::RegulatorError),
}
