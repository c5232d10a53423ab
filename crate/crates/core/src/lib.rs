//! Thompson sampling with dynamic episodes for linear-quadratic systems whose
//! agents are coupled through a symmetric network matrix.
//!
//! The coupled problem is split along the eigenvectors of the coupling matrix
//! into a handful of small single-agent problems that are learned and solved
//! independently, then recombined into a network-wide control.

pub mod bayes;
pub mod config;
pub mod experiment;
pub mod netmodel;
pub mod riccati;
pub mod sim;
pub mod spectral;
pub mod tsde;

use thiserror::Error;

use config::ConfigError;
use experiment::ExperimentError;
use netmodel::ModelError;
use riccati::RiccatiError;
use sim::SimError;
use spectral::SpectralError;

/// Coarse failure class, stable across releases (it is the CLI exit code).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config = 2,
    Assumption = 3,
    Numeric = 4,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("assumption {kind}: {0}", kind = .0.assumption())]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn model_kind(e: &ModelError) -> ErrorKind {
    match e {
        // Q ≻ 0 and R ≻ 0 is a standing assumption, not a typo.
        ModelError::NotPositiveDefinite { field, .. } if *field == "q" || *field == "r" => {
            ErrorKind::Assumption
        }
        _ => ErrorKind::Config,
    }
}

fn riccati_kind(e: &RiccatiError) -> ErrorKind {
    match e {
        RiccatiError::Block { source, .. } => riccati_kind(source),
        // No stabilizing solution for the true parameters.
        RiccatiError::Diverged { .. } | RiccatiError::Unstable { .. } => ErrorKind::Assumption,
        RiccatiError::NotConverged { .. } | RiccatiError::Singular => ErrorKind::Numeric,
    }
}

fn sim_kind(e: &SimError) -> ErrorKind {
    match e {
        SimError::Model(m) => model_kind(m),
        SimError::Spectral(_) => ErrorKind::Assumption,
        SimError::Riccati(r) => riccati_kind(r),
        SimError::Prior { .. } | SimError::PriorSpec { .. } => ErrorKind::Config,
        SimError::Diverged { .. } | SimError::TruthDraw(_) => ErrorKind::Numeric,
    }
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) => ErrorKind::Config,
            Error::Model(m) => model_kind(m),
            Error::Spectral(_) => ErrorKind::Assumption,
            Error::Riccati(r) => riccati_kind(r),
            Error::Sim(s) => sim_kind(s),
            Error::Experiment(e) => match e {
                ExperimentError::Config(_) => ErrorKind::Config,
                ExperimentError::Group { source, .. } => sim_kind(source),
                ExperimentError::AllFailed(_) => ErrorKind::Numeric,
                ExperimentError::Pool(_)
                | ExperimentError::Io(_)
                | ExperimentError::Csv(_)
                | ExperimentError::Json(_) => ErrorKind::Config,
            },
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind() as i32
    }

    /// Name of the violated standing assumption, if any.
    pub fn assumption(&self) -> Option<&'static str> {
        fn from_sim(e: &SimError) -> Option<&'static str> {
            match e {
                SimError::Spectral(s) => Some(s.assumption()),
                SimError::Model(ModelError::NotPositiveDefinite { .. }) => Some("A2"),
                SimError::Riccati(r) if riccati_kind(r) == ErrorKind::Assumption => Some("A1"),
                _ => None,
            }
        }
        if self.kind() != ErrorKind::Assumption {
            return None;
        }
        match self {
            Error::Spectral(s) => Some(s.assumption()),
            Error::Model(_) => Some("A2"),
            Error::Riccati(_) => Some("A1"),
            Error::Sim(s) => from_sim(s),
            Error::Experiment(ExperimentError::Group { source, .. }) => from_sim(source),
            _ => None,
        }
    }
}
