//! Environment constructors: realizable tabular instances, feature
//! perturbation, inaccurate simulators and the hypercube navigation family.

mod hypercube;
mod realizable;

use thiserror::Error;

use crate::mdp::MdpFormatError;

pub use hypercube::{hypercube_vstar, Cell, make_hypercube, shortest_path_values, CostOracle, CostStep, HypercubeEnv};
pub use realizable::{
    inaccurate_wrap, make_policy_realizable, make_tabular_realizable, perturb_features, random_orthogonal, Branching,
    Certificate, Competitor, RealizableEnv, RealizableSpec,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("horizon {horizon} exceeds the norm bound B = {radius}; values cannot be scaled into the unit ball")]
    InfeasibleScaling { horizon: usize, radius: f64 },
    #[error("perturbation at stage {h}, state {s} cannot keep the feature norm at most 1")]
    NormBudgetExceeded { h: usize, s: usize },
    #[error("goal coordinates must be -1 or 1")]
    InvalidGoal,
    #[error("environment has no goal state")]
    NoGoal,
    #[error("invalid spec field `{field}`: {reason}")]
    InvalidSpec { field: String, reason: String },
    #[error(transparent)]
    Format(#[from] MdpFormatError),
}

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> EnvError {
    EnvError::InvalidSpec { field: field.to_string(), reason: reason.into() }
}
