//! Local planning for fixed-horizon featurized MDPs with generative-model
//! access.
//!
//! The crate is organised bottom-up:
//!
//! - [`mdp`]: state identifiers, the local-access simulator contract, query
//!   ledgers and the tabular simulator.
//! - [`tensor`]: concatenation, tensor flattening, tensor inner products and
//!   ball clipping.
//! - [`hypothesis`]: the constrained parameter set, the eluder budget and the
//!   optimistic parameter search.
//! - [`planner`]: TD estimation, the generate-and-test initialisation, action
//!   selection and hyperparameter derivation.
//! - [`reductions`]: stage-annotating and discounting simulator wrappers.
//! - [`envs`]: realizable tabular instances, feature perturbation, inaccurate
//!   simulators and the hypercube navigation family.
//! - [`dp`]: exact dynamic-programming oracles.
//! - [`harness`]: seeded experiments, the hypercube coverage demo and
//!   environment files.
//!
//! Data-parallel loops (rollouts, candidate sampling, episode batches) run on
//! rayon when the `parallel` feature is enabled and fall back to plain
//! iterators otherwise. Both schedules produce bit-identical results because
//! every unit of work draws from its own derived seed.

pub mod dp;
pub mod envs;
pub mod harness;
pub mod hypothesis;
pub mod mdp;
pub mod par;
pub mod planner;
pub mod reductions;
pub mod seeds;
pub mod tensor;

pub use hypothesis::{EluderBudget, HypothesisSet, OptimizerBudget};
pub use mdp::{FeatureVector, FeaturizedSimulator, ForkableSimulator, QueryLedger, SimStep, StateId};
pub use planner::{DerivedParams, PlannerConfig, PlannerState, Profile, TensorPlan};
pub use tensor::{TdVector, TensoredConstraint};
