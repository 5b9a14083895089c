//! The featurized-MDP abstraction and the local-access simulator contract.
//!
//! Planners and simulators talk through opaque [`StateId`]s. A simulator only
//! answers queries about states it has already handed out (start states and
//! successor states), and meters every query in a [`QueryLedger`].
//!
//! Actions are zero-based indices `0..A`. Stages are one-based `1..=H`; the
//! features of the past-horizon stage `H + 1` are all zeros.

mod simulator;
mod tabular;

use std::ops::Deref;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use simulator::{SamplingMode, TabularSimulator};
pub use tabular::{MdpDocument, MdpFormatError, Outcome, TabularMdp, MDP_FORMAT_VERSION};

/// Opaque state token. Only simulators mint these; [`StateId::from_raw`]
/// exists for tests that probe the locality contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StateId(u64);

impl StateId {
    pub const fn from_raw(token: u64) -> Self {
        StateId(token)
    }

    pub const fn raw(self) -> u64 {
        self.0
    }
}

impl std::fmt::Display for StateId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{:016x}", self.0)
    }
}

/// Feature vector `phi_h(s)` in `R^d`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FeatureVector(pub Vec<f64>);

impl FeatureVector {
    pub fn zeros(d: usize) -> Self {
        FeatureVector(vec![0.0; d])
    }

    pub fn norm(&self) -> f64 {
        crate::tensor::norm(&self.0)
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        crate::tensor::dot(&self.0, other)
    }

    pub fn scaled(&self, c: f64) -> Self {
        FeatureVector(self.0.iter().map(|x| x * c).collect())
    }
}

impl Deref for FeatureVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for FeatureVector {
    fn from(v: Vec<f64>) -> Self {
        FeatureVector(v)
    }
}

/// One simulator answer: clipped reward, successor and its stage-`h+1`
/// features.
#[derive(Debug, Clone, PartialEq)]
pub struct SimStep {
    pub reward: f64,
    pub next_state: StateId,
    pub next_features: FeatureVector,
}

/// Query counters. `per_call` restarts at every planner call, `per_episode`
/// at every episode start.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryLedger {
    pub per_call: u64,
    pub per_episode: u64,
}

impl QueryLedger {
    pub fn record(&mut self, n: u64) {
        self.per_call += n;
        self.per_episode += n;
    }

    /// Sums counters of a joined fork.
    pub fn merge(&mut self, other: QueryLedger) {
        self.per_call += other.per_call;
        self.per_episode += other.per_episode;
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("state {0} was never returned by this simulator")]
    UnknownState(StateId),
    #[error("state {0} is not a designated start state")]
    NotAStartState(StateId),
    #[error("stage {h} outside 1..={horizon}")]
    StageOutOfRange { h: usize, horizon: usize },
    #[error("action {a} outside 0..{actions}")]
    ActionOutOfRange { a: usize, actions: usize },
    #[error("sample count must be at least 1")]
    InvalidSampleCount,
    #[error("start index {0} out of range")]
    NoSuchStart(usize),
    #[error("environment is at {current:?}, cannot step from {requested}")]
    NotCurrentState { current: Option<StateId>, requested: StateId },
    #[error("{0}")]
    Unsupported(&'static str),
}

/// The local-access simulation oracle.
pub trait FeaturizedSimulator {
    fn dim(&self) -> usize;
    fn num_actions(&self) -> usize;
    fn horizon(&self) -> usize;

    /// Issues the identifier and stage-1 features of start state `index`.
    fn start_state(&mut self, index: usize) -> Result<(StateId, FeatureVector), SimError>;

    /// One fresh draw from `Q_{sa}` with the reward shifted and clipped.
    fn simulate(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError>;

    /// `n` independent draws for every action; entry `[a][l]`.
    fn batch_simulate(&mut self, s: StateId, h: usize, n: usize) -> Result<Vec<Vec<SimStep>>, SimError> {
        if n == 0 {
            return Err(SimError::InvalidSampleCount);
        }
        (0..self.num_actions())
            .map(|a| (0..n).map(|_| self.simulate(s, h, a)).collect())
            .collect()
    }

    /// Population values `(E[R'], E[phi_{h+1}(S')])` in exact-expectation
    /// mode; `None` for sampling simulators. Costs one query when answered.
    fn expectation(&mut self, s: StateId, h: usize, a: usize) -> Result<Option<(f64, FeatureVector)>, SimError> {
        let _ = (s, h, a);
        Ok(None)
    }

    /// Moves the real environment from its current state. Rewards are the
    /// true ones and the step is not metered.
    fn env_step(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError>;

    fn reset_episode(&mut self, s0: StateId) -> Result<(), SimError>;

    /// Marks the start of a planner call at stage `h`: zeroes `per_call`, and
    /// `per_episode` as well when `h == 1`.
    fn begin_call(&mut self, h: usize);

    fn query_count(&self) -> QueryLedger;
}

/// Simulators that can be cloned into independent workers and merged back.
pub trait ForkableSimulator: FeaturizedSimulator + Sized + Send + Sync {
    /// A clone with fresh random streams seeded by `seed` and a zeroed
    /// ledger. The visited-state set is inherited.
    fn fork(&self, seed: u64) -> Self;

    /// Merges a fork's ledger and visited states.
    fn join(&mut self, other: Self);
}

pub(crate) fn check_action(a: usize, actions: usize) -> Result<(), SimError> {
    if a >= actions {
        return Err(SimError::ActionOutOfRange { a, actions });
    }
    Ok(())
}

pub(crate) fn check_stage(h: usize, horizon: usize) -> Result<(), SimError> {
    if h == 0 || h > horizon {
        return Err(SimError::StageOutOfRange { h, horizon });
    }
    Ok(())
}
