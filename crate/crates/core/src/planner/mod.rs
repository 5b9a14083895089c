//! TD estimation, the generate-and-test initialisation, in-episode action
//! selection and hyperparameter derivation.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hypothesis::{optimistic_select, HypothesisError, HypothesisSet, OptimizerBudget};
use crate::mdp::{FeatureVector, FeaturizedSimulator, ForkableSimulator, SimError, StateId};
use crate::par;
use crate::seeds::{self, Purpose};
use crate::tensor::{self, TdVector, TensorError};

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{
    derive_params, eps_base, eps_fixed_point, DerivedParams, FaithfulCounts, Multipliers, OptimizerSettings,
    PlannerConfig, Profile, MAX_FIXED_POINT_ITERATIONS,
};

/// Rollouts forked at once in full-rollout mode.
const ROLLOUT_CHUNK: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("invalid config field `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },
    #[error("epsilon fixed point did not converge in {iterations} iterations")]
    NoConvergence { iterations: usize },
    #[error("GetAction called at stage {got}, expected stage {expected}")]
    ProtocolViolation { expected: usize, got: usize },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Hypothesis(#[from] HypothesisError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Averages `concat(R, phi_{h+1}(S') - phi_h(s))` over `n` fresh draws per
/// action. Simulators in exact-expectation mode answer with population values
/// instead, one query per action.
pub fn approx_td<S: FeaturizedSimulator + ?Sized>(
    sim: &mut S,
    s: StateId,
    h: usize,
    feat: &[f64],
    n: usize,
) -> Result<Vec<TdVector>, SimError> {
    if n == 0 {
        return Err(SimError::InvalidSampleCount);
    }
    let actions = sim.num_actions();
    let mut out = Vec::with_capacity(actions);
    for a in 0..actions {
        if let Some((r, next)) = sim.expectation(s, h, a)? {
            let diff: Vec<f64> = next.iter().zip(feat).map(|(x, y)| x - y).collect();
            out.push(TdVector::new(r, &diff));
            continue;
        }
        let mut sum = vec![0.0; feat.len() + 1];
        for _ in 0..n {
            let step = sim.simulate(s, h, a)?;
            sum[0] += step.reward;
            for (acc, x) in sum[1..].iter_mut().zip(step.next_features.iter()) {
                *acc += x;
            }
        }
        let inv = 1.0 / n as f64;
        let mut v: Vec<f64> = sum.iter().map(|x| x * inv).collect();
        for (x, y) in v[1..].iter_mut().zip(feat) {
            *x -= y;
        }
        out.push(TdVector(v));
    }
    Ok(out)
}

/// Action choice and tested quantity at one state.
///
/// Default: the action minimising `|<Delta_a, lift(theta)>|`, tested by that
/// minimum. Strengthened: the action maximising `<Delta_a, lift(theta)>`,
/// tested by the absolute value of that maximum. Ties go to the lowest index.
pub fn choose_action(tds: &[TdVector], theta: &[f64], strengthened: bool) -> (usize, f64) {
    let vals: Vec<f64> = tds.iter().map(|td| td.consistency(theta)).collect();
    if strengthened {
        let (a, v) = vals.iter().enumerate().fold((0, f64::NEG_INFINITY), |acc, (a, &v)| if v > acc.1 { (a, v) } else { acc });
        (a, v.abs())
    } else {
        let (a, v) = vals.iter().enumerate().fold((0, f64::INFINITY), |acc, (a, &v)| if v.abs() < acc.1 { (a, v.abs()) } else { acc });
        (a, v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub tau: u64,
    pub index: u64,
    pub states: Vec<StateId>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// The tested consistency quantity at each visited stage.
    pub tested: Vec<f64>,
    /// First stage whose test failed, if any.
    pub failed_stage: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub tau: u64,
    pub objective: f64,
    pub opt_gap: f64,
    pub nodes: usize,
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerState {
    pub theta_plus: Vec<f64>,
    pub hypothesis: HypothesisSet,
    pub tau_plus: u64,
    pub rollout_log: Vec<RolloutRecord>,
    pub selections: Vec<SelectionSummary>,
}

impl PlannerState {
    pub fn constraints_appended(&self) -> usize {
        self.hypothesis.len()
    }
}

struct Failure {
    state: StateId,
    stage: usize,
    features: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn rollout<S: FeaturizedSimulator>(
    sim: &mut S,
    s0: StateId,
    feat1: &[f64],
    theta: &[f64],
    cfg: &PlannerConfig,
    params: &DerivedParams,
    tau: u64,
    index: u64,
) -> Result<(RolloutRecord, Option<Failure>), PlannerError> {
    let mut rec = RolloutRecord {
        tau,
        index,
        states: Vec::with_capacity(cfg.horizon),
        actions: Vec::with_capacity(cfg.horizon),
        rewards: Vec::with_capacity(cfg.horizon),
        tested: Vec::with_capacity(cfg.horizon),
        failed_stage: None,
    };
    let mut failure = None;
    let (mut s, mut feat) = (s0, feat1.to_vec());
    for j in 1..=cfg.horizon {
        let tds = approx_td(sim, s, j, &feat, params.n2 as usize)?;
        let (a, tested) = choose_action(&tds, theta, cfg.strengthened);
        rec.states.push(s);
        rec.tested.push(tested);
        if tested > params.test_tol && failure.is_none() {
            rec.failed_stage = Some(j);
            failure = Some(Failure { state: s, stage: j, features: feat.clone() });
            if cfg.breaks_early() {
                break;
            }
        }
        let step = sim.simulate(s, j, a)?;
        rec.actions.push(a);
        rec.rewards.push(step.reward);
        s = step.next_state;
        feat = step.next_features.0;
    }
    Ok((rec, failure))
}

/// The generate-and-test loop. Every random stream hangs off `seed`:
/// rollout `t` of iteration `tau` runs on a fork seeded by
/// `(Rollout, tau, t)`, the refinement on one seeded by `(Refine, tau)`, and
/// the optimistic search by `(Optimizer, tau)`.
///
/// Without break-early, rollouts of one iteration run in parallel; the first
/// failure in rollout order is refined after they join. With break-early
/// they run in order and stop at the first failure.
pub fn tensorplan_init<S: ForkableSimulator>(
    sim: &mut S,
    s0: StateId,
    feat1: &FeatureVector,
    cfg: &PlannerConfig,
    params: &DerivedParams,
    seed: u64,
) -> Result<PlannerState, PlannerError> {
    let limit = (params.e_d.saturating_add(2)).min(usize::MAX as u64) as usize;
    let mut hyp = HypothesisSet::new(cfg.d, cfg.actions, cfg.radius, params.threshold)?.with_limit(limit);
    let mut log = Vec::new();
    let mut selections = Vec::new();
    let n1 = params.n1;
    for tau in 1..=params.e_d.saturating_add(2) {
        let budget = OptimizerBudget {
            samples: cfg.optimizer.samples,
            nodes: cfg.optimizer.nodes,
            factor_tol: params.factor_tol,
            polish: cfg.optimizer.polish,
            seed: seeds::derive(seed, Purpose::Optimizer, &[tau]),
        };
        let sel = optimistic_select(&hyp, feat1, &budget)?;
        selections.push(SelectionSummary {
            tau,
            objective: sel.objective,
            opt_gap: sel.opt_gap,
            nodes: sel.nodes,
            certified: sel.certified,
        });
        let theta = sel.theta;

        let mut failure = None;
        if cfg.breaks_early() {
            for t in 0..n1 {
                let mut fork = sim.fork(seeds::derive(seed, Purpose::Rollout, &[tau, t]));
                let (rec, fail) = rollout(&mut fork, s0, feat1, &theta, cfg, params, tau, t)?;
                sim.join(fork);
                log.push(rec);
                if fail.is_some() {
                    failure = fail;
                    break;
                }
            }
        } else {
            let mut start = 0u64;
            while start < n1 {
                let len = (n1 - start).min(ROLLOUT_CHUNK as u64) as usize;
                let shared: &S = sim;
                let results = par::map_indexed(len, |i| {
                    let t = start + i as u64;
                    let mut fork = shared.fork(seeds::derive(seed, Purpose::Rollout, &[tau, t]));
                    rollout(&mut fork, s0, feat1, &theta, cfg, params, tau, t).map(|r| (r, fork))
                });
                for res in results {
                    let ((rec, fail), fork) = res?;
                    sim.join(fork);
                    log.push(rec);
                    if failure.is_none() {
                        failure = fail;
                    }
                }
                start += len as u64;
            }
        }

        match failure {
            None => {
                return Ok(PlannerState { theta_plus: theta, hypothesis: hyp, tau_plus: tau, rollout_log: log, selections });
            }
            Some(f) => {
                let mut fork = sim.fork(seeds::derive(seed, Purpose::Refine, &[tau]));
                let refined = approx_td(&mut fork, f.state, f.stage, &f.features, params.n3 as usize)?;
                sim.join(fork);
                hyp = hyp.append_constraint(tensor::tensor_flatten(&refined)?)?;
            }
        }
    }
    Err(PlannerError::Hypothesis(HypothesisError::BudgetExceeded { limit }))
}

/// Algorithm state for one planner instance: config, derived parameters and
/// the per-episode `theta+`.
#[derive(Debug, Clone)]
pub struct TensorPlan {
    cfg: PlannerConfig,
    params: DerivedParams,
    state: Option<PlannerState>,
    next_stage: usize,
    episode_seed: u64,
}

impl TensorPlan {
    pub fn new(cfg: PlannerConfig) -> Result<Self, PlannerError> {
        let params = derive_params(&cfg)?;
        Ok(Self::with_params(cfg, params))
    }

    /// Uses explicitly supplied parameters instead of the derived ones.
    pub fn with_params(cfg: PlannerConfig, params: DerivedParams) -> Self {
        let episode_seed = seeds::derive(cfg.seed, Purpose::Episode, &[0]);
        Self { cfg, params, state: None, next_stage: 1, episode_seed }
    }

    pub fn config(&self) -> &PlannerConfig {
        &self.cfg
    }

    pub fn params(&self) -> &DerivedParams {
        &self.params
    }

    pub fn state(&self) -> Option<&PlannerState> {
        self.state.as_ref()
    }

    pub fn episode_seed(&self) -> u64 {
        self.episode_seed
    }

    /// Forgets `theta+` and derives the streams of episode `episode`.
    pub fn begin_episode(&mut self, episode: u64) {
        self.state = None;
        self.next_stage = 1;
        self.episode_seed = seeds::derive(self.cfg.seed, Purpose::Episode, &[episode]);
    }

    /// Restores a saved `theta+` for the remaining stages of an episode.
    pub fn resume(&mut self, state: PlannerState, next_stage: usize) {
        self.state = Some(state);
        self.next_stage = next_stage;
    }

    /// `GetAction(s, h, phi_h(s))`. Stage 1 starts an episode and runs the
    /// initialisation; later stages must follow consecutively.
    pub fn get_action<S: ForkableSimulator>(
        &mut self,
        sim: &mut S,
        s: StateId,
        h: usize,
        feat: &FeatureVector,
    ) -> Result<usize, PlannerError> {
        if h == 0 || h > self.cfg.horizon || (h != 1 && h != self.next_stage) {
            return Err(PlannerError::ProtocolViolation { expected: self.next_stage, got: h });
        }
        sim.begin_call(h);
        if h == 1 {
            self.state = None;
            let st = tensorplan_init(sim, s, feat, &self.cfg, &self.params, self.episode_seed)?;
            self.state = Some(st);
        }
        let theta = &self.state.as_ref().expect("initialised at stage 1").theta_plus;
        let tds = approx_td(sim, s, h, feat, self.params.n2 as usize)?;
        let (a, _) = choose_action(&tds, theta, self.cfg.strengthened);
        self.next_stage = h + 1;
        Ok(a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: StateId,
    pub action: usize,
    pub reward: f64,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Vec<Step>,
    pub ret: f64,
    /// Ledger reading after the last call.
    pub queries: u64,
    /// Queries of each `GetAction` call.
    pub per_call: Vec<u64>,
    pub state: PlannerState,
}

/// Plays one episode from start state `start`: `GetAction` for
/// `h = 1..=H`, each action applied to the real environment.
pub fn run_episode<S: ForkableSimulator>(
    sim: &mut S,
    planner: &mut TensorPlan,
    start: usize,
    episode: u64,
) -> Result<Episode, PlannerError> {
    let (s0, mut feat) = sim.start_state(start)?;
    sim.reset_episode(s0)?;
    planner.begin_episode(episode);
    let mut s = s0;
    let mut trajectory = Vec::with_capacity(planner.cfg.horizon);
    let mut per_call = Vec::with_capacity(planner.cfg.horizon);
    let mut ret = 0.0;
    for h in 1..=planner.cfg.horizon {
        let a = planner.get_action(sim, s, h, &feat)?;
        per_call.push(sim.query_count().per_call);
        let step = sim.env_step(s, h, a)?;
        trajectory.push(Step { state: s, action: a, reward: step.reward });
        ret += step.reward;
        s = step.next_state;
        feat = step.next_features;
    }
    let state = planner.state.clone().expect("episode initialised");
    Ok(Episode { trajectory, ret, queries: sim.query_count().per_episode, per_call, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmin_prefers_smaller_magnitude_and_lowest_index() {
        let tds = vec![TdVector(vec![0.3, 0.0]), TdVector(vec![-0.1, 0.0])];
        assert_eq!(choose_action(&tds, &[0.0], false).0, 1);
        let tied = vec![TdVector(vec![0.2, 0.0]), TdVector(vec![-0.2, 0.0])];
        assert_eq!(choose_action(&tied, &[0.0], false).0, 0);
        assert_eq!(choose_action(&tds, &[0.0], true), (0, 0.3));
    }

    #[test]
    fn argmin_is_scale_invariant() {
        let tds = vec![TdVector(vec![0.7, 0.1, -0.4]), TdVector(vec![-0.2, 0.5, 0.3]), TdVector(vec![0.05, -0.6, 0.2])];
        let theta = [0.4, -0.3];
        let a = choose_action(&tds, &theta, false).0;
        for c in [1e-6, 0.5, 3.0, 1e6] {
            let scaled: Vec<TdVector> = tds.iter().map(|t| TdVector(t.0.iter().map(|x| x * c).collect())).collect();
            assert_eq!(choose_action(&scaled, &theta, false).0, a);
        }
    }
}
