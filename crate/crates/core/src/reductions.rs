//! Simulator transformations: the stage-annotating wrapper for misspecified
//! problems and the discounting wrapper with its effective horizon.
//!
//! Both wrappers expose states `(s, h)` plus an absorbing `⊥`. Wrapped
//! identifiers are tokens hashed from `(base token, stage)`; the wrapper keeps
//! its own token map so the locality contract still holds.

use std::collections::HashMap;

use thiserror::Error;

use crate::mdp::{
    check_action, FeatureVector, FeaturizedSimulator, ForkableSimulator, MdpFormatError, Outcome, QueryLedger,
    SimError, SimStep, StateId, TabularMdp,
};
use crate::seeds::splitmix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReductionError {
    #[error("{param} = {value} is out of range")]
    OutOfRange { param: &'static str, value: f64 },
    #[error(transparent)]
    Format(#[from] MdpFormatError),
}

/// `ceil((log((1 - gamma) eta) / log gamma) / (1 - gamma))` for
/// `0 < gamma < 1`, `0 < eta < 1`.
pub fn effective_horizon(gamma: f64, eta: f64) -> Result<usize, ReductionError> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(ReductionError::OutOfRange { param: "gamma", value: gamma });
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(ReductionError::OutOfRange { param: "eta", value: eta });
    }
    let x = ((1.0 - gamma) * eta).ln() / gamma.ln() / (1.0 - gamma);
    Ok((x.ceil() as usize).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscountParams {
    pub gamma: f64,
    pub eta: f64,
    pub h_eff: usize,
}

impl DiscountParams {
    /// `gamma = 0` uses `H_eff = 1`: only the first reward counts.
    pub fn new(gamma: f64, eta: f64) -> Result<Self, ReductionError> {
        let h_eff = if gamma == 0.0 {
            if !(eta > 0.0) {
                return Err(ReductionError::OutOfRange { param: "eta", value: eta });
            }
            1
        } else {
            effective_horizon(gamma, eta)?
        };
        Ok(Self { gamma, eta, h_eff })
    }

    pub fn tail(&self) -> f64 {
        self.gamma.powi(self.h_eff as i32) / (1.0 - self.gamma)
    }
}

/// A staged state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Staged {
    At(StateId, usize),
    Bottom,
}

#[derive(Debug, Clone)]
struct StageMap {
    key: u64,
    map: HashMap<StateId, Staged>,
}

impl StageMap {
    fn new(key: u64) -> Self {
        Self { key, map: HashMap::new() }
    }

    fn token(&self, st: Staged) -> StateId {
        match st {
            Staged::At(s, h) => StateId::from_raw(splitmix64(s.raw() ^ splitmix64(self.key ^ h as u64))),
            Staged::Bottom => StateId::from_raw(splitmix64(self.key ^ 0x5EED_B0770)),
        }
    }

    fn issue(&mut self, st: Staged) -> StateId {
        let id = self.token(st);
        self.map.insert(id, st);
        id
    }

    fn lookup(&self, s: StateId) -> Result<Staged, SimError> {
        self.map.get(&s).copied().ok_or(SimError::UnknownState(s))
    }
}

#[derive(Debug, Clone, Copy)]
enum Scaling {
    Relay,
    Discount(f64),
}

/// Shared machinery of both wrappers.
#[derive(Debug, Clone)]
struct Staging<S> {
    base: S,
    horizon: usize,
    scaling: Scaling,
    ids: StageMap,
    current: Option<StateId>,
    bottom_queries: QueryLedger,
}

impl<S: FeaturizedSimulator> Staging<S> {
    fn scale(&self, h: usize) -> f64 {
        match self.scaling {
            Scaling::Relay => 1.0,
            Scaling::Discount(g) => g.powi(h as i32 - 1),
        }
    }

    fn check(&self, h: usize, a: usize) -> Result<(), SimError> {
        if h == 0 || h > self.horizon {
            return Err(SimError::StageOutOfRange { h, horizon: self.horizon });
        }
        check_action(a, self.base.num_actions())
    }

    fn bottom_step(&mut self) -> SimStep {
        SimStep { reward: 0.0, next_state: self.ids.issue(Staged::Bottom), next_features: FeatureVector::zeros(self.base.dim()) }
    }

    fn features_at(&self, h: usize, phi: FeatureVector) -> FeatureVector {
        match self.scaling {
            Scaling::Relay => phi,
            Scaling::Discount(_) => phi.scaled(self.scale(h)),
        }
    }

    fn relay(&mut self, stage: usize, step: SimStep) -> SimStep {
        if stage >= self.horizon {
            return SimStep {
                reward: step.reward * self.scale(stage),
                next_state: self.ids.issue(Staged::Bottom),
                next_features: FeatureVector::zeros(self.base.dim()),
            };
        }
        SimStep {
            reward: step.reward * self.scale(stage),
            next_state: self.ids.issue(Staged::At(step.next_state, stage + 1)),
            next_features: self.features_at(stage + 1, step.next_features),
        }
    }

    fn base_stage(&self, h: usize) -> usize {
        match self.scaling {
            Scaling::Relay => h,
            // stationary base: the stage argument only has to be valid
            Scaling::Discount(_) => 1,
        }
    }

    fn simulate(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
        let st = self.ids.lookup(s)?;
        self.check(h, a)?;
        match st {
            Staged::Bottom => {
                self.bottom_queries.record(1);
                Ok(self.bottom_step())
            }
            Staged::At(base_s, stage) => {
                let step = self.base.simulate(base_s, self.base_stage(h), a)?;
                Ok(self.relay(stage, step))
            }
        }
    }

    fn expectation(&mut self, s: StateId, h: usize, a: usize) -> Result<Option<(f64, FeatureVector)>, SimError> {
        let st = self.ids.lookup(s)?;
        self.check(h, a)?;
        match st {
            Staged::Bottom => {
                self.bottom_queries.record(1);
                Ok(Some((0.0, FeatureVector::zeros(self.base.dim()))))
            }
            Staged::At(base_s, stage) => {
                let Some((r, phi)) = self.base.expectation(base_s, self.base_stage(h), a)? else {
                    return Ok(None);
                };
                let phi = if stage >= self.horizon { FeatureVector::zeros(self.base.dim()) } else { self.features_at(stage + 1, phi) };
                Ok(Some((r * self.scale(stage), phi)))
            }
        }
    }

    fn start_state(&mut self, index: usize) -> Result<(StateId, FeatureVector), SimError> {
        let (s, phi) = self.base.start_state(index)?;
        Ok((self.ids.issue(Staged::At(s, 1)), phi))
    }

    fn env_step(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
        if self.current != Some(s) {
            return Err(SimError::NotCurrentState { current: self.current, requested: s });
        }
        let st = self.ids.lookup(s)?;
        self.check(h, a)?;
        let out = match st {
            Staged::Bottom => self.bottom_step(),
            Staged::At(base_s, stage) => {
                let step = self.base.env_step(base_s, self.base_stage(h), a)?;
                self.relay(stage, step)
            }
        };
        self.current = Some(out.next_state);
        Ok(out)
    }

    fn reset_episode(&mut self, s0: StateId) -> Result<(), SimError> {
        match self.ids.lookup(s0)? {
            Staged::At(base_s, 1) => {
                self.base.reset_episode(base_s)?;
                self.current = Some(s0);
                self.bottom_queries = QueryLedger::default();
                Ok(())
            }
            _ => Err(SimError::NotAStartState(s0)),
        }
    }

    fn begin_call(&mut self, h: usize) {
        self.base.begin_call(h);
        self.bottom_queries.per_call = 0;
        if h == 1 {
            self.bottom_queries.per_episode = 0;
        }
    }

    fn query_count(&self) -> QueryLedger {
        let mut q = self.base.query_count();
        q.merge(self.bottom_queries);
        q
    }
}

impl<S: ForkableSimulator> Staging<S> {
    fn fork(&self, seed: u64) -> Self {
        Self {
            base: self.base.fork(seed),
            horizon: self.horizon,
            scaling: self.scaling,
            ids: self.ids.clone(),
            current: self.current,
            bottom_queries: QueryLedger::default(),
        }
    }

    fn join(&mut self, other: Self) {
        self.base.join(other.base);
        self.ids.map.extend(other.ids.map);
        self.bottom_queries.merge(other.bottom_queries);
    }
}

macro_rules! forward_simulator {
    ($ty:ident) => {
        impl<S: FeaturizedSimulator> FeaturizedSimulator for $ty<S> {
            fn dim(&self) -> usize {
                self.0.base.dim()
            }
            fn num_actions(&self) -> usize {
                self.0.base.num_actions()
            }
            fn horizon(&self) -> usize {
                self.0.horizon
            }
            fn start_state(&mut self, index: usize) -> Result<(StateId, FeatureVector), SimError> {
                self.0.start_state(index)
            }
            fn simulate(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
                self.0.simulate(s, h, a)
            }
            fn expectation(&mut self, s: StateId, h: usize, a: usize) -> Result<Option<(f64, FeatureVector)>, SimError> {
                self.0.expectation(s, h, a)
            }
            fn env_step(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
                self.0.env_step(s, h, a)
            }
            fn reset_episode(&mut self, s0: StateId) -> Result<(), SimError> {
                self.0.reset_episode(s0)
            }
            fn begin_call(&mut self, h: usize) {
                self.0.begin_call(h)
            }
            fn query_count(&self) -> QueryLedger {
                self.0.query_count()
            }
        }

        impl<S: ForkableSimulator> ForkableSimulator for $ty<S> {
            fn fork(&self, seed: u64) -> Self {
                $ty(self.0.fork(seed))
            }
            fn join(&mut self, other: Self) {
                self.0.join(other.0)
            }
        }

        impl<S> $ty<S> {
            /// The staged state behind a wrapped identifier.
            pub fn resolve(&self, s: StateId) -> Option<Staged> {
                self.0.ids.map.get(&s).copied()
            }

            pub fn base(&self) -> &S {
                &self.0.base
            }
        }
    };
}

/// `Simulate'`: relays base queries on `(s, h)` states, ending in `⊥` after
/// stage `H`. Rewards pass through unchanged.
#[derive(Debug, Clone)]
pub struct StageWrapper<S>(Staging<S>);

impl<S: FeaturizedSimulator> StageWrapper<S> {
    pub fn new(base: S, key: u64) -> Self {
        let horizon = base.horizon();
        StageWrapper(Staging {
            base,
            horizon,
            scaling: Scaling::Relay,
            ids: StageMap::new(key),
            current: None,
            bottom_queries: QueryLedger::default(),
        })
    }
}

forward_simulator!(StageWrapper);

/// `Simulate^{gamma}`: stage-annotated states over a stationary base with
/// horizon `H_eff`; rewards and features at stage `h` are scaled by
/// `gamma^{h-1}`.
#[derive(Debug, Clone)]
pub struct DiscountWrapper<S>(Staging<S>);

impl<S: FeaturizedSimulator> DiscountWrapper<S> {
    pub fn new(base: S, params: DiscountParams, key: u64) -> Self {
        DiscountWrapper(Staging {
            base,
            horizon: params.h_eff,
            scaling: Scaling::Discount(params.gamma),
            ids: StageMap::new(key),
            current: None,
            bottom_queries: QueryLedger::default(),
        })
    }
}

forward_simulator!(DiscountWrapper);

/// Index layout of an explicitly expanded MDP: `(s, h)` at
/// `(h - 1) * n + s`, `⊥` last.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageLayout {
    pub n: usize,
    pub horizon: usize,
}

impl StageLayout {
    pub fn index(&self, s: usize, h: usize) -> usize {
        (h - 1) * self.n + s
    }

    pub fn bottom(&self) -> usize {
        self.horizon * self.n
    }

    pub fn states(&self) -> usize {
        self.horizon * self.n + 1
    }

    /// `Some((s, h))`, or `None` for `⊥`.
    pub fn decode(&self, i: usize) -> Option<(usize, usize)> {
        (i < self.bottom()).then(|| (i % self.n, i / self.n + 1))
    }
}

fn expand(
    mdp: &TabularMdp,
    horizon: usize,
    reward_scale: impl Fn(usize) -> f64,
    features: impl Fn(usize, usize) -> Vec<f64>,
) -> Result<(TabularMdp, StageLayout), ReductionError> {
    let layout = StageLayout { n: mdp.n_states(), horizon };
    let a_count = mdp.actions();
    let mut transitions = Vec::with_capacity(layout.states());
    for h in 1..=horizon {
        for s in 0..layout.n {
            let row = (0..a_count)
                .map(|a| {
                    mdp.outcomes(s, a)
                        .iter()
                        .map(|o| Outcome {
                            prob: o.prob,
                            reward: o.reward * reward_scale(h),
                            next: if h < horizon { layout.index(o.next, h + 1) } else { layout.bottom() },
                        })
                        .collect()
                })
                .collect();
            transitions.push(row);
        }
    }
    transitions.push(vec![vec![Outcome { prob: 1.0, reward: 0.0, next: layout.bottom() }]; a_count]);
    let mut row = Vec::with_capacity(layout.states());
    for h in 1..=horizon {
        for s in 0..layout.n {
            row.push(features(s, h));
        }
    }
    row.push(vec![0.0; mdp.dim()]);
    // state features do not depend on the stage argument of the expanded MDP
    let mut table = vec![row; horizon];
    table.push(vec![vec![0.0; mdp.dim()]; layout.states()]);
    let starts = mdp.start_states().iter().map(|&s| layout.index(s, 1)).collect();
    let out = TabularMdp::new(a_count, horizon, mdp.dim(), transitions, table, starts)?;
    Ok((out, layout))
}

/// The explicit stage-expanded MDP `S x [H] ∪ {⊥}` with
/// `phi'((s, h)) = phi_h(s)`.
pub fn expand_stages(mdp: &TabularMdp) -> Result<(TabularMdp, StageLayout), ReductionError> {
    expand(mdp, mdp.horizon(), |_| 1.0, |s, h| mdp.features(h, s).to_vec())
}

/// The explicit MDP behind [`DiscountWrapper`] over a stationary `mdp` whose
/// stage-1 features are `phi`.
pub fn expand_discounted(mdp: &TabularMdp, params: DiscountParams) -> Result<(TabularMdp, StageLayout), ReductionError> {
    let g = params.gamma;
    expand(
        mdp,
        params.h_eff,
        |h| g.powi(h as i32 - 1),
        |s, h| mdp.features(1, s).iter().map(|x| x * g.powi(h as i32 - 1)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::mdp::TabularSimulator;

    fn chain() -> Arc<TabularMdp> {
        let t = vec![
            vec![vec![Outcome { prob: 1.0, reward: 0.0, next: 0 }], vec![Outcome { prob: 1.0, reward: 1.0, next: 1 }]],
            vec![vec![Outcome { prob: 1.0, reward: 0.5, next: 1 }], vec![Outcome { prob: 1.0, reward: 1.0, next: 0 }]],
        ];
        let f = vec![vec![vec![1.0], vec![0.5]], vec![vec![0.5], vec![0.25]]];
        Arc::new(TabularMdp::new(2, 2, 1, t, f, vec![0]).unwrap())
    }

    #[test]
    fn effective_horizon_examples() {
        assert_eq!(effective_horizon(0.5, 0.5).unwrap(), 4);
        // 50-digit evaluations: 655.04..., 437.44...
        assert_eq!(effective_horizon(0.9, 0.01).unwrap(), 656);
        assert_eq!(effective_horizon(0.9, 0.1).unwrap(), 438);
        assert_eq!(effective_horizon(0.5, 0.1).unwrap(), 9);
        assert!(effective_horizon(0.95, 0.01).unwrap() >= effective_horizon(0.9, 0.01).unwrap());
        assert!(matches!(effective_horizon(0.0, 0.1), Err(ReductionError::OutOfRange { param: "gamma", .. })));
        assert!(matches!(effective_horizon(1.0, 0.1), Err(ReductionError::OutOfRange { .. })));
        assert_eq!(DiscountParams::new(0.0, 0.1).unwrap().h_eff, 1);
    }

    #[test]
    fn stage_wrapper_terminal_and_bottom() {
        let mut w = StageWrapper::new(TabularSimulator::new(chain(), 1), 7);
        let (s, _) = w.start_state(0).unwrap();
        let st = w.simulate(s, 1, 1).unwrap();
        assert_eq!(w.resolve(st.next_state).map(|x| matches!(x, Staged::At(_, 2))), Some(true));
        assert_eq!(st.next_features.0, vec![0.25]);
        let last = w.simulate(st.next_state, 2, 0).unwrap();
        assert_eq!(w.resolve(last.next_state), Some(Staged::Bottom));
        assert_eq!(last.reward, 0.5);
        assert_eq!(last.next_features.0, vec![0.0]);
        for a in 0..2 {
            let b = w.simulate(last.next_state, 1, a).unwrap();
            assert_eq!((b.reward, b.next_state, b.next_features.0.clone()), (0.0, last.next_state, vec![0.0]));
        }
    }

    #[test]
    fn one_wrapped_query_is_one_base_query() {
        let mut w = StageWrapper::new(TabularSimulator::new(chain(), 1), 7);
        let (s, _) = w.start_state(0).unwrap();
        w.reset_episode(s).unwrap();
        w.simulate(s, 1, 0).unwrap();
        assert_eq!(w.base().query_count().per_call, 1);
        assert_eq!(w.query_count().per_call, 1);
    }

    #[test]
    fn discount_scales_rewards_and_features() {
        let mdp = Arc::new(TabularMdp::new(1, 1, 1, vec![vec![vec![Outcome { prob: 1.0, reward: 1.0, next: 0 }]]], vec![vec![vec![0.8]]], vec![0]).unwrap());
        let params = DiscountParams { gamma: 0.5, eta: 0.1, h_eff: 4 };
        let mut w = DiscountWrapper::new(TabularSimulator::new(mdp, 1).stationary(), params, 3);
        let (mut s, phi) = w.start_state(0).unwrap();
        assert_eq!(phi.0, vec![0.8]);
        let mut rewards = Vec::new();
        for h in 1..=4 {
            let st = w.simulate(s, h, 0).unwrap();
            rewards.push(st.reward);
            if h < 4 {
                assert_eq!(st.next_features.0, vec![0.8 * 0.5f64.powi(h as i32)]);
            }
            s = st.next_state;
        }
        assert_eq!(rewards, vec![1.0, 0.5, 0.25, 0.125]);
        assert_eq!(w.resolve(s), Some(Staged::Bottom));
    }

    #[test]
    fn gamma_zero_collapses_to_one_stage() {
        let mdp = Arc::new(TabularMdp::new(1, 1, 1, vec![vec![vec![Outcome { prob: 1.0, reward: 0.7, next: 0 }]]], vec![vec![vec![0.8]]], vec![0]).unwrap());
        let mut w = DiscountWrapper::new(TabularSimulator::new(mdp, 1).stationary(), DiscountParams::new(0.0, 0.1).unwrap(), 3);
        let (s, _) = w.start_state(0).unwrap();
        let st = w.simulate(s, 1, 0).unwrap();
        assert_eq!(st.reward, 0.7);
        assert_eq!(w.simulate(st.next_state, 1, 0).unwrap().reward, 0.0);
    }

    #[test]
    fn expansion_levels_stages() {
        let (big, layout) = expand_stages(&chain()).unwrap();
        assert_eq!(big.n_states(), 5);
        for i in 0..layout.states() {
            for a in 0..big.actions() {
                for o in big.outcomes(i, a) {
                    match (layout.decode(i), layout.decode(o.next)) {
                        (Some((_, h)), Some((_, h2))) => assert_eq!(h2, h + 1),
                        (Some((_, h)), None) => assert_eq!(h, layout.horizon),
                        (None, next) => assert_eq!(next, None),
                    }
                }
            }
        }
    }
}
