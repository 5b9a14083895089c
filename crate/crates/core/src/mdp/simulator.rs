use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{check_action, check_stage, FeatureVector, FeaturizedSimulator, ForkableSimulator, QueryLedger, SimError, SimStep, StateId, TabularMdp};
use crate::seeds::{self, splitmix64, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingMode {
    /// Fresh draws from `Q_{sa}`.
    #[default]
    Sampled,
    /// [`FeaturizedSimulator::expectation`] returns population values.
    ExactExpectation,
}

/// Local-access simulator over a [`TabularMdp`].
///
/// Tokens are `splitmix64(index ^ key)`, a bijection of the internal index,
/// so forks agree on identifiers while each keeps its own visited set.
#[derive(Debug, Clone)]
pub struct TabularSimulator {
    mdp: Arc<TabularMdp>,
    offsets: Option<Arc<Vec<f64>>>,
    mode: SamplingMode,
    stationary: bool,
    id_key: u64,
    visited: HashMap<StateId, usize>,
    current: Option<StateId>,
    rng: ChaCha8Rng,
    env_rng: ChaCha8Rng,
    ledger: QueryLedger,
}

impl TabularSimulator {
    pub fn new(mdp: Arc<TabularMdp>, seed: u64) -> Self {
        Self {
            mdp,
            offsets: None,
            mode: SamplingMode::Sampled,
            stationary: false,
            id_key: seeds::derive(seed, Purpose::Simulator, &[u64::MAX]),
            visited: HashMap::new(),
            current: None,
            rng: seeds::derived_rng(seed, Purpose::Simulator, &[]),
            env_rng: seeds::derived_rng(seed, Purpose::Environment, &[]),
            ledger: QueryLedger::default(),
        }
    }

    pub fn with_mode(mut self, mode: SamplingMode) -> Self {
        self.mode = mode;
        self
    }

    /// Stage-free view for discounted problems: every stage uses the stage-1
    /// features and the horizon is not enforced.
    pub fn stationary(mut self) -> Self {
        self.stationary = true;
        self
    }

    /// Installs constant per-(s, a) reward offsets, indexed `s * A + a`.
    pub fn with_offsets(mut self, offsets: Vec<f64>) -> Self {
        assert_eq!(offsets.len(), self.mdp.n_states() * self.mdp.actions());
        self.offsets = Some(Arc::new(offsets));
        self
    }

    pub fn mdp(&self) -> &TabularMdp {
        &self.mdp
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn offset(&self, s: usize, a: usize) -> f64 {
        self.offsets.as_ref().map_or(0.0, |o| o[s * self.mdp.actions() + a])
    }

    pub fn is_stationary(&self) -> bool {
        self.stationary
    }

    /// Internal index behind a visited token.
    pub fn index_of(&self, s: StateId) -> Option<usize> {
        self.visited.get(&s).copied()
    }

    /// Token for an internal index without registering it as visited.
    pub fn token_of(&self, index: usize) -> StateId {
        StateId::from_raw(splitmix64(index as u64 ^ self.id_key))
    }

    pub fn visited_count(&self) -> usize {
        self.visited.len()
    }

    fn issue(&mut self, index: usize) -> StateId {
        let id = self.token_of(index);
        self.visited.insert(id, index);
        id
    }

    fn lookup(&self, s: StateId) -> Result<usize, SimError> {
        self.visited.get(&s).copied().ok_or(SimError::UnknownState(s))
    }

    fn check(&self, s: StateId, h: usize, a: usize) -> Result<usize, SimError> {
        let idx = self.lookup(s)?;
        if !self.stationary {
            check_stage(h, self.mdp.horizon())?;
        } else if h == 0 {
            return Err(SimError::StageOutOfRange { h, horizon: usize::MAX });
        }
        check_action(a, self.mdp.actions())?;
        Ok(idx)
    }

    fn next_stage_features(&self, h: usize, next: usize) -> FeatureVector {
        let stage = if self.stationary { 1 } else { h + 1 };
        FeatureVector(self.mdp.features(stage, next).to_vec())
    }

    fn draw(rng: &mut ChaCha8Rng, mdp: &TabularMdp, s: usize, a: usize) -> (f64, usize) {
        let outcomes = mdp.outcomes(s, a);
        if outcomes.len() == 1 {
            return (outcomes[0].reward, outcomes[0].next);
        }
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for o in outcomes {
            acc += o.prob;
            if u < acc {
                return (o.reward, o.next);
            }
        }
        let last = outcomes.last().unwrap();
        (last.reward, last.next)
    }

    fn clipped(&self, reward: f64, s: usize, a: usize) -> f64 {
        (reward + self.offset(s, a)).clamp(0.0, 1.0)
    }
}

impl FeaturizedSimulator for TabularSimulator {
    fn dim(&self) -> usize {
        self.mdp.dim()
    }

    fn num_actions(&self) -> usize {
        self.mdp.actions()
    }

    fn horizon(&self) -> usize {
        self.mdp.horizon()
    }

    fn start_state(&mut self, index: usize) -> Result<(StateId, FeatureVector), SimError> {
        let s = *self.mdp.start_states().get(index).ok_or(SimError::NoSuchStart(index))?;
        let id = self.issue(s);
        Ok((id, FeatureVector(self.mdp.features(1, s).to_vec())))
    }

    fn simulate(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
        let idx = self.check(s, h, a)?;
        let (reward, next) = Self::draw(&mut self.rng, &self.mdp, idx, a);
        let reward = self.clipped(reward, idx, a);
        self.ledger.record(1);
        let next_features = self.next_stage_features(h, next);
        Ok(SimStep { reward, next_state: self.issue(next), next_features })
    }

    fn expectation(&mut self, s: StateId, h: usize, a: usize) -> Result<Option<(f64, FeatureVector)>, SimError> {
        if self.mode != SamplingMode::ExactExpectation {
            return Ok(None);
        }
        let idx = self.check(s, h, a)?;
        self.ledger.record(1);
        let stage = if self.stationary { 1 } else { h + 1 };
        let mut reward = 0.0;
        let mut phi = vec![0.0; self.mdp.dim()];
        for o in self.mdp.outcomes(idx, a) {
            reward += o.prob * self.clipped(o.reward, idx, a);
            for (acc, x) in phi.iter_mut().zip(self.mdp.features(stage, o.next)) {
                *acc += o.prob * x;
            }
        }
        // successors become reachable identifiers, as with sampled queries
        let nexts: Vec<usize> = self.mdp.outcomes(idx, a).iter().map(|o| o.next).collect();
        for n in nexts {
            self.issue(n);
        }
        Ok(Some((reward, FeatureVector(phi))))
    }

    fn env_step(&mut self, s: StateId, h: usize, a: usize) -> Result<SimStep, SimError> {
        if self.current != Some(s) {
            return Err(SimError::NotCurrentState { current: self.current, requested: s });
        }
        let idx = self.check(s, h, a)?;
        let (reward, next) = Self::draw(&mut self.env_rng, &self.mdp, idx, a);
        let next_features = self.next_stage_features(h, next);
        let next_state = self.issue(next);
        self.current = Some(next_state);
        Ok(SimStep { reward, next_state, next_features })
    }

    fn reset_episode(&mut self, s0: StateId) -> Result<(), SimError> {
        let idx = self.lookup(s0)?;
        if !self.mdp.start_states().contains(&idx) {
            return Err(SimError::NotAStartState(s0));
        }
        self.current = Some(s0);
        self.ledger = QueryLedger::default();
        Ok(())
    }

    fn begin_call(&mut self, h: usize) {
        self.ledger.per_call = 0;
        if h == 1 {
            self.ledger.per_episode = 0;
        }
    }

    fn query_count(&self) -> QueryLedger {
        self.ledger
    }
}

impl ForkableSimulator for TabularSimulator {
    fn fork(&self, seed: u64) -> Self {
        Self {
            mdp: Arc::clone(&self.mdp),
            offsets: self.offsets.clone(),
            mode: self.mode,
            stationary: self.stationary,
            id_key: self.id_key,
            visited: self.visited.clone(),
            current: self.current,
            rng: seeds::derived_rng(seed, Purpose::Simulator, &[]),
            env_rng: seeds::derived_rng(seed, Purpose::Environment, &[]),
            ledger: QueryLedger::default(),
        }
    }

    fn join(&mut self, other: Self) {
        self.ledger.merge(other.ledger);
        self.visited.extend(other.visited);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Outcome;

    /// Two states; action 1 moves s0 -> s1 with reward 1, action 0 stays with
    /// reward 0.
    pub(crate) fn chain() -> Arc<TabularMdp> {
        let stay0 = vec![Outcome { prob: 1.0, reward: 0.0, next: 0 }];
        let move0 = vec![Outcome { prob: 1.0, reward: 1.0, next: 1 }];
        let stay1 = vec![Outcome { prob: 1.0, reward: 0.0, next: 1 }];
        let move1 = vec![Outcome { prob: 1.0, reward: 0.95, next: 1 }];
        let f = vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![vec![0.6, 0.0], vec![0.0, 0.6]]];
        Arc::new(TabularMdp::new(2, 2, 2, vec![vec![stay0, move0], vec![stay1, move1]], f, vec![0]).unwrap())
    }

    fn coin() -> Arc<TabularMdp> {
        let flip = vec![Outcome { prob: 0.3, reward: 1.0, next: 1 }, Outcome { prob: 0.7, reward: 0.0, next: 0 }];
        let f = vec![vec![vec![0.5], vec![-0.5]]];
        Arc::new(TabularMdp::new(1, 1, 1, vec![vec![flip.clone()], vec![flip]], f, vec![0]).unwrap())
    }

    #[test]
    fn deterministic_move_matches_table() {
        let mdp = chain();
        let mut sim = TabularSimulator::new(mdp.clone(), 1);
        let (s0, phi) = sim.start_state(0).unwrap();
        assert_eq!(phi.0, vec![1.0, 0.0]);
        let step = sim.simulate(s0, 1, 1).unwrap();
        assert_eq!(step.reward, 1.0);
        assert_eq!(sim.index_of(step.next_state), Some(1));
        assert_eq!(step.next_features.0, mdp.features(2, 1));
        // last stage delivers the zero past-horizon features
        let last = sim.simulate(step.next_state, 2, 1).unwrap();
        assert_eq!(last.next_features.0, vec![0.0, 0.0]);
    }

    #[test]
    fn zero_reward_with_zero_inaccuracy() {
        let mut sim = TabularSimulator::new(chain(), 3);
        let (s0, _) = sim.start_state(0).unwrap();
        assert_eq!(sim.simulate(s0, 1, 0).unwrap().reward, 0.0);
    }

    #[test]
    fn rewards_are_shifted_then_clipped() {
        let mut sim = TabularSimulator::new(chain(), 3).with_offsets(vec![0.0, 0.0, 0.0, 0.1]);
        let (s0, _) = sim.start_state(0).unwrap();
        let s1 = sim.simulate(s0, 1, 1).unwrap().next_state;
        for _ in 0..3 {
            assert_eq!(sim.simulate(s1, 2, 1).unwrap().reward, 1.0);
        }
    }

    #[test]
    fn ledger_semantics() {
        let mut sim = TabularSimulator::new(chain(), 3);
        let (s0, _) = sim.start_state(0).unwrap();
        sim.reset_episode(s0).unwrap();
        assert_eq!(sim.query_count(), QueryLedger { per_call: 0, per_episode: 0 });
        sim.simulate(s0, 1, 0).unwrap();
        assert_eq!(sim.query_count(), QueryLedger { per_call: 1, per_episode: 1 });
        sim.begin_call(2);
        sim.simulate(s0, 2, 0).unwrap();
        sim.simulate(s0, 2, 0).unwrap();
        assert_eq!(sim.query_count(), QueryLedger { per_call: 2, per_episode: 3 });
        sim.reset_episode(s0).unwrap();
        assert_eq!(sim.query_count().per_episode, 0);
    }

    #[test]
    fn locality_and_range_errors() {
        let mut sim = TabularSimulator::new(chain(), 3);
        let (s0, _) = sim.start_state(0).unwrap();
        let fake = StateId::from_raw(s0.raw() ^ 1);
        assert_eq!(sim.simulate(fake, 1, 0), Err(SimError::UnknownState(fake)));
        // state 1's token is well-formed but has not been handed out yet
        let unseen = sim.token_of(1);
        assert_eq!(sim.simulate(unseen, 1, 0), Err(SimError::UnknownState(unseen)));
        assert_eq!(sim.simulate(s0, 0, 0), Err(SimError::StageOutOfRange { h: 0, horizon: 2 }));
        assert_eq!(sim.simulate(s0, 3, 0), Err(SimError::StageOutOfRange { h: 3, horizon: 2 }));
        assert_eq!(sim.simulate(s0, 1, 2), Err(SimError::ActionOutOfRange { a: 2, actions: 2 }));
        assert_eq!(sim.batch_simulate(s0, 1, 0), Err(SimError::InvalidSampleCount));
        assert_eq!(sim.reset_episode(fake), Err(SimError::UnknownState(fake)));
        let s1 = sim.simulate(s0, 1, 1).unwrap().next_state;
        assert_eq!(sim.reset_episode(s1), Err(SimError::NotAStartState(s1)));
    }

    #[test]
    fn batch_counts_and_determinism() {
        let mut sim = TabularSimulator::new(chain(), 3);
        let (s0, _) = sim.start_state(0).unwrap();
        let b = sim.batch_simulate(s0, 1, 1).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(sim.query_count().per_call, 2);
        let b = sim.batch_simulate(s0, 1, 5).unwrap();
        for per_action in &b {
            assert_eq!(per_action.len(), 5);
            assert!(per_action.iter().all(|st| st == &per_action[0]));
        }
    }

    #[test]
    fn empirical_frequencies_within_binomial_band() {
        let mut sim = TabularSimulator::new(coin(), 11);
        let (s0, _) = sim.start_state(0).unwrap();
        let n = 10_000;
        let draws = sim.batch_simulate(s0, 1, n).unwrap();
        let hits = draws[0].iter().filter(|st| st.reward == 1.0).count() as f64;
        let p = 0.3;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        assert!((hits / n as f64 - p).abs() <= 3.0 * sigma);
    }

    #[test]
    fn exact_mode_returns_population_values() {
        let mut sim = TabularSimulator::new(coin(), 11).with_mode(SamplingMode::ExactExpectation);
        let (s0, _) = sim.start_state(0).unwrap();
        let (r, phi) = sim.expectation(s0, 1, 0).unwrap().unwrap();
        assert!((r - 0.3).abs() < 1e-15);
        assert_eq!(phi.0, vec![0.0]);
        assert_eq!(sim.query_count().per_call, 1);
        let mut sampled = TabularSimulator::new(coin(), 11);
        let (s0, _) = sampled.start_state(0).unwrap();
        assert_eq!(sampled.expectation(s0, 1, 0).unwrap(), None);
    }

    #[test]
    fn forks_share_tokens_and_merge_ledgers() {
        let mut sim = TabularSimulator::new(chain(), 5);
        let (s0, _) = sim.start_state(0).unwrap();
        let mut a = sim.fork(100);
        let s1 = a.simulate(s0, 1, 1).unwrap().next_state;
        assert_eq!(s1, sim.token_of(1));
        assert!(sim.simulate(s1, 2, 0).is_err());
        sim.join(a);
        assert_eq!(sim.query_count().per_call, 1);
        assert!(sim.simulate(s1, 2, 0).is_ok());
    }

    #[test]
    fn env_steps_are_unmetered_and_track_current_state() {
        let mut sim = TabularSimulator::new(chain(), 5).with_offsets(vec![0.05; 4]);
        let (s0, _) = sim.start_state(0).unwrap();
        sim.reset_episode(s0).unwrap();
        let st = sim.env_step(s0, 1, 1).unwrap();
        assert_eq!(st.reward, 1.0);
        assert_eq!(sim.query_count().per_episode, 0);
        assert!(matches!(sim.env_step(s0, 2, 0), Err(SimError::NotCurrentState { .. })));
        let st2 = sim.env_step(st.next_state, 2, 1).unwrap();
        assert_eq!(st2.reward, 0.95);
    }
}
