use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use super::{invalid, EnvError};

/// A point of `{-1, 0, 1}^d`.
pub type Cell = Vec<i8>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawHypercube {
    d: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    s_star: Option<Vec<i8>>,
}

/// The grid navigation family. Costs live in `[0, 1/d]` and the problem is
/// an infinite-horizon total-cost one, so this type deliberately does not
/// implement the planner-facing simulator traits.
///
/// Actions: `2i` increments coordinate `i`, `2i + 1` decrements it, `2d`
/// stays. Increments at `1` and decrements at `-1` are inadmissible.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawHypercube", into = "RawHypercube")]
pub struct HypercubeEnv {
    d: usize,
    s_star: Option<Cell>,
}

impl TryFrom<RawHypercube> for HypercubeEnv {
    type Error = EnvError;

    fn try_from(raw: RawHypercube) -> Result<Self, EnvError> {
        make_hypercube(raw.d, raw.s_star)
    }
}

impl From<HypercubeEnv> for RawHypercube {
    fn from(env: HypercubeEnv) -> Self {
        RawHypercube { d: env.d, s_star: env.s_star }
    }
}

/// `s_star = None` builds the goal-free variant in which every action costs
/// `1/d`.
pub fn make_hypercube(d: usize, s_star: Option<Cell>) -> Result<HypercubeEnv, EnvError> {
    if d < 2 {
        return Err(invalid("d", "must be at least 2"));
    }
    if let Some(g) = &s_star {
        if g.len() != d {
            return Err(invalid("s_star", format!("expected {d} coordinates")));
        }
        if g.iter().any(|&x| x != 1 && x != -1) {
            return Err(EnvError::InvalidGoal);
        }
    }
    Ok(HypercubeEnv { d, s_star })
}

impl HypercubeEnv {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn goal(&self) -> Option<&[i8]> {
        self.s_star.as_deref()
    }

    pub fn num_actions(&self) -> usize {
        2 * self.d + 1
    }

    pub fn stay(&self) -> usize {
        2 * self.d
    }

    pub fn origin(&self) -> Cell {
        vec![0; self.d]
    }

    pub fn is_admissible(&self, s: &[i8], a: usize) -> bool {
        if a == self.stay() {
            return true;
        }
        if a > self.stay() {
            return false;
        }
        let x = s[a / 2];
        if a % 2 == 0 {
            x < 1
        } else {
            x > -1
        }
    }

    pub fn admissible(&self, s: &[i8]) -> Vec<usize> {
        (0..self.num_actions()).filter(|&a| self.is_admissible(s, a)).collect()
    }

    pub fn cost(&self, s: &[i8], a: usize) -> f64 {
        if a == self.stay() && self.goal() == Some(s) {
            0.0
        } else {
            1.0 / self.d as f64
        }
    }

    /// Deterministic successor; `None` for inadmissible actions.
    pub fn step(&self, s: &[i8], a: usize) -> Option<Cell> {
        if !self.is_admissible(s, a) {
            return None;
        }
        let mut next = s.to_vec();
        if a < self.stay() {
            next[a / 2] += if a % 2 == 0 { 1 } else { -1 };
        }
        Some(next)
    }

    /// `phi(s) = (1/d) (d, s)`, of dimension `d + 1`.
    pub fn features(&self, s: &[i8]) -> Vec<f64> {
        let d = self.d as f64;
        std::iter::once(1.0).chain(s.iter().map(|&x| x as f64 / d)).collect()
    }

    /// `(-1, s_star)`.
    pub fn theta_star(&self) -> Result<Vec<f64>, EnvError> {
        let g = self.goal().ok_or(EnvError::NoGoal)?;
        Ok(std::iter::once(-1.0).chain(g.iter().map(|&x| x as f64)).collect())
    }

    /// Base-3 index with digit `s_i + 1` at position `i`.
    pub fn index(&self, s: &[i8]) -> usize {
        s.iter().rev().fold(0, |acc, &x| acc * 3 + (x + 1) as usize)
    }

    pub fn cell(&self, mut index: usize) -> Cell {
        (0..self.d)
            .map(|_| {
                let x = (index % 3) as i8 - 1;
                index /= 3;
                x
            })
            .collect()
    }

    pub fn n_states(&self) -> usize {
        3usize.pow(self.d as u32)
    }
}

/// `v*(s) = -(1/d) ||s - s_star||_1`, the negated optimal total cost.
pub fn hypercube_vstar(env: &HypercubeEnv, s: &[i8]) -> Result<f64, EnvError> {
    let g = env.goal().ok_or(EnvError::NoGoal)?;
    let l1: i32 = s.iter().zip(g).map(|(&x, &y)| (x as i32 - y as i32).abs()).sum();
    Ok(-(l1 as f64) / env.d as f64)
}

/// Negated shortest-path cost to the goal for every state (indexed by
/// [`HypercubeEnv::index`]), by breadth-first search over the admissible
/// moves. All moves cost `1/d` and the goal's self-loop is free, so hop
/// counts determine the costs.
pub fn shortest_path_values(env: &HypercubeEnv) -> Result<Vec<f64>, EnvError> {
    let g = env.goal().ok_or(EnvError::NoGoal)?;
    let mut hops = vec![usize::MAX; env.n_states()];
    let mut queue = VecDeque::new();
    hops[env.index(g)] = 0;
    queue.push_back(g.to_vec());
    // moves are reversible, so searching outward from the goal is enough
    while let Some(s) = queue.pop_front() {
        let k = hops[env.index(&s)];
        for a in env.admissible(&s) {
            let next = env.step(&s, a).expect("admissible");
            let j = env.index(&next);
            if hops[j] == usize::MAX {
                hops[j] = k + 1;
                queue.push_back(next);
            }
        }
    }
    Ok(hops.into_iter().map(|k| -(k as f64) / env.d as f64).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostStep {
    pub cost: f64,
    pub next: Cell,
}

/// Local-access cost simulator with distinct-state accounting. Every state
/// handed to the planner, whether by a query or by an environment step,
/// counts as encountered; `begin_call` opens a fresh per-call ledger seeded
/// with the current state.
#[derive(Debug, Clone)]
pub struct CostOracle {
    env: HypercubeEnv,
    seen: HashSet<Cell>,
    order: Vec<Cell>,
    call: HashSet<Cell>,
    max_per_call: usize,
    queries: u64,
}

impl CostOracle {
    pub fn new(env: HypercubeEnv, start: Cell) -> Self {
        let mut oracle = Self {
            env,
            seen: HashSet::new(),
            order: Vec::new(),
            call: HashSet::new(),
            max_per_call: 0,
            queries: 0,
        };
        oracle.encounter(&start);
        oracle
    }

    pub fn env(&self) -> &HypercubeEnv {
        &self.env
    }

    fn record(&mut self, s: &[i8]) {
        if self.seen.insert(s.to_vec()) {
            self.order.push(s.to_vec());
        }
    }

    fn encounter(&mut self, s: &[i8]) {
        self.record(s);
        self.call.insert(s.to_vec());
        self.max_per_call = self.max_per_call.max(self.call.len());
    }

    pub fn begin_call(&mut self, current: &[i8]) {
        self.call.clear();
        self.encounter(current);
    }

    /// Panics if `s` has not been encountered or `a` is inadmissible at `s`;
    /// both are protocol errors of the calling planner.
    pub fn query(&mut self, s: &[i8], a: usize) -> CostStep {
        assert!(self.seen.contains(s), "local access violated");
        let next = self.env.step(s, a).expect("inadmissible action");
        self.queries += 1;
        let cost = self.env.cost(s, a);
        self.encounter(&next);
        CostStep { cost, next }
    }

    /// Real-environment transition; unmetered. The successor opens the next
    /// call, so it is not charged to the current one.
    pub fn env_step(&mut self, s: &[i8], a: usize) -> CostStep {
        let next = self.env.step(s, a).expect("inadmissible action");
        let cost = self.env.cost(s, a);
        self.record(&next);
        CostStep { cost, next }
    }

    /// Distinct states in the order they were first encountered.
    pub fn first_encounters(&self) -> &[Cell] {
        &self.order
    }

    pub fn distinct(&self) -> usize {
        self.order.len()
    }

    pub fn distinct_in_call(&self) -> usize {
        self.call.len()
    }

    pub fn max_distinct_per_call(&self) -> usize {
        self.max_per_call
    }

    pub fn queries(&self) -> u64 {
        self.queries
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn origin_to_corner() {
        let env = make_hypercube(3, Some(vec![1, 1, 1])).unwrap();
        let s = env.origin();
        assert_eq!(hypercube_vstar(&env, &s).unwrap(), -1.0);
        let theta = env.theta_star().unwrap();
        assert_eq!(crate::tensor::dot(&env.features(&s), &theta), -1.0);
        assert_eq!(hypercube_vstar(&env, &[1, 1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn two_dim_closed_form() {
        let env = make_hypercube(2, Some(vec![1, 1])).unwrap();
        assert_eq!(hypercube_vstar(&env, &[0, -1]).unwrap(), -1.5);
    }

    #[test]
    fn goal_free_costs() {
        let env = make_hypercube(3, None).unwrap();
        for i in 0..env.n_states() {
            let s = env.cell(i);
            for a in env.admissible(&s) {
                assert_eq!(env.cost(&s, a), 1.0 / 3.0);
            }
        }
        assert_eq!(hypercube_vstar(&env, &[0, 0, 0]), Err(EnvError::NoGoal));
        assert!(shortest_path_values(&env).is_err());
    }

    #[test]
    fn invalid_goals() {
        assert_eq!(make_hypercube(3, Some(vec![1, 0, 1])), Err(EnvError::InvalidGoal));
        assert!(make_hypercube(1, None).is_err());
    }

    #[test]
    fn index_round_trip() {
        let env = make_hypercube(4, None).unwrap();
        for i in 0..env.n_states() {
            assert_eq!(env.index(&env.cell(i)), i);
        }
    }

    #[test]
    fn bfs_matches_closed_form() {
        let env = make_hypercube(4, Some(vec![1, -1, -1, 1])).unwrap();
        let v = shortest_path_values(&env).unwrap();
        for (i, &x) in v.iter().enumerate() {
            assert!((x - hypercube_vstar(&env, &env.cell(i)).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn json_round_trip() {
        let env = make_hypercube(3, Some(vec![1, -1, 1])).unwrap();
        let text = serde_json::to_string(&env).unwrap();
        assert_eq!(text, r#"{"d":3,"s_star":[1,-1,1]}"#);
        assert_eq!(serde_json::from_str::<HypercubeEnv>(&text).unwrap(), env);
        let empty: HypercubeEnv = serde_json::from_str(r#"{"d":2}"#).unwrap();
        assert_eq!(empty.goal(), None);
        assert!(serde_json::from_str::<HypercubeEnv>(r#"{"d":2,"s_star":[0,1]}"#).is_err());
    }

    #[test]
    fn oracle_counts_call_states() {
        let env = make_hypercube(3, Some(vec![1, 1, 1])).unwrap();
        let s = env.origin();
        let mut oracle = CostOracle::new(env, s.clone());
        oracle.begin_call(&s);
        for a in 0..4 {
            oracle.query(&s, a);
        }
        assert_eq!(oracle.distinct_in_call(), 5);
        assert_eq!(oracle.first_encounters()[0], s);
        oracle.query(&s, 0);
        assert_eq!(oracle.distinct_in_call(), 5);
    }
}
