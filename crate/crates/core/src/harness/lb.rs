use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{invalid, HarnessError};
use crate::envs::{make_hypercube, Cell, CostOracle};
use crate::seeds::{self, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LbConfig {
    pub d: usize,
    /// Queries per `GetAction` call.
    pub q: usize,
    pub trials: usize,
    pub seed: u64,
    /// Safety cap on environment steps per trial.
    pub max_steps: usize,
}

impl LbConfig {
    pub fn new(d: usize, q: usize, trials: usize, seed: u64) -> Self {
        Self { d, q, trials, seed, max_steps: 1 << 22 }
    }

    /// `2^{d-1}`: the number of distinct states the discovery event looks at.
    pub fn window(&self) -> usize {
        1 << (self.d - 1)
    }

    /// `2^{d-2} / (d (q + 1)) - 1`.
    pub fn theorem_bound(&self) -> f64 {
        2f64.powi(self.d as i32 - 2) / (self.d as f64 * (self.q + 1) as f64) - 1.0
    }

    /// `floor(2^{d-1} / (d (q + 1))) - 1`, the excess cost on the event that
    /// the goal is missed.
    pub fn delta0(&self) -> f64 {
        (self.window() as f64 / (self.d as f64 * (self.q + 1) as f64)).floor() - 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbTrial {
    pub s_star: Cell,
    /// Goal among the first `2^{d-1}` distinct states.
    pub discovered: bool,
    /// Environment steps until `2^{d-1}` distinct states were encountered.
    pub steps: usize,
    pub cost: f64,
    /// `cost - 1`, the optimal cost from the origin being one.
    pub excess: f64,
    pub max_distinct_per_call: usize,
    pub queries: u64,
    /// The step cap ended the trial early.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LbReport {
    pub config: LbConfig,
    pub discovered: usize,
    pub fraction: f64,
    /// `1/2 + 3 sqrt(1/4 / trials)`.
    pub fraction_limit: f64,
    pub theorem_bound: f64,
    pub delta0: f64,
    pub undiscovered: usize,
    pub mean_excess_undiscovered: Option<f64>,
    pub min_excess_undiscovered: Option<f64>,
    pub max_distinct_per_call: usize,
    pub capped: usize,
    pub trials: Vec<LbTrial>,
}

impl LbReport {
    pub fn fraction_ok(&self) -> bool {
        self.fraction <= self.fraction_limit
    }

    pub fn counting_ok(&self) -> bool {
        self.max_distinct_per_call <= self.config.q + 1
    }

    /// Every undiscovered trial paid more than the theorem's bound.
    pub fn bound_exceeded(&self) -> bool {
        self.min_excess_undiscovered.is_some_and(|m| m > self.theorem_bound)
    }
}

impl std::fmt::Display for LbReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let c = &self.config;
        writeln!(f, "d = {}, q = {}, trials = {}, seed = {}", c.d, c.q, c.trials, c.seed)?;
        writeln!(
            f,
            "goal discovered within the first {} distinct states: {}/{} = {:.4} (limit {:.4})",
            c.window(),
            self.discovered,
            c.trials,
            self.fraction,
            self.fraction_limit
        )?;
        writeln!(f, "max distinct states per call: {} (limit {})", self.max_distinct_per_call, c.q + 1)?;
        writeln!(f, "theorem bound 2^(d-2)/(d(q+1)) - 1 = {:.6}", self.theorem_bound)?;
        writeln!(f, "delta0 = floor(2^(d-1)/(d(q+1))) - 1 = {}", self.delta0)?;
        match (self.mean_excess_undiscovered, self.min_excess_undiscovered) {
            (Some(mean), Some(min)) => writeln!(
                f,
                "excess cost over {} undiscovered trials: mean {:.4}, min {:.4}",
                self.undiscovered, mean, min
            )?,
            _ => writeln!(f, "no undiscovered trials")?,
        }
        write!(f, "trials hitting the step cap: {}", self.capped)
    }
}

/// One trial of the uninformed baseline: each call spends `q` queries on
/// random admissible actions at the current state, then moves randomly; it
/// stays for good once it sees a free stay.
fn trial(cfg: &LbConfig, index: u64) -> Result<LbTrial, HarnessError> {
    let mut rng = seeds::derived_rng(cfg.seed, Purpose::Trial, &[index]);
    let s_star: Cell = (0..cfg.d).map(|_| if rng.random_bool(0.5) { 1 } else { -1 }).collect();
    let env = make_hypercube(cfg.d, Some(s_star.clone()))?;
    let stay = env.stay();
    let mut s = env.origin();
    let mut oracle = CostOracle::new(env, s.clone());
    let (mut steps, mut cost) = (0usize, 0.0);
    while oracle.distinct() < cfg.window() && steps < cfg.max_steps {
        oracle.begin_call(&s);
        let moves = oracle.env().admissible(&s);
        let mut settle = false;
        for _ in 0..cfg.q {
            let a = *moves.choose(&mut rng).expect("stay is always admissible");
            let out = oracle.query(&s, a);
            settle |= a == stay && out.cost == 0.0;
        }
        let a = if settle { stay } else { *moves.choose(&mut rng).expect("non-empty") };
        let out = oracle.env_step(&s, a);
        cost += out.cost;
        steps += 1;
        s = out.next;
        if settle {
            break;
        }
    }
    let discovered = oracle.first_encounters().iter().take(cfg.window()).any(|c| *c == s_star);
    Ok(LbTrial {
        s_star,
        discovered,
        steps,
        cost,
        excess: cost - 1.0,
        max_distinct_per_call: oracle.max_distinct_per_call(),
        queries: oracle.queries(),
        capped: steps >= cfg.max_steps,
    })
}

/// Runs the coverage demonstration on goals drawn uniformly per trial.
pub fn lb_demo(cfg: &LbConfig) -> Result<LbReport, HarnessError> {
    if cfg.d < 2 {
        return Err(invalid("d", "must be at least 2"));
    }
    if cfg.d > 24 {
        return Err(invalid("d", "at most 24 (the window is 2^(d-1) states)"));
    }
    if cfg.q == 0 {
        return Err(invalid("budget", "must be at least 1"));
    }
    if cfg.trials == 0 {
        return Err(invalid("trials", "must be at least 1"));
    }
    let trials = crate::par::map_indexed(cfg.trials, |i| trial(cfg, i as u64)).into_iter().collect::<Result<Vec<_>, _>>()?;
    let discovered = trials.iter().filter(|t| t.discovered).count();
    let missed: Vec<f64> = trials.iter().filter(|t| !t.discovered).map(|t| t.excess).collect();
    let n = cfg.trials as f64;
    Ok(LbReport {
        config: *cfg,
        discovered,
        fraction: discovered as f64 / n,
        fraction_limit: 0.5 + 3.0 * (0.25 / n).sqrt(),
        theorem_bound: cfg.theorem_bound(),
        delta0: cfg.delta0(),
        undiscovered: missed.len(),
        mean_excess_undiscovered: (!missed.is_empty()).then(|| missed.iter().sum::<f64>() / missed.len() as f64),
        min_excess_undiscovered: missed.iter().cloned().reduce(f64::min),
        max_distinct_per_call: trials.iter().map(|t| t.max_distinct_per_call).max().unwrap_or(0),
        capped: trials.iter().filter(|t| t.capped).count(),
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bound_values() {
        let c = LbConfig::new(10, 8, 1, 0);
        assert!((c.theorem_bound() - (256.0 / 90.0 - 1.0)).abs() < 1e-15);
        assert_eq!(c.delta0(), 4.0);
        let small = LbConfig::new(2, 1, 1, 0);
        assert_eq!(small.theorem_bound(), 1.0 / 4.0 - 1.0);
    }

    #[test]
    fn small_demo_respects_counting() {
        let r = lb_demo(&LbConfig::new(4, 2, 20, 3)).unwrap();
        assert!(r.counting_ok());
        assert_eq!(r.trials.len(), 20);
        assert_eq!(r, lb_demo(&LbConfig::new(4, 2, 20, 3)).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(lb_demo(&LbConfig::new(1, 2, 1, 0)).is_err());
        assert!(lb_demo(&LbConfig::new(3, 0, 1, 0)).is_err());
    }
}
