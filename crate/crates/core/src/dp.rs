//! Exact dynamic-programming oracles on tabular MDPs.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::mdp::TabularMdp;

/// `v[h - 1][s]` for `h = 1..=H + 1`; the last row is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub v: Vec<Vec<f64>>,
}

impl ValueTable {
    pub fn at(&self, h: usize, s: usize) -> f64 {
        self.v[h - 1][s]
    }

    pub fn horizon(&self) -> usize {
        self.v.len() - 1
    }

    /// `h,state,value` rows, stage-major.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("h,state,value\n");
        for (i, row) in self.v.iter().enumerate() {
            for (s, x) in row.iter().enumerate() {
                out.push_str(&format!("{},{},{:?}\n", i + 1, s, x));
            }
        }
        out
    }
}

/// Deterministic stage policy: `pi[h - 1][s]`.
pub type StagePolicy = Vec<Vec<usize>>;

fn q_value(mdp: &TabularMdp, s: usize, a: usize, next: &[f64]) -> f64 {
    mdp.outcomes(s, a).iter().map(|o| o.prob * (o.reward + next[o.next])).sum()
}

/// Backward induction of the Bellman optimality equations. Greedy ties go to
/// the lowest action.
pub fn finite_horizon_vstar(mdp: &TabularMdp) -> (ValueTable, StagePolicy) {
    let (n, h_max) = (mdp.n_states(), mdp.horizon());
    let mut v = vec![vec![0.0; n]; h_max + 1];
    let mut pi = vec![vec![0; n]; h_max];
    for h in (0..h_max).rev() {
        for s in 0..n {
            let (mut best, mut arg) = (f64::NEG_INFINITY, 0);
            for a in 0..mdp.actions() {
                let q = q_value(mdp, s, a, &v[h + 1]);
                if q > best {
                    best = q;
                    arg = a;
                }
            }
            v[h][s] = best;
            pi[h][s] = arg;
        }
    }
    (ValueTable { v }, pi)
}

pub fn policy_eval(mdp: &TabularMdp, pi: &StagePolicy) -> ValueTable {
    let (n, h_max) = (mdp.n_states(), mdp.horizon());
    let mut v = vec![vec![0.0; n]; h_max + 1];
    for h in (0..h_max).rev() {
        for s in 0..n {
            v[h][s] = q_value(mdp, s, pi[h][s], &v[h + 1]);
        }
    }
    ValueTable { v }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscountedSolution {
    pub v: Vec<f64>,
    pub sweeps: usize,
    /// Sup-norm change of each sweep.
    pub residuals: Vec<f64>,
}

fn discounted_q(mdp: &TabularMdp, s: usize, a: usize, gamma: f64, v: &[f64]) -> f64 {
    mdp.outcomes(s, a).iter().map(|o| o.prob * (o.reward + gamma * v[o.next])).sum()
}

/// Value iteration on the stationary MDP, stopped once the sweep residual is
/// at most `tol (1 - gamma) / (2 gamma)`, so the result is within `tol` of
/// `v*` in sup norm.
pub fn discounted_vstar(mdp: &TabularMdp, gamma: f64, tol: f64) -> DiscountedSolution {
    assert!((0.0..1.0).contains(&gamma) && tol > 0.0);
    let n = mdp.n_states();
    let mut v = vec![0.0; n];
    let mut residuals = Vec::new();
    let stop = if gamma == 0.0 { f64::INFINITY } else { tol * (1.0 - gamma) / (2.0 * gamma) };
    loop {
        let next: Vec<f64> = (0..n)
            .map(|s| (0..mdp.actions()).map(|a| discounted_q(mdp, s, a, gamma, &v)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let res = next.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        residuals.push(res);
        v = next;
        if res <= stop {
            break;
        }
    }
    DiscountedSolution { sweeps: residuals.len(), v, residuals }
}

/// Exact value of a stationary deterministic policy: solves
/// `(I - gamma P_pi) v = r_pi`.
pub fn discounted_policy_eval(mdp: &TabularMdp, pi: &[usize], gamma: f64) -> Vec<f64> {
    let n = mdp.n_states();
    let mut m = DMatrix::<f64>::identity(n, n);
    let mut r = DVector::<f64>::zeros(n);
    for s in 0..n {
        for o in mdp.outcomes(s, pi[s]) {
            m[(s, o.next)] -= gamma * o.prob;
            r[s] += o.prob * o.reward;
        }
    }
    m.lu().solve(&r).expect("I - gamma P is invertible for gamma < 1").iter().cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Outcome;

    fn one_state(rewards: &[f64]) -> TabularMdp {
        let row = rewards.iter().map(|&r| vec![Outcome { prob: 1.0, reward: r, next: 0 }]).collect();
        TabularMdp::new(rewards.len(), 1, 1, vec![row], vec![vec![vec![0.0]]], vec![0]).unwrap()
    }

    #[test]
    fn single_max() {
        let (v, pi) = finite_horizon_vstar(&one_state(&[0.3, 0.7]));
        assert_eq!(v.at(1, 0), 0.7);
        assert_eq!(pi[0][0], 1);
        assert_eq!(v.at(2, 0), 0.0);
    }

    #[test]
    fn geometric_series() {
        let sol = discounted_vstar(&one_state(&[1.0]), 0.5, 1e-12);
        assert!((sol.v[0] - 2.0).abs() <= 1e-12);
        assert_eq!(discounted_policy_eval(&one_state(&[1.0]), &[0], 0.5), vec![2.0]);
        let myopic = discounted_vstar(&one_state(&[0.2, 0.9]), 0.0, 1e-9);
        assert_eq!(myopic.v, vec![0.9]);
    }

    #[test]
    fn csv_export() {
        let (v, _) = finite_horizon_vstar(&one_state(&[0.5]));
        assert_eq!(v.to_csv(), "h,state,value\n1,0,0.5\n2,0,0.0\n");
    }
}
