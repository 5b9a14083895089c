use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{invalid, EnvError};
use crate::dp::{self, StagePolicy, ValueTable};
use crate::mdp::{Outcome, TabularMdp, TabularSimulator};
use crate::seeds::{self, Purpose};
use crate::tensor::{dot, norm};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branching {
    /// One successor per `(s, a)`.
    #[default]
    Deterministic,
    /// One or two successors per `(s, a)`.
    Stochastic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealizableSpec {
    pub n_states: usize,
    #[serde(rename = "A")]
    pub actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub d: usize,
    #[serde(rename = "B")]
    pub radius: f64,
    #[serde(default)]
    pub branching: Branching,
    pub seed: u64,
}

/// Whose values the features realize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Competitor {
    Optimal,
    Policy(StagePolicy),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub theta_star: Vec<f64>,
    /// Values of the competitor, computed by backward induction.
    pub values: ValueTable,
    pub competitor: Competitor,
    /// `max_{h,s} |v_h(s) - <phi_h(s), theta_star>|` as constructed.
    pub misspecification: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealizableEnv {
    pub mdp: TabularMdp,
    pub certificate: Certificate,
}

impl RealizableEnv {
    /// Competitor value at start state `s0`.
    pub fn start_value(&self) -> f64 {
        self.certificate.values.at(1, self.mdp.start_states()[0])
    }
}

/// Haar-distributed orthogonal matrix (QR of a Gaussian matrix with the sign
/// of `R`'s diagonal folded into `Q`).
pub fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn check_spec(spec: &RealizableSpec) -> Result<(), EnvError> {
    if spec.n_states == 0 {
        return Err(invalid("n_states", "must be positive"));
    }
    if spec.actions == 0 {
        return Err(invalid("A", "must be positive"));
    }
    if spec.horizon == 0 {
        return Err(invalid("H", "must be positive"));
    }
    if spec.d == 0 {
        return Err(invalid("d", "must be positive"));
    }
    if !(spec.radius > 0.0) {
        return Err(invalid("B", "must be positive"));
    }
    if spec.horizon as f64 > spec.radius {
        return Err(EnvError::InfeasibleScaling { horizon: spec.horizon, radius: spec.radius });
    }
    Ok(())
}

fn random_dynamics(spec: &RealizableSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<Vec<Outcome>>> {
    let n = spec.n_states;
    (0..n)
        .map(|_| {
            (0..spec.actions)
                .map(|_| {
                    let two = spec.branching == Branching::Stochastic && rng.random_bool(0.5);
                    if two {
                        let p: f64 = rng.random_range(0.2..0.8);
                        vec![
                            Outcome { prob: p, reward: rng.random(), next: rng.random_range(0..n) },
                            Outcome { prob: 1.0 - p, reward: rng.random(), next: rng.random_range(0..n) },
                        ]
                    } else {
                        vec![Outcome { prob: 1.0, reward: rng.random(), next: rng.random_range(0..n) }]
                    }
                })
                .collect()
        })
        .collect()
}

/// Features `Q^T (v_h(s) / B, w_{h,s})` with `theta* = Q^T (B e_1)`; fillers
/// `w` are random directions of length `0.5 sqrt(1 - (v/B)^2)`.
fn realize(
    spec: &RealizableSpec,
    rng: &mut ChaCha8Rng,
    mdp: &TabularMdp,
    values: ValueTable,
    competitor: Competitor,
) -> Result<RealizableEnv, EnvError> {
    let (d, b) = (spec.d, spec.radius);
    let q = random_orthogonal(d, rng);
    let theta_star: Vec<f64> = (0..d).map(|j| b * q[(0, j)]).collect();
    let mut features = Vec::with_capacity(spec.horizon);
    for h in 1..=spec.horizon {
        let mut row = Vec::with_capacity(spec.n_states);
        for s in 0..spec.n_states {
            let x = values.at(h, s) / b;
            let mut y = vec![0.0; d];
            y[0] = x;
            if d > 1 {
                let mut w: Vec<f64> = (1..d).map(|_| rng.sample(StandardNormal)).collect();
                let wn = norm(&w);
                let len = 0.5 * (1.0 - x * x).max(0.0).sqrt();
                if wn > 0.0 {
                    w.iter_mut().for_each(|v| *v *= len / wn);
                }
                y[1..].copy_from_slice(&w);
            }
            // phi = Q^T y
            row.push((0..d).map(|j| (0..d).map(|i| q[(i, j)] * y[i]).sum()).collect::<Vec<f64>>());
        }
        features.push(row);
    }
    let mdp = mdp.with_features(features)?;
    let misspecification = misspecification(&mdp, &values, &theta_star);
    Ok(RealizableEnv { mdp, certificate: Certificate { theta_star, values, competitor, misspecification } })
}

fn misspecification(mdp: &TabularMdp, values: &ValueTable, theta: &[f64]) -> f64 {
    let mut worst: f64 = 0.0;
    for h in 1..=mdp.horizon() + 1 {
        for s in 0..mdp.n_states() {
            worst = worst.max((values.at(h, s) - dot(mdp.features(h, s), theta)).abs());
        }
    }
    worst
}

fn skeleton(spec: &RealizableSpec, rng: &mut ChaCha8Rng) -> Result<TabularMdp, EnvError> {
    let transitions = random_dynamics(spec, rng);
    let zeros = vec![vec![vec![0.0; spec.d]; spec.n_states]; spec.horizon];
    Ok(TabularMdp::new(spec.actions, spec.horizon, spec.d, transitions, zeros, vec![0])?)
}

/// A random MDP whose optimal values are exactly linear in its features.
pub fn make_tabular_realizable(spec: &RealizableSpec) -> Result<RealizableEnv, EnvError> {
    check_spec(spec)?;
    let mut rng = seeds::derived_rng(spec.seed, Purpose::EnvGen, &[]);
    let mdp = skeleton(spec, &mut rng)?;
    let (values, _) = dp::finite_horizon_vstar(&mdp);
    realize(spec, &mut rng, &mdp, values, Competitor::Optimal)
}

/// A random MDP whose features realize the values of a random deterministic
/// stage policy. Only that policy's realizability is certified; whether the
/// optimal values are realizable is not checked.
pub fn make_policy_realizable(spec: &RealizableSpec) -> Result<RealizableEnv, EnvError> {
    check_spec(spec)?;
    let mut rng = seeds::derived_rng(spec.seed, Purpose::EnvGen, &[1]);
    let mdp = skeleton(spec, &mut rng)?;
    let pi: StagePolicy =
        (0..spec.horizon).map(|_| (0..spec.n_states).map(|_| rng.random_range(0..spec.actions)).collect()).collect();
    let values = dp::policy_eval(&mdp, &pi);
    realize(spec, &mut rng, &mdp, values, Competitor::Policy(pi))
}

/// Adds perturbations `u` with `|<u, theta*>| <= eta` to every stage-`h <= H`
/// feature, keeping norms at most 1.
pub fn perturb_features(env: &RealizableEnv, eta: f64, seed: u64) -> Result<RealizableEnv, EnvError> {
    if !(eta >= 0.0) {
        return Err(invalid("eta", "must be non-negative"));
    }
    if eta == 0.0 {
        return Ok(env.clone());
    }
    let theta = &env.certificate.theta_star;
    let tn = norm(theta);
    let unit: Vec<f64> = theta.iter().map(|x| x / tn).collect();
    let mut rng = seeds::derived_rng(seed, Purpose::Perturb, &[]);
    let mdp = &env.mdp;
    let mut table = mdp.feature_table().to_vec();
    for h in 1..=mdp.horizon() {
        for s in 0..mdp.n_states() {
            let phi = &table[h - 1][s];
            // along theta*: inner product with theta* is xi * eta, |xi| < 1
            let xi: f64 = rng.random_range(-1.0..1.0) * (1.0 - 1e-9);
            let par: Vec<f64> = unit.iter().map(|u| u * xi * eta / tn).collect();
            let mut perp: Vec<f64> = (0..unit.len()).map(|_| rng.sample(StandardNormal)).collect();
            let along = dot(&perp, &unit);
            perp.iter_mut().zip(&unit).for_each(|(p, u)| *p -= along * u);
            let pn = norm(&perp);
            let rho: f64 = rng.random();
            let scale = if pn > 1e-12 { eta * rho / pn } else { 0.0 };
            let with_perp: Vec<f64> = phi.iter().zip(&par).zip(&perp).map(|((f, a), p)| f + a + scale * p).collect();
            let next = if norm(&with_perp) <= 1.0 {
                with_perp
            } else {
                let only_par: Vec<f64> = phi.iter().zip(&par).map(|(f, a)| f + a).collect();
                if norm(&only_par) > 1.0 {
                    return Err(EnvError::NormBudgetExceeded { h, s });
                }
                only_par
            };
            table[h - 1][s] = next;
        }
    }
    let mdp = mdp.with_features(table)?;
    let mut certificate = env.certificate.clone();
    certificate.misspecification = misspecification(&mdp, &certificate.values, theta);
    Ok(RealizableEnv { mdp, certificate })
}

/// A simulator whose rewards carry constant offsets `Lambda_sa ~ U[-lambda,
/// lambda]` drawn from `seed`, then clipped to `[0, 1]`.
pub fn inaccurate_wrap(mdp: Arc<TabularMdp>, lambda: f64, seed: u64, sim_seed: u64) -> TabularSimulator {
    let sim = TabularSimulator::new(Arc::clone(&mdp), sim_seed);
    if lambda == 0.0 {
        return sim;
    }
    let mut rng = seeds::derived_rng(seed, Purpose::Inaccuracy, &[]);
    let offsets = (0..mdp.n_states() * mdp.actions()).map(|_| rng.random_range(-lambda..=lambda)).collect();
    sim.with_offsets(offsets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{FeaturizedSimulator, SamplingMode};

    fn spec(seed: u64, branching: Branching) -> RealizableSpec {
        RealizableSpec { n_states: 6, actions: 2, horizon: 3, d: 3, radius: 3.0, branching, seed }
    }

    #[test]
    fn realization_is_exact() {
        for seed in 0..10 {
            for br in [Branching::Deterministic, Branching::Stochastic] {
                let env = make_tabular_realizable(&spec(seed, br)).unwrap();
                let (v, _) = dp::finite_horizon_vstar(&env.mdp);
                let theta = &env.certificate.theta_star;
                assert!((norm(theta) - 3.0).abs() < 1e-12);
                for h in 1..=4 {
                    for s in 0..6 {
                        assert!((v.at(h, s) - dot(env.mdp.features(h, s), theta)).abs() < 1e-10);
                        assert!(norm(env.mdp.features(h, s)) <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn horizon_above_radius_is_rejected() {
        let mut s = spec(0, Branching::Deterministic);
        s.radius = 2.0;
        assert!(matches!(make_tabular_realizable(&s), Err(EnvError::InfeasibleScaling { .. })));
    }

    #[test]
    fn policy_generator_certifies_its_policy() {
        let env = make_policy_realizable(&spec(4, Branching::Stochastic)).unwrap();
        let Competitor::Policy(pi) = &env.certificate.competitor else { panic!() };
        let v = dp::policy_eval(&env.mdp, pi);
        for h in 1..=3 {
            for s in 0..6 {
                assert!((v.at(h, s) - dot(env.mdp.features(h, s), &env.certificate.theta_star)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn perturbation_respects_eta_and_norms() {
        let env = make_tabular_realizable(&spec(1, Branching::Stochastic)).unwrap();
        assert_eq!(perturb_features(&env, 0.0, 5).unwrap(), env);
        let p = perturb_features(&env, 0.05, 5).unwrap();
        let (v, _) = dp::finite_horizon_vstar(&p.mdp);
        let mut worst: f64 = 0.0;
        for h in 1..=3 {
            for s in 0..6 {
                worst = worst.max((v.at(h, s) - dot(p.mdp.features(h, s), &p.certificate.theta_star)).abs());
                assert!(norm(p.mdp.features(h, s)) <= 1.0 + 1e-12);
            }
        }
        assert!(worst <= 0.05);
        assert!(worst > 0.0);
        assert!((worst - p.certificate.misspecification).abs() < 1e-12);
    }

    #[test]
    fn zero_lambda_is_identity() {
        let env = make_tabular_realizable(&spec(2, Branching::Deterministic)).unwrap();
        let mdp = Arc::new(env.mdp);
        let mut a = inaccurate_wrap(Arc::clone(&mdp), 0.0, 9, 1);
        let mut b = TabularSimulator::new(mdp, 1);
        let (sa, _) = a.start_state(0).unwrap();
        let (sb, _) = b.start_state(0).unwrap();
        for act in 0..2 {
            assert_eq!(a.simulate(sa, 1, act).unwrap().reward.to_bits(), b.simulate(sb, 1, act).unwrap().reward.to_bits());
        }
    }

    #[test]
    fn wrapped_mean_matches_clipped_offset_reward() {
        let env = make_tabular_realizable(&spec(3, Branching::Stochastic)).unwrap();
        let mdp = Arc::new(env.mdp);
        let mut sim = inaccurate_wrap(Arc::clone(&mdp), 0.2, 9, 1);
        let (s0, _) = sim.start_state(0).unwrap();
        let n = 10_000;
        for a in 0..2 {
            let mean: f64 = (0..n).map(|_| sim.simulate(s0, 1, a).unwrap().reward).sum::<f64>() / n as f64;
            let exact: f64 = mdp.outcomes(0, a).iter().map(|o| o.prob * (o.reward + sim.offset(0, a)).clamp(0.0, 1.0)).sum();
            // Hoeffding radius at 1e-6 failure probability
            assert!((mean - exact).abs() <= (f64::ln(2e6) / (2.0 * n as f64)).sqrt());
            let mut ex = sim.clone().with_mode(SamplingMode::ExactExpectation);
            assert!((ex.expectation(s0, 1, a).unwrap().unwrap().0 - exact).abs() < 1e-15);
        }
    }
}
