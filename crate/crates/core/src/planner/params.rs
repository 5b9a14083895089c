use serde::{Deserialize, Serialize};

use super::PlannerError;
use crate::hypothesis::eluder_bound;

pub const MAX_FIXED_POINT_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Profile {
    #[default]
    #[serde(rename = "paper-faithful")]
    Faithful,
    #[serde(rename = "practical")]
    Practical,
}

/// Scale factors applied to the faithful sample sizes and slack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Multipliers {
    pub n1: f64,
    pub n2: f64,
    pub n3: f64,
    pub threshold: f64,
}

impl Default for Multipliers {
    fn default() -> Self {
        Self { n1: 1.0, n2: 1.0, n3: 1.0, threshold: 1.0 }
    }
}

impl Multipliers {
    pub fn is_identity(&self) -> bool {
        *self == Self::default()
    }
}

/// Search effort of the optimistic step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSettings {
    pub samples: usize,
    pub nodes: usize,
    pub polish: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { samples: 1024, nodes: 20_000, polish: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlannerConfig {
    pub d: usize,
    #[serde(rename = "A")]
    pub actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub delta: f64,
    #[serde(rename = "B")]
    pub radius: f64,
    #[serde(default)]
    pub profile: Profile,
    #[serde(default)]
    pub practical_overrides: Option<Multipliers>,
    #[serde(default)]
    pub seed: u64,
    /// Skip the remaining rollouts of an iteration after a failure. Defaults
    /// to on for the practical profile and off for the faithful one.
    #[serde(default)]
    pub break_early: Option<bool>,
    /// Follow and test the best action under `theta` instead of the most
    /// consistent one.
    #[serde(default)]
    pub strengthened: bool,
    #[serde(default)]
    pub optimizer: OptimizerSettings,
}

impl PlannerConfig {
    pub fn new(d: usize, actions: usize, horizon: usize, delta: f64, radius: f64) -> Self {
        Self {
            d,
            actions,
            horizon,
            delta,
            radius,
            profile: Profile::Faithful,
            practical_overrides: None,
            seed: 0,
            break_early: None,
            strengthened: false,
            optimizer: OptimizerSettings::default(),
        }
    }

    pub fn practical(mut self, m: Multipliers) -> Self {
        self.profile = Profile::Practical;
        self.practical_overrides = Some(m);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_break_early(mut self, on: bool) -> Self {
        self.break_early = Some(on);
        self
    }

    pub fn breaks_early(&self) -> bool {
        self.break_early.unwrap_or(self.profile == Profile::Practical)
    }

    pub fn multipliers(&self) -> Multipliers {
        match self.profile {
            Profile::Faithful => Multipliers::default(),
            Profile::Practical => self.practical_overrides.unwrap_or_default(),
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |field: &str, reason: &str| Err(PlannerError::InvalidConfig { field: field.into(), reason: reason.into() });
        if self.d == 0 {
            return bad("d", "must be positive");
        }
        if self.actions == 0 {
            return bad("A", "must be positive");
        }
        if self.horizon == 0 {
            return bad("H", "must be positive");
        }
        if !(self.delta > 0.0) || !self.delta.is_finite() {
            return bad("delta", "must be positive");
        }
        if !(self.radius > 0.0) || !self.radius.is_finite() {
            return bad("B", "must be positive");
        }
        if crate::tensor::flat_len(self.d, self.actions).is_err() {
            return bad("A", "(d+1)^A exceeds the dense tensor limit");
        }
        match self.profile {
            Profile::Faithful => {
                if self.delta >= self.horizon as f64 {
                    return bad("delta", "the faithful profile needs delta < H");
                }
                if self.practical_overrides.is_some_and(|m| !m.is_identity()) {
                    return bad("practical_overrides", "multipliers require the practical profile");
                }
            }
            Profile::Practical => {
                let m = self.multipliers();
                for (name, v) in [("n1", m.n1), ("n2", m.n2), ("n3", m.n3)] {
                    if !(v > 0.0 && v <= 1.0) {
                        return bad(&format!("practical_overrides.{name}"), "must lie in (0, 1]");
                    }
                }
                if !(m.threshold > 0.0) || !m.threshold.is_finite() {
                    return bad("practical_overrides.threshold", "must be positive");
                }
            }
        }
        if self.optimizer.nodes == 0 && self.optimizer.samples == 0 {
            return bad("optimizer", "needs nodes or samples");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub zeta: f64,
    pub eps: f64,
    pub e_d: u64,
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    /// Membership slack of `Sol(X)`.
    pub threshold: f64,
    /// Consistency-test tolerance `delta / (4H)`.
    pub test_tol: f64,
    /// Per-factor tolerance handed to the optimistic search: every accepted
    /// parameter must nearly zero one factor of each constraint. Tight in the
    /// faithful profile; a quarter of the test tolerance in the practical
    /// one, where sampled hyperplanes need not share a point but a selected
    /// parameter must still pass a resampled test at the same state.
    pub factor_tol: f64,
    pub fixed_point_iterations: usize,
    pub multipliers: Multipliers,
    /// The unscaled closed forms.
    pub faithful: FaithfulCounts,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaithfulCounts {
    pub n1: u64,
    pub n2: u64,
    pub n3: u64,
    pub threshold: f64,
}

impl DerivedParams {
    /// Per-episode query bound: initialisation plus `H` in-episode calls.
    pub fn query_bound(&self, actions: usize, horizon: usize) -> f64 {
        let (a, h) = (actions as f64, horizon as f64);
        let (e, n1, n2, n3) = (self.e_d as f64, self.n1 as f64, self.n2 as f64, self.n3 as f64);
        (e + 2.0) * n1 * h * (a * n2 + 1.0) + (e + 2.0) * n1 * a * n3 + h * a * n2
    }
}

/// `(delta / (12 H^2))^A`, with `H + 1` in place of `H` when `H = 1`.
pub fn eps_base(delta: f64, horizon: usize, actions: usize) -> f64 {
    let h = if horizon == 1 { 2.0 } else { horizon as f64 };
    (delta / (12.0 * h * h)).powi(actions as i32)
}

/// Solves `E_d = E(eps)`, `eps = eps_0 / (1 + 1/(2 sqrt(E_d)))` by iterating
/// from `eps_0`. Returns `(eps, E_d, iterations)`.
pub fn eps_fixed_point(cfg: &PlannerConfig) -> Result<(f64, u64, usize), PlannerError> {
    let eps0 = eps_base(cfg.delta, cfg.horizon, cfg.actions);
    let mut eps = eps0;
    for k in 1..=MAX_FIXED_POINT_ITERATIONS {
        let e_d = eluder_bound(cfg.d, cfg.actions, cfg.radius, cfg.horizon, eps)?.e_d;
        let next = eps0 / (1.0 + 1.0 / (2.0 * (e_d as f64).sqrt()));
        if ((next - eps) / eps).abs() < 1e-12 {
            let e_next = eluder_bound(cfg.d, cfg.actions, cfg.radius, cfg.horizon, next)?.e_d;
            if e_next == e_d {
                return Ok((next, e_d, k));
            }
        }
        eps = next;
    }
    Err(PlannerError::NoConvergence { iterations: MAX_FIXED_POINT_ITERATIONS })
}

fn ceil_u64(x: f64) -> u64 {
    // saturating for the astronomically large faithful sizes
    x.ceil() as u64
}

fn scale(n: u64, m: f64) -> u64 {
    if m == 1.0 {
        n
    } else {
        ceil_u64(n as f64 * m).max(1)
    }
}

pub fn derive_params(cfg: &PlannerConfig) -> Result<DerivedParams, PlannerError> {
    cfg.validate()?;
    let (d, a, h, b, delta) = (cfg.d as f64, cfg.actions as f64, cfg.horizon as f64, cfg.radius, cfg.delta);
    let zeta = delta / (4.0 * h);
    let (eps, e_d, iterations) = eps_fixed_point(cfg)?;
    let e = e_d as f64;
    let n1 = ceil_u64(32.0 * h * h * (1.0 + 2.0 * b).powi(2) / (delta * delta) * ((e + 1.0) / zeta).ln());
    let n2 = ceil_u64(
        1867.0 * h * h * (b + 1.0).powi(2) * (d + 1.0) / (2.0 * delta * delta)
            * (4.0 * (e + 1.0) * n1 as f64 * h * a * (d + 1.0) / zeta).ln(),
    );
    // zeta sits inside the logarithm, as the union bound over the refined
    // measurements requires
    let n3_alt = 32.0 * (h + 1.0).powi(2) * e / (eps * eps) * (2.0 * (e + 1.0) * n1 as f64 * h * a / zeta).ln();
    let n3 = n2.max(ceil_u64(n3_alt));
    let threshold = h.powf(a) * eps / (2.0 * e.sqrt());
    let m = cfg.multipliers();
    let test_tol = delta / (4.0 * h);
    Ok(DerivedParams {
        zeta,
        eps,
        e_d,
        n1: scale(n1, m.n1),
        n2: scale(n2, m.n2),
        n3: scale(n3, m.n3).max(scale(n2, m.n2)),
        threshold: threshold * m.threshold,
        test_tol,
        factor_tol: match cfg.profile {
            Profile::Faithful => 1e-3 * test_tol,
            Profile::Practical => 0.25 * test_tol,
        },
        fixed_point_iterations: iterations,
        multipliers: m,
        faithful: FaithfulCounts { n1, n2, n3, threshold },
    })
}
