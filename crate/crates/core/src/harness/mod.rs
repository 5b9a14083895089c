//! Seeded experiments over tabular environments, the hypercube coverage demo
//! and environment files.
//!
//! Reports are pure functions of the configuration: rows are produced in
//! episode order whatever the schedule, and wall-clock timings go to a
//! separate sidecar so the report bytes stay reproducible.

mod files;
mod lb;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::dp;
use crate::envs::{
    inaccurate_wrap, make_policy_realizable, make_tabular_realizable, perturb_features, Competitor, EnvError,
    HypercubeEnv, RealizableSpec,
};
use crate::mdp::{ForkableSimulator, MdpFormatError, SamplingMode, TabularMdp, TabularSimulator};
use crate::planner::{run_episode, DerivedParams, Multipliers, PlannerConfig, PlannerError, Profile, TensorPlan};
use crate::reductions::{DiscountParams, DiscountWrapper, ReductionError};
use crate::seeds::{self, Purpose};

pub use files::{eval_tables, gen_env, load_env, Environment};
pub use lb::{lb_demo, LbConfig, LbReport, LbTrial};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("malformed JSON: {0}")]
    Json(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Format(#[from] MdpFormatError),
    #[error(transparent)]
    Reduction(#[from] ReductionError),
    #[error(transparent)]
    Planner(#[from] PlannerError),
    #[error("episode {episode} (seed {seed}) failed: {source}")]
    Episode { episode: u64, seed: u64, source: PlannerError },
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl HarnessError {
    /// Whether the failure lies in the inputs rather than in a run.
    pub fn is_validation(&self) -> bool {
        match self {
            HarnessError::Invalid { .. }
            | HarnessError::Json(_)
            | HarnessError::Env(_)
            | HarnessError::Format(_)
            | HarnessError::Reduction(_) => true,
            HarnessError::Planner(e) => matches!(e, PlannerError::InvalidConfig { .. }),
            HarnessError::Episode { .. } | HarnessError::Io { .. } => false,
        }
    }
}

pub(crate) fn invalid(field: &str, reason: impl Into<String>) -> HarnessError {
    HarnessError::Invalid { field: field.to_string(), reason: reason.into() }
}

pub(crate) fn io_error(path: &Path, e: std::io::Error) -> HarnessError {
    HarnessError::Io { path: path.to_path_buf(), message: e.to_string() }
}

/// Environment constructors, selected by `kind`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvSpec {
    /// Random MDP with exactly realizable optimal values.
    Tabular(RealizableSpec),
    /// Random MDP whose features realize one random stage policy.
    PolicyRealizable(RealizableSpec),
    Hypercube(HypercubeEnv),
    /// A previously generated environment file.
    File { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Wrappers {
    /// Simulator reward offsets drawn from `U[-lambda, lambda]`.
    pub lambda: f64,
    /// Feature perturbation budget.
    pub eta: f64,
    /// Discount factor; the environment is then read as stationary.
    pub gamma: Option<f64>,
    /// Tail tolerance defining the effective horizon. Practical profile
    /// only; faithful runs derive it from the planner's `eps` and `E_d`.
    pub tail: f64,
}

impl Default for Wrappers {
    fn default() -> Self {
        Self { lambda: 0.0, eta: 0.0, gamma: None, tail: 0.01 }
    }
}

/// Overrides for the planner's mode switches.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Modes {
    pub exact_expectation: bool,
    pub break_early: Option<bool>,
    pub strengthened: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub planner: PlannerConfig,
    #[serde(default)]
    pub wrappers: Wrappers,
    #[serde(default)]
    pub modes: Modes,
    pub episodes: u64,
    /// Root of the simulator, inaccuracy and perturbation streams.
    #[serde(default)]
    pub seed: u64,
    /// Index into the environment's start states.
    #[serde(default)]
    pub start: usize,
    /// Output prefix: `<output>.jsonl`, `<output>.csv` and
    /// `<output>.timing.json`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Json(e.to_string()))
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serialises");
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub schema: u32,
    pub config_hash: String,
    pub episode: u64,
    /// Planner stream of the episode.
    pub seed: u64,
    /// Simulator stream of the episode.
    pub sim_seed: u64,
    pub profile: Profile,
    pub multipliers: Multipliers,
    #[serde(rename = "return")]
    pub ret: f64,
    pub competitor: f64,
    pub suboptimality: f64,
    pub queries: u64,
    pub query_bound: f64,
    pub per_call: Vec<u64>,
    pub constraints: usize,
    pub tau_plus: u64,
    pub actions: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema: u32,
    pub config_hash: String,
    pub episodes: u64,
    pub mean_return: f64,
    pub stderr_return: f64,
    pub competitor: f64,
    pub mean_suboptimality: f64,
    pub max_queries: u64,
    pub query_bound: f64,
    pub within_bound: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub config_hash: String,
    pub parallel: bool,
    pub workers: Option<usize>,
    pub total_secs: f64,
    pub episode_secs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<EpisodeRow>,
    pub summary: Summary,
    pub params: DerivedParams,
    pub timing: Timing,
}

const CSV_HEADER: &str =
    "schema,config_hash,episodes,mean_return,stderr_return,competitor,mean_suboptimality,max_queries,query_bound,within_bound";

impl RunReport {
    pub fn jsonl(&self) -> String {
        self.rows.iter().map(|r| serde_json::to_string(r).expect("row serialises") + "\n").collect()
    }

    /// Header plus one summary line, or the header alone for an empty run.
    pub fn summary_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let s = &self.summary;
        if s.episodes > 0 {
            out.push_str(&format!(
                "{},{},{},{:?},{:?},{:?},{:?},{},{:?},{}\n",
                s.schema,
                s.config_hash,
                s.episodes,
                s.mean_return,
                s.stderr_return,
                s.competitor,
                s.mean_suboptimality,
                s.max_queries,
                s.query_bound,
                s.within_bound
            ));
        }
        out
    }

    pub fn write(&self, prefix: &Path) -> Result<(), HarnessError> {
        let with = |ext: &str| {
            let mut p = prefix.as_os_str().to_owned();
            p.push(ext);
            PathBuf::from(p)
        };
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        }
        for (ext, body) in [
            (".jsonl", self.jsonl()),
            (".csv", self.summary_csv()),
            (".timing.json", serde_json::to_string_pretty(&self.timing).expect("timing serialises")),
        ] {
            let path = with(ext);
            std::fs::write(&path, body).map_err(|e| io_error(&path, e))?;
        }
        Ok(())
    }
}

/// A loaded tabular environment and the value the planner is judged against.
struct Prepared {
    mdp: Arc<TabularMdp>,
    planner: PlannerConfig,
    discount: Option<DiscountParams>,
    competitor: f64,
}

fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    let (mdp, competitor_values) = match &cfg.env {
        EnvSpec::Tabular(spec) | EnvSpec::PolicyRealizable(spec) => {
            let env = if matches!(cfg.env, EnvSpec::Tabular(_)) {
                make_tabular_realizable(spec)?
            } else {
                make_policy_realizable(spec)?
            };
            let env = perturb_features(&env, cfg.wrappers.eta, seeds::derive(cfg.seed, Purpose::Perturb, &[]))?;
            let values = match &env.certificate.competitor {
                Competitor::Optimal => env.certificate.values.clone(),
                Competitor::Policy(pi) => dp::policy_eval(&env.mdp, pi),
            };
            (env.mdp, Some(values))
        }
        EnvSpec::File { path } => {
            let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
            match load_env(&text)? {
                Environment::Tabular { mdp, .. } => {
                    if cfg.wrappers.eta > 0.0 {
                        return Err(invalid("wrappers.eta", "perturbation needs a generated environment"));
                    }
                    (mdp, None)
                }
                Environment::Hypercube(_) => return Err(hypercube_rejected()),
            }
        }
        EnvSpec::Hypercube(_) => return Err(hypercube_rejected()),
    };
    if !(cfg.wrappers.lambda >= 0.0) {
        return Err(invalid("wrappers.lambda", "must be non-negative"));
    }
    if cfg.start >= mdp.start_states().len() {
        return Err(invalid("start", "no such start state"));
    }
    let s0 = mdp.start_states()[cfg.start];
    let mut planner = cfg.planner.clone();
    if planner.d != mdp.dim() {
        return Err(invalid("planner.d", format!("environment has d = {}", mdp.dim())));
    }
    if planner.actions != mdp.actions() {
        return Err(invalid("planner.A", format!("environment has A = {}", mdp.actions())));
    }
    if let Some(b) = cfg.modes.break_early {
        planner.break_early = Some(b);
    }
    if let Some(s) = cfg.modes.strengthened {
        planner.strengthened = s;
    }
    let (discount, competitor) = match cfg.wrappers.gamma {
        Some(gamma) => {
            let params = match planner.profile {
                Profile::Faithful => faithful_discount(gamma, &mut planner)?,
                Profile::Practical => DiscountParams::new(gamma, cfg.wrappers.tail)?,
            };
            planner.horizon = params.h_eff;
            let v = dp::discounted_vstar(&mdp, gamma, 1e-12).v;
            (Some(params), v[s0])
        }
        None => {
            if planner.horizon != mdp.horizon() {
                return Err(invalid("planner.H", format!("environment has H = {}", mdp.horizon())));
            }
            let values = competitor_values.unwrap_or_else(|| dp::finite_horizon_vstar(&mdp).0);
            (None, values.at(1, s0))
        }
    };
    Ok(Prepared { mdp: Arc::new(mdp), planner, discount, competitor })
}

/// Runs the wrapped planner at `0.98 delta` with tail `eps / (24 sqrt(E_d))`.
/// `eps` and `E_d` depend on the horizon, which depends on the tail, so the
/// pair is iterated until the horizon settles.
fn faithful_discount(gamma: f64, planner: &mut PlannerConfig) -> Result<DiscountParams, HarnessError> {
    planner.delta *= 0.98;
    for _ in 0..50 {
        let (eps, e_d, _) = crate::planner::eps_fixed_point(planner)?;
        let params = DiscountParams::new(gamma, eps / (24.0 * (e_d as f64).sqrt()))?;
        if params.h_eff == planner.horizon {
            return Ok(params);
        }
        planner.horizon = params.h_eff;
    }
    Err(invalid("wrappers.gamma", "effective horizon did not settle"))
}

fn hypercube_rejected() -> HarnessError {
    invalid("env.kind", "hypercube environments carry costs, not [0, 1] rewards; use lb-demo")
}

struct Outcome {
    row: EpisodeRow,
    secs: f64,
}

fn play<S: ForkableSimulator>(
    mut sim: S,
    planner: &mut TensorPlan,
    start: usize,
    episode: u64,
) -> Result<crate::planner::Episode, HarnessError> {
    run_episode(&mut sim, planner, start, episode).map_err(|source| HarnessError::Episode {
        episode,
        seed: planner.episode_seed(),
        source,
    })
}

/// Runs every episode of `cfg` and returns the ordered report. Nothing is
/// written; see [`run_and_write`].
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport, HarnessError> {
    run_experiment_with_workers(cfg, None)
}

pub fn run_experiment_with_workers(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport, HarnessError> {
    let started = Instant::now();
    let prep = prepare(cfg)?;
    let params = crate::planner::derive_params(&prep.planner)?;
    let hash = cfg.hash();
    let (a, h) = (prep.planner.actions, prep.planner.horizon);
    let bound = params.query_bound(a, h);
    let offsets_seed = seeds::derive(cfg.seed, Purpose::Inaccuracy, &[]);
    let mode = if cfg.modes.exact_expectation { SamplingMode::ExactExpectation } else { SamplingMode::Sampled };

    let run_one = |i: usize| -> Result<Outcome, HarnessError> {
        let t0 = Instant::now();
        let episode = i as u64;
        let sim_seed = seeds::derive(cfg.seed, Purpose::Simulator, &[episode]);
        let base =
            inaccurate_wrap(Arc::clone(&prep.mdp), cfg.wrappers.lambda, offsets_seed, sim_seed).with_mode(mode);
        let mut planner = TensorPlan::with_params(prep.planner.clone(), params.clone());
        let ep = match prep.discount {
            Some(dp_params) => play(DiscountWrapper::new(base.stationary(), dp_params, sim_seed), &mut planner, cfg.start, episode)?,
            None => play::<TabularSimulator>(base, &mut planner, cfg.start, episode)?,
        };
        let row = EpisodeRow {
            schema: SCHEMA_VERSION,
            config_hash: hash.clone(),
            episode,
            seed: planner.episode_seed(),
            sim_seed,
            profile: prep.planner.profile,
            multipliers: prep.planner.multipliers(),
            ret: ep.ret,
            competitor: prep.competitor,
            suboptimality: prep.competitor - ep.ret,
            queries: ep.queries,
            query_bound: bound,
            per_call: ep.per_call,
            constraints: ep.state.constraints_appended(),
            tau_plus: ep.state.tau_plus,
            actions: ep.trajectory.iter().map(|s| s.action).collect(),
        };
        Ok(Outcome { row, secs: t0.elapsed().as_secs_f64() })
    };
    let outcomes = crate::par::with_workers(workers, || crate::par::map_indexed(cfg.episodes as usize, run_one));
    let mut rows = Vec::with_capacity(outcomes.len());
    let mut episode_secs = Vec::with_capacity(outcomes.len());
    for o in outcomes {
        let o = o?;
        rows.push(o.row);
        episode_secs.push(o.secs);
    }
    let summary = summarize(&hash, &rows, prep.competitor, bound);
    let timing = Timing {
        config_hash: hash,
        parallel: crate::par::is_parallel(),
        workers,
        total_secs: started.elapsed().as_secs_f64(),
        episode_secs,
    };
    Ok(RunReport { rows, summary, params, timing })
}

/// [`run_experiment_with_workers`] followed by writing to `cfg.output` when
/// set.
pub fn run_and_write(cfg: &ExperimentConfig, workers: Option<usize>) -> Result<RunReport, HarnessError> {
    let report = run_experiment_with_workers(cfg, workers)?;
    if let Some(prefix) = &cfg.output {
        report.write(prefix)?;
    }
    Ok(report)
}

fn summarize(hash: &str, rows: &[EpisodeRow], competitor: f64, bound: f64) -> Summary {
    let n = rows.len();
    let returns: Vec<f64> = rows.iter().map(|r| r.ret).collect();
    let (mean, stderr) = mean_stderr(&returns);
    Summary {
        schema: SCHEMA_VERSION,
        config_hash: hash.to_string(),
        episodes: n as u64,
        mean_return: mean,
        stderr_return: stderr,
        competitor,
        mean_suboptimality: competitor - mean,
        max_queries: rows.iter().map(|r| r.queries).max().unwrap_or(0),
        query_bound: bound,
        within_bound: rows.iter().all(|r| r.queries as f64 <= r.query_bound),
    }
}

/// Sample mean and standard error (zero below two samples).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Branching;

    fn config(episodes: u64) -> ExperimentConfig {
        let spec = RealizableSpec {
            n_states: 4,
            actions: 2,
            horizon: 2,
            d: 2,
            radius: 2.0,
            branching: Branching::Deterministic,
            seed: 3,
        };
        let planner = PlannerConfig::new(2, 2, 2, 0.5, 2.0)
            .practical(Multipliers { n1: 1e-4, n2: 1e-5, n3: 1e-6, threshold: 1.0 })
            .with_seed(11);
        ExperimentConfig {
            env: EnvSpec::Tabular(spec),
            planner,
            wrappers: Wrappers::default(),
            modes: Modes { exact_expectation: true, ..Modes::default() },
            episodes,
            seed: 5,
            start: 0,
            output: None,
        }
    }

    #[test]
    fn config_json_round_trip_and_hash() {
        let cfg = config(2);
        let text = serde_json::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
        let mut other = cfg.clone();
        other.seed += 1;
        assert_ne!(other.hash(), cfg.hash());
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let mut v = serde_json::to_value(config(1)).unwrap();
        v["bogus"] = serde_json::json!(1);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn zero_episodes_give_header_only() {
        let r = run_experiment(&config(0)).unwrap();
        assert_eq!(r.jsonl(), "");
        assert_eq!(r.summary_csv(), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn hypercube_is_not_a_planning_env() {
        let mut cfg = config(1);
        cfg.env = EnvSpec::Hypercube(crate::envs::make_hypercube(2, None).unwrap());
        let err = run_experiment(&cfg).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn mismatched_dimension_names_the_field() {
        let mut cfg = config(1);
        cfg.planner.d = 3;
        match run_experiment(&cfg).unwrap_err() {
            HarnessError::Invalid { field, .. } => assert_eq!(field, "planner.d"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn practical_discount_uses_the_given_tail() {
        let mut cfg = config(2);
        cfg.wrappers.gamma = Some(0.5);
        cfg.wrappers.tail = 0.05;
        let prep = prepare(&cfg).unwrap();
        let dp = prep.discount.unwrap();
        assert_eq!(prep.planner.horizon, dp.h_eff);
        assert!(0.5f64.powi(dp.h_eff as i32) / 0.5 <= 0.05);
        let r = run_experiment(&cfg).unwrap();
        assert_eq!(r.rows.len(), 2);
        assert_eq!(r.rows[0].actions.len(), dp.h_eff);
    }

    #[test]
    fn faithful_discount_settles_the_horizon() {
        let mut cfg = config(1);
        cfg.planner.profile = Profile::Faithful;
        cfg.planner.practical_overrides = None;
        cfg.wrappers.gamma = Some(0.5);
        let prep = prepare(&cfg).unwrap();
        let h = prep.planner.horizon;
        assert_eq!(prep.discount.unwrap().h_eff, h);
        assert_eq!(prep.planner.delta, 0.98 * 0.5);
        let p = crate::planner::derive_params(&prep.planner).unwrap();
        assert!((p.zeta - 0.98 * 0.5 / (4.0 * h as f64)).abs() < 1e-15);
    }

    #[test]
    fn stderr_of_constant_is_zero() {
        assert_eq!(mean_stderr(&[1.0, 1.0, 1.0]), (1.0, 0.0));
        let (m, s) = mean_stderr(&[0.0, 2.0]);
        assert_eq!(m, 1.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}
