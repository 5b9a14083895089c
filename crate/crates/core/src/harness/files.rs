use serde_json::Value;

use super::{invalid, EnvSpec, HarnessError};
use crate::dp;
use crate::envs::{make_policy_realizable, make_tabular_realizable, shortest_path_values, HypercubeEnv};
use crate::mdp::{MdpDocument, TabularMdp};

/// A loaded environment file.
#[derive(Debug, Clone, PartialEq)]
pub enum Environment {
    Tabular { mdp: TabularMdp, lambda: f64, seed: u64 },
    Hypercube(HypercubeEnv),
}

impl Environment {
    pub fn to_json(&self) -> String {
        match self {
            Environment::Tabular { mdp, lambda, seed } => mdp.to_json(*lambda, *seed),
            Environment::Hypercube(h) => serde_json::to_string_pretty(h).expect("hypercube serialises"),
        }
    }
}

/// Builds the environment described by `spec` and renders its file. The
/// text is parsed back and compared before it is returned.
pub fn gen_env(spec: &EnvSpec) -> Result<String, HarnessError> {
    let env = match spec {
        EnvSpec::Tabular(s) => Environment::Tabular { mdp: make_tabular_realizable(s)?.mdp, lambda: 0.0, seed: s.seed },
        EnvSpec::PolicyRealizable(s) => {
            Environment::Tabular { mdp: make_policy_realizable(s)?.mdp, lambda: 0.0, seed: s.seed }
        }
        EnvSpec::Hypercube(h) => Environment::Hypercube(h.clone()),
        EnvSpec::File { .. } => return Err(invalid("kind", "`file` names an existing environment")),
    };
    let text = env.to_json();
    let back = load_env(&text)?;
    if back != env || back.to_json() != text {
        return Err(invalid("env", "serialisation did not round-trip"));
    }
    Ok(text)
}

/// Parses either a tabular MDP document or a hypercube `{d, s_star?}`.
pub fn load_env(text: &str) -> Result<Environment, HarnessError> {
    let value: Value = serde_json::from_str(text).map_err(|e| HarnessError::Json(e.to_string()))?;
    if value.get("format").is_some() {
        let doc: MdpDocument = serde_json::from_value(value).map_err(|e| HarnessError::Json(e.to_string()))?;
        let (mdp, lambda, seed) = doc.into_mdp()?;
        Ok(Environment::Tabular { mdp, lambda, seed })
    } else if value.get("d").is_some() {
        let env: HypercubeEnv = serde_json::from_value(value).map_err(|e| HarnessError::Json(e.to_string()))?;
        Ok(Environment::Hypercube(env))
    } else {
        Err(invalid("env", "neither a tabular document nor a hypercube"))
    }
}

/// Oracle tables as CSV: `h,state,value` of `v*` for tabular files,
/// `state,value` of the negated shortest-path cost for hypercubes.
pub fn eval_tables(env: &Environment) -> Result<String, HarnessError> {
    match env {
        Environment::Tabular { mdp, .. } => Ok(dp::finite_horizon_vstar(mdp).0.to_csv()),
        Environment::Hypercube(h) => {
            let values = shortest_path_values(h)?;
            let mut out = String::from("state,value\n");
            for (i, v) in values.iter().enumerate() {
                let cell: Vec<String> = h.cell(i).iter().map(|x| x.to_string()).collect();
                out.push_str(&format!("{},{:?}\n", cell.join(" "), v));
            }
            Ok(out)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{make_hypercube, Branching, RealizableSpec};

    fn tabular_spec(seed: u64) -> EnvSpec {
        EnvSpec::Tabular(RealizableSpec {
            n_states: 5,
            actions: 2,
            horizon: 3,
            d: 3,
            radius: 3.0,
            branching: Branching::Stochastic,
            seed,
        })
    }

    #[test]
    fn hypercube_file_regenerates() {
        let spec = EnvSpec::Hypercube(make_hypercube(3, Some(vec![1, -1, 1])).unwrap());
        let text = gen_env(&spec).unwrap();
        let EnvSpec::Hypercube(h) = &spec else { unreachable!() };
        assert_eq!(load_env(&text).unwrap(), Environment::Hypercube(h.clone()));
    }

    #[test]
    fn tabular_file_is_deterministic() {
        let a = gen_env(&tabular_spec(7)).unwrap();
        assert_eq!(a, gen_env(&tabular_spec(7)).unwrap());
        assert_ne!(a, gen_env(&tabular_spec(8)).unwrap());
    }

    #[test]
    fn invalid_spec_names_field() {
        let err = serde_json::from_str::<EnvSpec>(r#"{"kind":"tabular","n_states":3,"A":2,"H":2,"d":2,"B":2,"seed":1,"colour":3}"#)
            .unwrap_err();
        assert!(err.to_string().contains("colour"));
        let spec = EnvSpec::Tabular(RealizableSpec {
            n_states: 0,
            actions: 2,
            horizon: 2,
            d: 2,
            radius: 2.0,
            branching: Branching::Deterministic,
            seed: 0,
        });
        assert!(gen_env(&spec).unwrap_err().to_string().contains("n_states"));
    }

    #[test]
    fn eval_prints_tables() {
        let env = load_env(&gen_env(&tabular_spec(1)).unwrap()).unwrap();
        let csv = eval_tables(&env).unwrap();
        assert!(csv.starts_with("h,state,value\n"));
        assert_eq!(csv.lines().count(), 1 + 4 * 5);
        let cube = Environment::Hypercube(make_hypercube(2, Some(vec![1, 1])).unwrap());
        let csv = eval_tables(&cube).unwrap();
        assert!(csv.contains("0 -1,-1.5\n"));
    }
}
