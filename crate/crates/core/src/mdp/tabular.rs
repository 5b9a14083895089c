use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MDP_FORMAT_VERSION: u32 = 1;
const PROB_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MdpFormatError {
    #[error("field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unsupported format version {0}")]
    Version(u32),
    #[error("json: {0}")]
    Json(String),
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> MdpFormatError {
    MdpFormatError::Invalid { field: field.into(), reason: reason.into() }
}

/// One atom of `Q_{sa}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub prob: f64,
    pub reward: f64,
    pub next: usize,
}

/// A finite MDP with stationary dynamics and stage-indexed features.
///
/// `features[h - 1][s]` holds `phi_h(s)` for `h = 1..=H + 1`; the last row is
/// all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    n_states: usize,
    actions: usize,
    horizon: usize,
    dim: usize,
    transitions: Vec<Vec<Vec<Outcome>>>,
    features: Vec<Vec<Vec<f64>>>,
    start_states: Vec<usize>,
}

impl TabularMdp {
    /// Builds and validates an MDP. `features` may have `H` rows (the zero
    /// row is appended) or `H + 1` rows.
    pub fn new(
        actions: usize,
        horizon: usize,
        dim: usize,
        transitions: Vec<Vec<Vec<Outcome>>>,
        mut features: Vec<Vec<Vec<f64>>>,
        start_states: Vec<usize>,
    ) -> Result<Self, MdpFormatError> {
        let n_states = transitions.len();
        if n_states == 0 {
            return Err(invalid("transitions", "no states"));
        }
        if actions == 0 {
            return Err(invalid("actions", "must be positive"));
        }
        if horizon == 0 {
            return Err(invalid("H", "must be positive"));
        }
        if dim == 0 {
            return Err(invalid("d", "must be positive"));
        }
        if features.len() == horizon {
            features.push(vec![vec![0.0; dim]; n_states]);
        }
        let mdp = Self { n_states, actions, horizon, dim, transitions, features, start_states };
        mdp.validate()?;
        Ok(mdp)
    }

    fn validate(&self) -> Result<(), MdpFormatError> {
        for (s, row) in self.transitions.iter().enumerate() {
            if row.len() != self.actions {
                return Err(invalid(format!("transitions[{s}]"), format!("expected {} actions", self.actions)));
            }
            for (a, dist) in row.iter().enumerate() {
                let field = || format!("transitions[{s}][{a}]");
                if dist.is_empty() {
                    return Err(invalid(field(), "empty distribution"));
                }
                let mut total = 0.0;
                for o in dist {
                    if !(o.prob >= 0.0) {
                        return Err(invalid(field(), "negative probability"));
                    }
                    if !(0.0..=1.0).contains(&o.reward) {
                        return Err(invalid(field(), "reward outside [0, 1]"));
                    }
                    if o.next >= self.n_states {
                        return Err(invalid(field(), format!("next state {} out of range", o.next)));
                    }
                    total += o.prob;
                }
                if (total - 1.0).abs() > PROB_TOL {
                    return Err(invalid(field(), format!("probabilities sum to {total}")));
                }
            }
        }
        if self.features.len() != self.horizon + 1 {
            return Err(invalid("features", format!("expected {} stages", self.horizon + 1)));
        }
        for (h, stage) in self.features.iter().enumerate() {
            if stage.len() != self.n_states {
                return Err(invalid(format!("features[{h}]"), "wrong number of states"));
            }
            for (s, phi) in stage.iter().enumerate() {
                let field = || format!("features[{h}][{s}]");
                if phi.len() != self.dim {
                    return Err(invalid(field(), format!("expected length {}", self.dim)));
                }
                if crate::tensor::norm(phi) > 1.0 + NORM_TOL {
                    return Err(invalid(field(), "norm exceeds 1"));
                }
                if h == self.horizon && phi.iter().any(|&x| x != 0.0) {
                    return Err(invalid(field(), "past-horizon features must be zero"));
                }
            }
        }
        if self.start_states.is_empty() {
            return Err(invalid("start_states", "empty"));
        }
        if let Some(&s) = self.start_states.iter().find(|&&s| s >= self.n_states) {
            return Err(invalid("start_states", format!("state {s} out of range")));
        }
        Ok(())
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn start_states(&self) -> &[usize] {
        &self.start_states
    }

    pub fn outcomes(&self, s: usize, a: usize) -> &[Outcome] {
        &self.transitions[s][a]
    }

    pub fn transitions(&self) -> &[Vec<Vec<Outcome>>] {
        &self.transitions
    }

    /// `phi_h(s)` for `h` in `1..=H + 1`.
    pub fn features(&self, h: usize, s: usize) -> &[f64] {
        &self.features[h - 1][s]
    }

    pub fn feature_table(&self) -> &[Vec<Vec<f64>>] {
        &self.features
    }

    /// Replaces the features (same shape), revalidating norms.
    pub fn with_features(&self, features: Vec<Vec<Vec<f64>>>) -> Result<Self, MdpFormatError> {
        Self::new(
            self.actions,
            self.horizon,
            self.dim,
            self.transitions.clone(),
            features,
            self.start_states.clone(),
        )
    }

    /// Expected reward `r_sa`.
    pub fn mean_reward(&self, s: usize, a: usize) -> f64 {
        self.transitions[s][a].iter().map(|o| o.prob * o.reward).sum()
    }

    /// `P_{sa} phi_h`.
    pub fn expected_features(&self, s: usize, a: usize, h: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for o in &self.transitions[s][a] {
            for (acc, x) in out.iter_mut().zip(self.features(h, o.next)) {
                *acc += o.prob * x;
            }
        }
        out
    }

    /// `P_{sa} v` for a state-indexed vector.
    pub fn expect(&self, s: usize, a: usize, v: &[f64]) -> f64 {
        self.transitions[s][a].iter().map(|o| o.prob * v[o.next]).sum()
    }

    pub fn is_deterministic(&self) -> bool {
        self.transitions.iter().flatten().all(|d| d.len() == 1)
    }

    pub fn to_document(&self, lambda: f64, seed: u64) -> MdpDocument {
        MdpDocument {
            format: "tensorplan-mdp".to_string(),
            version: MDP_FORMAT_VERSION,
            states: self.n_states,
            actions: self.actions,
            horizon: self.horizon,
            dim: self.dim,
            transitions: self
                .transitions
                .iter()
                .map(|row| row.iter().map(|d| d.iter().map(|o| (o.prob, o.reward, o.next)).collect()).collect())
                .collect(),
            features: self.features.clone(),
            start_states: self.start_states.clone(),
            lambda,
            seed,
        }
    }

    pub fn to_json(&self, lambda: f64, seed: u64) -> String {
        serde_json::to_string_pretty(&self.to_document(lambda, seed)).expect("mdp document serialises")
    }

    /// Parses a document, returning the MDP and its `(lambda, seed)`.
    pub fn from_json(text: &str) -> Result<(Self, f64, u64), MdpFormatError> {
        let doc: MdpDocument = serde_json::from_str(text).map_err(|e| MdpFormatError::Json(e.to_string()))?;
        doc.into_mdp()
    }
}

/// Versioned JSON form of a [`TabularMdp`] plus simulator inaccuracy
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpDocument {
    pub format: String,
    pub version: u32,
    pub states: usize,
    pub actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    #[serde(rename = "d")]
    pub dim: usize,
    /// `transitions[s][a]` = list of `(prob, reward, next)`.
    pub transitions: Vec<Vec<Vec<(f64, f64, usize)>>>,
    /// `features[h - 1][s]` for `h = 1..=H + 1`.
    pub features: Vec<Vec<Vec<f64>>>,
    pub start_states: Vec<usize>,
    pub lambda: f64,
    pub seed: u64,
}

impl MdpDocument {
    pub fn into_mdp(self) -> Result<(TabularMdp, f64, u64), MdpFormatError> {
        if self.format != "tensorplan-mdp" {
            return Err(invalid("format", format!("unknown format `{}`", self.format)));
        }
        if self.version != MDP_FORMAT_VERSION {
            return Err(MdpFormatError::Version(self.version));
        }
        if self.transitions.len() != self.states {
            return Err(invalid("states", "does not match transitions"));
        }
        if !(self.lambda >= 0.0) {
            return Err(invalid("lambda", "must be non-negative"));
        }
        let transitions = self
            .transitions
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|d| d.into_iter().map(|(prob, reward, next)| Outcome { prob, reward, next }).collect())
                    .collect()
            })
            .collect();
        let mdp = TabularMdp::new(self.actions, self.horizon, self.dim, transitions, self.features, self.start_states)?;
        Ok((mdp, self.lambda, self.seed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> TabularMdp {
        let t = vec![
            vec![vec![Outcome { prob: 1.0, reward: 0.0, next: 0 }], vec![Outcome { prob: 1.0, reward: 1.0, next: 1 }]],
            vec![vec![Outcome { prob: 1.0, reward: 0.0, next: 1 }], vec![Outcome { prob: 1.0, reward: 1.0, next: 1 }]],
        ];
        let f = vec![vec![vec![1.0], vec![0.5]], vec![vec![0.5], vec![0.25]]];
        TabularMdp::new(2, 2, 1, t, f, vec![0]).unwrap()
    }

    #[test]
    fn appends_terminal_zero_row() {
        let m = chain();
        assert_eq!(m.features(3, 1), &[0.0]);
        assert!(m.is_deterministic());
        assert_eq!(m.mean_reward(0, 1), 1.0);
        assert_eq!(m.expected_features(0, 1, 2), vec![0.25]);
    }

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let m = chain();
        let text = m.to_json(0.1, 42);
        let (back, lambda, seed) = TabularMdp::from_json(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!((lambda, seed), (0.1, 42));
    }

    #[test]
    fn rejects_bad_probabilities_and_fields() {
        let mut doc = chain().to_document(0.0, 0);
        doc.transitions[0][0][0].0 = 0.9;
        let err = doc.into_mdp().unwrap_err();
        assert!(err.to_string().contains("transitions[0][0]"), "{err}");

        let mut doc = chain().to_document(0.0, 0);
        doc.features[0][0] = vec![1.5];
        assert!(doc.into_mdp().unwrap_err().to_string().contains("features[0][0]"));

        let text = chain().to_json(0.0, 0).replacen("\"lambda\"", "\"bogus\": 1, \"lambda\"", 1);
        assert!(matches!(TabularMdp::from_json(&text), Err(MdpFormatError::Json(_))));
    }
}
