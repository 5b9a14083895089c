//! The parameter set `Sol(X)`: the `B`-ball cut down by tensored consistency
//! constraints, each allowed a fixed slack.

mod optimizer;

use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, TensorError, TensoredConstraint};

pub use optimizer::{optimistic_select, OptimizerBudget, Selection};

/// Relative slack on the norm ball, absorbing rounding in `||theta|| = B`.
pub const NORM_SLACK: f64 = 1e-12;

const RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HypothesisError {
    #[error("argument `{0}` must be positive")]
    NonPositiveArgument(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("constraint list would exceed its budget of {limit}")]
    BudgetExceeded { limit: usize },
    #[error("no member found within budget ({nodes} nodes, {samples} samples)")]
    InfeasibleWithinBudget { nodes: usize, samples: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("corrupt hypothesis encoding: {0}")]
    Corrupt(String),
}

/// `E_d` and the scale `H^A eps` it was evaluated at.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EluderBudget {
    pub e_d: u64,
    pub scale: f64,
}

/// `floor(3 (d+1)^A e/(e-1) ln(3 + 3 (2 (B+1)^A 3^A / (H^A eps))^2) + 1)`.
///
/// The logarithm is evaluated through `ln x` so that large `A` does not
/// overflow.
pub fn eluder_bound(d: usize, actions: usize, b: f64, h: usize, eps: f64) -> Result<EluderBudget, HypothesisError> {
    if d == 0 {
        return Err(HypothesisError::NonPositiveArgument("d"));
    }
    if actions == 0 {
        return Err(HypothesisError::NonPositiveArgument("A"));
    }
    if !(b > 0.0) {
        return Err(HypothesisError::NonPositiveArgument("B"));
    }
    if h == 0 {
        return Err(HypothesisError::NonPositiveArgument("H"));
    }
    if !(eps > 0.0) {
        return Err(HypothesisError::NonPositiveArgument("eps"));
    }
    let a = actions as f64;
    let ln_x = 2f64.ln() + a * (3.0 * (b + 1.0) / h as f64).ln() - eps.ln();
    // ln(3 + 3 x^2) = ln 3 + ln(1 + x^2)
    let ln1p_x2 = if ln_x > 0.0 { 2.0 * ln_x + (-2.0 * ln_x).exp().ln_1p() } else { (2.0 * ln_x).exp().ln_1p() };
    let e = std::f64::consts::E;
    let raw = 3.0 * ((d + 1) as f64).powf(a) * e / (e - 1.0) * (3f64.ln() + ln1p_x2) + 1.0;
    Ok(EluderBudget { e_d: raw.floor() as u64, scale: (h as f64).powf(a) * eps })
}

/// `{theta : ||theta|| <= B, |<T_i, lift(theta)^{(x) A}>| <= threshold}`.
///
/// Appending returns a new set; the constraint list is shared through `Arc`s.
#[derive(Debug, Clone, PartialEq)]
pub struct HypothesisSet {
    d: usize,
    actions: usize,
    radius: f64,
    threshold: f64,
    constraints: Vec<Arc<TensoredConstraint>>,
    max_constraints: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    d: usize,
    actions: usize,
    radius: f64,
    threshold: f64,
    max_constraints: Option<usize>,
    count: usize,
}

impl HypothesisSet {
    pub fn new(d: usize, actions: usize, radius: f64, threshold: f64) -> Result<Self, HypothesisError> {
        if d == 0 {
            return Err(HypothesisError::NonPositiveArgument("d"));
        }
        if actions == 0 {
            return Err(HypothesisError::NonPositiveArgument("A"));
        }
        if !(radius > 0.0) {
            return Err(HypothesisError::NonPositiveArgument("B"));
        }
        if !(threshold >= 0.0) {
            return Err(HypothesisError::NonPositiveArgument("threshold"));
        }
        tensor::flat_len(d, actions)?;
        Ok(Self { d, actions, radius, threshold, constraints: Vec::new(), max_constraints: None })
    }

    /// Caps the number of constraints; appending beyond it is an error.
    pub fn with_limit(mut self, limit: usize) -> Self {
        self.max_constraints = Some(limit);
        self
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn limit(&self) -> Option<usize> {
        self.max_constraints
    }

    pub fn constraints(&self) -> impl ExactSizeIterator<Item = &TensoredConstraint> {
        self.constraints.iter().map(|c| c.as_ref())
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn in_ball(&self, theta: &[f64]) -> bool {
        tensor::norm(theta) <= self.radius * (1.0 + NORM_SLACK)
    }

    pub fn membership(&self, theta: &[f64]) -> bool {
        theta.len() == self.d
            && self.in_ball(theta)
            && self.constraints.iter().all(|c| c.value(theta).abs() <= self.threshold)
    }

    /// Largest `|<T_i, M_theta>|` over the list (0 when empty).
    pub fn max_violation(&self, theta: &[f64]) -> f64 {
        self.constraints.iter().map(|c| c.value(theta).abs()).fold(0.0, f64::max)
    }

    pub fn append_constraint(&self, t: TensoredConstraint) -> Result<Self, HypothesisError> {
        if t.d() != self.d || t.actions() != self.actions {
            let expected = tensor::flat_len(self.d, self.actions)?;
            return Err(HypothesisError::DimensionMismatch { expected, got: t.entries().len() });
        }
        if let Some(limit) = self.max_constraints {
            if self.constraints.len() + 1 > limit {
                return Err(HypothesisError::BudgetExceeded { limit });
            }
        }
        let mut next = self.clone();
        next.constraints.push(Arc::new(t));
        Ok(next)
    }

    /// Numerical rank of the stacked constraints, singular values counted
    /// above `1e-8` times the largest.
    pub fn constraint_rank(&self) -> usize {
        if self.constraints.is_empty() {
            return 0;
        }
        let cols = self.constraints[0].entries().len();
        let m = DMatrix::from_fn(self.constraints.len(), cols, |i, j| self.constraints[i].entries()[j]);
        let sv = m.singular_values();
        let top = sv.iter().cloned().fold(0.0, f64::max);
        if top == 0.0 {
            return 0;
        }
        sv.iter().filter(|&&s| s > RANK_TOL * top).count()
    }

    /// `u32` header length, JSON header, then each constraint's little-endian
    /// encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            d: self.d,
            actions: self.actions,
            radius: self.radius,
            threshold: self.threshold,
            max_constraints: self.max_constraints,
            count: self.constraints.len(),
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for c in &self.constraints {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    /// Inverse of [`HypothesisSet::to_bytes`]; returns the set and the bytes
    /// consumed.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, usize), HypothesisError> {
        let corrupt = |m: &str| HypothesisError::Corrupt(m.to_string());
        let len = u32::from_le_bytes(bytes.get(0..4).ok_or_else(|| corrupt("truncated header"))?.try_into().unwrap()) as usize;
        let json = bytes.get(4..4 + len).ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(json).map_err(|e| HypothesisError::Corrupt(e.to_string()))?;
        let mut set = Self::new(header.d, header.actions, header.radius, header.threshold)?;
        set.max_constraints = header.max_constraints;
        let mut pos = 4 + len;
        for _ in 0..header.count {
            let (c, used) = TensoredConstraint::from_le_bytes(&bytes[pos..])?;
            if c.d() != set.d || c.actions() != set.actions {
                return Err(corrupt("constraint shape"));
            }
            set.constraints.push(Arc::new(c));
            pos += used;
        }
        Ok((set, pos))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{tensor_flatten, TdVector};
    use proptest::prelude::*;

    #[test]
    fn eluder_reference_values() {
        // references evaluated at 50 significant digits: 45.7022..., 737.3...
        assert_eq!(eluder_bound(1, 1, 1.0, 2, 1.0).unwrap().e_d, 45);
        assert_eq!(eluder_bound(2, 2, 3.0, 3, 0.01).unwrap().e_d, 737);
        assert_eq!(eluder_bound(1, 1, 1.0, 2, 1.0).unwrap().scale, 2.0);
    }

    #[test]
    fn eluder_rejects_non_positive() {
        assert_eq!(eluder_bound(1, 1, 1.0, 2, 0.0), Err(HypothesisError::NonPositiveArgument("eps")));
        assert_eq!(eluder_bound(0, 1, 1.0, 2, 1.0), Err(HypothesisError::NonPositiveArgument("d")));
        assert_eq!(eluder_bound(1, 1, -1.0, 2, 1.0), Err(HypothesisError::NonPositiveArgument("B")));
    }

    #[test]
    fn eluder_monotone_in_eps() {
        let mut prev = u64::MAX;
        for k in -12..3 {
            let e = eluder_bound(3, 2, 2.0, 4, 10f64.powi(k)).unwrap().e_d;
            assert!(e <= prev);
            prev = e;
        }
    }

    #[test]
    fn eluder_prefactor_scales_with_d() {
        // (2d+2)^2 / (d+1)^2 = 4, so the ratio of E_d - 1 is 4 up to the log
        let raw = |d: usize| eluder_bound(d, 2, 1.0, 2, 1e-3).unwrap().e_d as f64;
        let ratio = raw(7) / raw(3);
        assert!((ratio - 4.0).abs() < 0.01, "{ratio}");
    }

    fn single(delta: &[f64], thr: f64) -> HypothesisSet {
        let d = delta.len() - 1;
        let s = HypothesisSet::new(d, 1, 1.0, thr).unwrap();
        s.append_constraint(tensor_flatten(&[TdVector(delta.to_vec())]).unwrap()).unwrap()
    }

    #[test]
    fn membership_examples() {
        let s = HypothesisSet::new(2, 2, 1.0, 0.1).unwrap();
        assert!(s.membership(&[0.6, 0.8]));
        assert!(!s.membership(&[1.01, 0.0]));
        let s = single(&[-0.5, 1.0, 0.0], 0.0);
        assert!(s.membership(&[0.5, 0.3]));
        assert!(!s.membership(&[0.4, 0.3]));
    }

    #[test]
    fn append_errors_and_vacuous_constraints() {
        let s = HypothesisSet::new(1, 2, 1.0, 0.01).unwrap().with_limit(1);
        let zero = tensor_flatten(&[TdVector(vec![0.0, 0.0]), TdVector(vec![1.0, 1.0])]).unwrap();
        let s1 = s.append_constraint(zero.clone()).unwrap();
        for t in [-1.0, -0.3, 0.0, 0.7, 1.0] {
            assert_eq!(s.membership(&[t]), s1.membership(&[t]));
        }
        assert_eq!(s1.append_constraint(zero), Err(HypothesisError::BudgetExceeded { limit: 1 }));
        let wrong = tensor_flatten(&[TdVector(vec![1.0, 1.0, 1.0])]).unwrap();
        assert_eq!(s.append_constraint(wrong), Err(HypothesisError::DimensionMismatch { expected: 4, got: 3 }));
    }

    #[test]
    fn rank_examples() {
        let s = HypothesisSet::new(2, 1, 1.0, 0.0).unwrap();
        assert_eq!(s.constraint_rank(), 0);
        let t = tensor_flatten(&[TdVector(vec![0.1, 0.2, 0.3])]).unwrap();
        let mut s = s.append_constraint(t.clone()).unwrap();
        assert_eq!(s.constraint_rank(), 1);
        for _ in 0..4 {
            s = s.append_constraint(t.clone()).unwrap();
        }
        assert_eq!(s.constraint_rank(), 1);
        let u = tensor_flatten(&[TdVector(vec![0.0, 1.0, 0.0])]).unwrap();
        assert_eq!(s.append_constraint(u).unwrap().constraint_rank(), 2);
    }

    #[test]
    fn bytes_roundtrip() {
        let s = single(&[-0.5, 1.0, 0.25], 0.125).with_limit(7);
        let bytes = s.to_bytes();
        let (back, used) = HypothesisSet::from_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, s);
    }

    proptest! {
        #[test]
        fn appending_never_enlarges(
            f in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 2),
            theta in prop::collection::vec(-1.0f64..1.0, 2),
            thr in 0.0f64..0.5,
        ) {
            let s = HypothesisSet::new(2, 2, 1.2, thr).unwrap();
            let t = tensor_flatten(&f.into_iter().map(TdVector).collect::<Vec<_>>()).unwrap();
            let s2 = s.append_constraint(t).unwrap();
            prop_assert!(!s2.membership(&theta) || s.membership(&theta));
        }
    }
}
