//! Concatenation, A-fold tensor flattening, tensor inner products and ball
//! clipping.
//!
//! Flattening is row-major with the first factor as the slowest-varying axis:
//! for factors `v_0, ..., v_{A-1}` of length `n = d + 1` the entry
//! `v_0[j_0] * ... * v_{A-1}[j_{A-1}]` lives at flat index
//! `((j_0 * n + j_1) * n + ...) * n + j_{A-1}`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("tensor product needs at least one factor")]
    NoFactors,
    #[error("flattened size (d+1)^A = {0} exceeds the dense limit")]
    TooLarge(u128),
    #[error("corrupt constraint encoding: {0}")]
    Corrupt(&'static str),
}

/// Upper bound on dense tensored vectors.
pub const MAX_FLAT_LEN: usize = 1_000_000;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `(x, v_1, ..., v_d)`.
pub fn concat_scalar(x: f64, v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len() + 1);
    out.push(x);
    out.extend_from_slice(v);
    out
}

/// `concat(1, theta)`, the lift of a parameter vector.
pub fn lift(theta: &[f64]) -> Vec<f64> {
    concat_scalar(1.0, theta)
}

pub fn flat_len(d: usize, actions: usize) -> Result<usize, TensorError> {
    let len = ((d + 1) as u128).checked_pow(actions as u32).unwrap_or(u128::MAX);
    if len > MAX_FLAT_LEN as u128 {
        return Err(TensorError::TooLarge(len));
    }
    Ok(len as usize)
}

/// A TD vector `concat(r, P phi_{h+1} - phi_h(s))` or one of its estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdVector(pub Vec<f64>);

impl TdVector {
    pub fn new(reward: f64, feature_diff: &[f64]) -> Self {
        TdVector(concat_scalar(reward, feature_diff))
    }

    pub fn reward_part(&self) -> f64 {
        self.0[0]
    }

    pub fn feature_part(&self) -> &[f64] {
        &self.0[1..]
    }

    /// `<self, concat(1, theta)>`, the TD error of `v_theta` at this pair.
    pub fn consistency(&self, theta: &[f64]) -> f64 {
        self.0[0] + dot(&self.0[1..], theta)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A flattened A-fold tensor in `R^{(d+1)^A}`.
///
/// When built from factors the factors are kept alongside the dense entries;
/// [`TensoredConstraint::value`] then uses the factored product, while
/// [`tensor_inner`] always contracts the dense entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensoredConstraint {
    d: usize,
    actions: usize,
    entries: Vec<f64>,
    factors: Option<Vec<TdVector>>,
}

impl TensoredConstraint {
    /// Wraps dense entries without factor information.
    pub fn from_entries(d: usize, actions: usize, entries: Vec<f64>) -> Result<Self, TensorError> {
        let expected = flat_len(d, actions)?;
        if entries.len() != expected {
            return Err(TensorError::LengthMismatch { expected, got: entries.len() });
        }
        Ok(Self { d, actions, entries, factors: None })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn actions(&self) -> usize {
        self.actions
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn factors(&self) -> Option<&[TdVector]> {
        self.factors.as_deref()
    }

    pub fn norm(&self) -> f64 {
        norm(&self.entries)
    }

    /// `<T, flatten(concat(1, theta)^{(x) A})>`, through the factors when known.
    pub fn value(&self, theta: &[f64]) -> f64 {
        match &self.factors {
            Some(f) => f.iter().map(|td| td.consistency(theta)).product(),
            None => contract_lifted(&self.entries, self.d, self.actions, theta),
        }
    }

    /// Smallest absolute factor consistency, when factors are known.
    pub fn min_factor(&self, theta: &[f64]) -> Option<f64> {
        self.factors.as_ref().map(|f| {
            f.iter()
                .map(|td| td.consistency(theta).abs())
                .fold(f64::INFINITY, f64::min)
        })
    }

    /// Little-endian encoding: `d: u32, A: u32, has_factors: u8`, the dense
    /// entries as f64, then the factors (if any) as f64.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(9 + 8 * self.entries.len());
        out.extend_from_slice(&(self.d as u32).to_le_bytes());
        out.extend_from_slice(&(self.actions as u32).to_le_bytes());
        out.push(u8::from(self.factors.is_some()));
        for x in &self.entries {
            out.extend_from_slice(&x.to_le_bytes());
        }
        if let Some(f) = &self.factors {
            for td in f {
                for x in &td.0 {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out
    }

    /// Decodes one constraint, returning it and the number of bytes consumed.
    pub fn from_le_bytes(bytes: &[u8]) -> Result<(Self, usize), TensorError> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8], TensorError> {
            let s = bytes.get(pos..pos + n).ok_or(TensorError::Corrupt("truncated"))?;
            pos += n;
            Ok(s)
        };
        let d = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let actions = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let has_factors = match take(1)?[0] {
            0 => false,
            1 => true,
            _ => return Err(TensorError::Corrupt("factor flag")),
        };
        let len = flat_len(d, actions)?;
        let mut read_f64s = |n: usize| -> Result<Vec<f64>, TensorError> {
            let raw = take(8 * n)?;
            Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let entries = read_f64s(len)?;
        let factors = if has_factors {
            let mut f = Vec::with_capacity(actions);
            for _ in 0..actions {
                f.push(TdVector(read_f64s(d + 1)?));
            }
            Some(f)
        } else {
            None
        };
        Ok((Self { d, actions, entries, factors }, pos))
    }
}

/// Flattens the tensor product of `vs` (all of length `d + 1`).
pub fn tensor_flatten(vs: &[TdVector]) -> Result<TensoredConstraint, TensorError> {
    let first = vs.first().ok_or(TensorError::NoFactors)?;
    let n = first.len();
    if n == 0 {
        return Err(TensorError::LengthMismatch { expected: 1, got: 0 });
    }
    for v in vs {
        if v.len() != n {
            return Err(TensorError::LengthMismatch { expected: n, got: v.len() });
        }
    }
    let total = flat_len(n - 1, vs.len())?;
    let mut entries = Vec::with_capacity(total);
    entries.push(1.0);
    for v in vs {
        let mut next = Vec::with_capacity(entries.len() * n);
        for &e in &entries {
            next.extend(v.0.iter().map(|&x| e * x));
        }
        entries = next;
    }
    Ok(TensoredConstraint { d: n - 1, actions: vs.len(), entries, factors: Some(vs.to_vec()) })
}

/// Contracts a dense `(d+1)^A` tensor with `concat(1, theta)` on every axis,
/// innermost axis first.
fn contract_lifted(entries: &[f64], d: usize, actions: usize, theta: &[f64]) -> f64 {
    let m = lift(theta);
    let n = d + 1;
    let mut cur: Vec<f64> = entries.to_vec();
    for _ in 0..actions {
        cur = cur.chunks_exact(n).map(|c| dot(c, &m)).collect();
    }
    debug_assert_eq!(cur.len(), 1);
    cur[0]
}

/// `<T, flatten(concat(1, theta)^{(x) A})>` by dense contraction.
pub fn tensor_inner(t: &TensoredConstraint, theta: &[f64]) -> Result<f64, TensorError> {
    if theta.len() != t.d {
        return Err(TensorError::LengthMismatch { expected: t.d, got: theta.len() });
    }
    Ok(contract_lifted(&t.entries, t.d, t.actions, theta))
}

/// Radial projection onto the closed ball of radius `bound`.
pub fn clip_to_ball(x: &[f64], bound: f64) -> Vec<f64> {
    let n = norm(x);
    if n <= bound || n == 0.0 {
        return x.to_vec();
    }
    let scale = bound / n;
    x.iter().map(|v| v * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn td(v: &[f64]) -> TdVector {
        TdVector(v.to_vec())
    }

    /// Materialises `flatten(m^{(x) A})` explicitly, independent of the
    /// contraction routine.
    fn explicit_lift_tensor(theta: &[f64], actions: usize) -> Vec<f64> {
        let m = lift(theta);
        let n = m.len();
        let total = n.pow(actions as u32);
        (0..total)
            .map(|mut idx| {
                let mut p = 1.0;
                for _ in 0..actions {
                    p *= m[idx % n];
                    idx /= n;
                }
                p
            })
            .collect()
    }

    #[test]
    fn concat_examples() {
        assert_eq!(concat_scalar(1.0, &[0.0, 0.0]), vec![1.0, 0.0, 0.0]);
        assert_eq!(concat_scalar(0.0, &[3.0, -2.0]), vec![0.0, 3.0, -2.0]);
        assert_eq!(concat_scalar(0.5, &[0.25, -0.25]), vec![0.5, 0.25, -0.25]);
    }

    #[test]
    fn flatten_examples() {
        let t = tensor_flatten(&[td(&[1.0, 2.0]), td(&[3.0, 4.0])]).unwrap();
        assert_eq!(t.entries(), &[3.0, 4.0, 6.0, 8.0]);

        let z = tensor_flatten(&[td(&[1.0, 2.0, 3.0]), td(&[0.0, 0.0, 0.0])]).unwrap();
        assert!(z.entries().iter().all(|&x| x == 0.0));

        let single = tensor_flatten(&[td(&[0.3, -1.5, 2.0])]).unwrap();
        assert_eq!(single.entries(), &[0.3, -1.5, 2.0]);
    }

    #[test]
    fn flatten_rejects_mismatch() {
        assert_eq!(
            tensor_flatten(&[td(&[1.0, 2.0]), td(&[1.0])]),
            Err(TensorError::LengthMismatch { expected: 2, got: 1 })
        );
        assert_eq!(tensor_flatten(&[]), Err(TensorError::NoFactors));
        assert!(matches!(flat_len(99, 4), Err(TensorError::TooLarge(_))));
    }

    #[test]
    fn inner_examples() {
        let t = tensor_flatten(&[td(&[1.0, 2.0]), td(&[3.0, 4.0])]).unwrap();
        assert_eq!(tensor_inner(&t, &[1.0]).unwrap(), 21.0);
        // theta = 0 keeps only the reward coordinates.
        let t = tensor_flatten(&[td(&[0.5, 9.0, -3.0]), td(&[-2.0, 7.0, 1.0])]).unwrap();
        assert_eq!(tensor_inner(&t, &[0.0, 0.0]).unwrap(), -1.0);
        assert!(tensor_inner(&t, &[0.0]).is_err());
    }

    #[test]
    fn clip_examples() {
        assert_eq!(clip_to_ball(&[0.6, 0.8], 9.0), vec![0.6, 0.8]);
        assert_eq!(clip_to_ball(&[5.0, 0.0], 3.0), vec![3.0, 0.0]);
        assert_eq!(clip_to_ball(&[0.0, 0.0], 3.0), vec![0.0, 0.0]);
    }

    #[test]
    fn byte_encoding_roundtrip() {
        let t = tensor_flatten(&[td(&[0.1, -0.2, 0.3]), td(&[1.0, 2.0, -3.0])]).unwrap();
        let bytes = t.to_le_bytes();
        let (back, used) = TensoredConstraint::from_le_bytes(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back, t);
        assert!(TensoredConstraint::from_le_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    fn factors_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
        (1usize..=4, 1usize..=4).prop_flat_map(|(d, a)| {
            (
                prop::collection::vec(prop::collection::vec(-1.0f64..1.0, d + 1), a),
                prop::collection::vec(-2.0f64..2.0, d),
            )
        })
    }

    proptest! {
        #[test]
        fn dense_and_factored_routes_agree((fs, theta) in factors_strategy()) {
            let vs: Vec<TdVector> = fs.iter().map(|f| td(f)).collect();
            let t = tensor_flatten(&vs).unwrap();
            let direct = dot(t.entries(), &explicit_lift_tensor(&theta, vs.len()));
            let contracted = tensor_inner(&t, &theta).unwrap();
            let factored: f64 = vs.iter().map(|v| v.consistency(&theta)).product();
            let scale = 1.0f64.max(factored.abs());
            prop_assert!((direct - factored).abs() <= 1e-10 * scale);
            prop_assert!((contracted - factored).abs() <= 1e-10 * scale);
        }

        #[test]
        fn norm_is_multiplicative((fs, _theta) in factors_strategy()) {
            let vs: Vec<TdVector> = fs.iter().map(|f| td(f)).collect();
            let t = tensor_flatten(&vs).unwrap();
            let prod: f64 = vs.iter().map(|v| norm(&v.0)).product();
            prop_assert!((t.norm() - prod).abs() <= 1e-12 * prod.max(1e-300));
        }

        #[test]
        fn flatten_is_bilinear_in_first_factor(
            (fs, _theta) in factors_strategy(),
            alpha in -3.0f64..3.0,
            seed in 0u64..1000,
        ) {
            let mut other = fs[0].clone();
            for (i, x) in other.iter_mut().enumerate() {
                *x = ((seed as f64) * 0.37 + i as f64).sin();
            }
            let mut combined = fs.clone();
            combined[0] = fs[0].iter().zip(&other).map(|(a, b)| alpha * a + b).collect();
            let mut with_other = fs.clone();
            with_other[0] = other;
            let to = |f: &Vec<Vec<f64>>| tensor_flatten(&f.iter().map(|v| td(v)).collect::<Vec<_>>()).unwrap();
            let lhs = to(&combined);
            let a = to(&fs);
            let b = to(&with_other);
            for ((l, x), y) in lhs.entries().iter().zip(a.entries()).zip(b.entries()) {
                prop_assert!((l - (alpha * x + y)).abs() <= 1e-12);
            }
        }

        #[test]
        fn clip_is_idempotent_and_bounded(x in prop::collection::vec(-10.0f64..10.0, 1..6), bound in 0.1f64..5.0) {
            let c = clip_to_ball(&x, bound);
            prop_assert!(norm(&c) <= bound * (1.0 + 1e-12));
            let cc = clip_to_ball(&c, bound);
            for (a, b) in c.iter().zip(&cc) {
                prop_assert!((a - b).abs() <= 1e-12 * bound);
            }
        }
    }
}
