//! Optimistic search over `Sol(X)`.
//!
//! Three stages, all deterministic for a fixed seed:
//!
//! 1. Branch and bound over hyperplane selections. A factored constraint
//!    `prod_a <Delta_a, lift(theta)>` vanishes on the union of the `A`
//!    hyperplanes `<Delta_a, lift(theta)> = 0`. A node fixes one hyperplane for
//!    some constraints; its relaxation (ball intersected with the selected
//!    affine slice) has a closed-form maximiser, which is both the node's
//!    bound and its candidate. Children branch on the first constraint the
//!    candidate violates. This reaches members even when the slack is far
//!    below anything sampling can hit.
//! 2. Rejection sampling of uniform points in the ball, in parallel with
//!    per-sample seeds. It also covers constraints stored without factors.
//! 3. Pattern-search polish of the winner along the objective and the
//!    coordinate axes, with radial re-projection and feasibility re-checks.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{HypothesisError, HypothesisSet};
use crate::par;
use crate::seeds::{self, Purpose};
use crate::tensor::{self, dot, norm};

const SVD_REL_TOL: f64 = 1e-10;
const RESIDUAL_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerBudget {
    /// Rejection-sampling candidates.
    pub samples: usize,
    /// Branch-and-bound node expansions.
    pub nodes: usize,
    /// Extra requirement on factored constraints: some factor must be within
    /// this of zero. `INFINITY` leaves plain membership.
    pub factor_tol: f64,
    /// Polish sweeps.
    pub polish: usize,
    pub seed: u64,
}

impl Default for OptimizerBudget {
    fn default() -> Self {
        Self { samples: 4096, nodes: 20_000, factor_tol: f64::INFINITY, polish: 200, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub theta: Vec<f64>,
    pub objective: f64,
    /// 0 when branch and bound finished; otherwise the objective spread of
    /// the surviving samples (infinite when none survived).
    pub opt_gap: f64,
    pub nodes: usize,
    pub survivors: usize,
    pub certified: bool,
}

struct Problem<'a> {
    set: &'a HypothesisSet,
    dir: &'a [f64],
    factor_tol: f64,
}

impl Problem<'_> {
    fn feasible(&self, theta: &[f64]) -> bool {
        self.set.membership(theta)
            && self
                .set
                .constraints()
                .all(|c| c.min_factor(theta).is_none_or(|m| m <= self.factor_tol))
    }

    /// Index of the first constraint the point violates.
    fn first_violation(&self, theta: &[f64]) -> Option<usize> {
        self.set.constraints().position(|c| {
            c.value(theta).abs() > self.set.threshold() || c.min_factor(theta).is_some_and(|m| m > self.factor_tol)
        })
    }

    /// Maximiser of `<dir, theta>` over the ball cut by the selected
    /// hyperplanes, or `None` when that slice misses the ball.
    fn slice_max(&self, selection: &[(usize, usize)]) -> Option<Vec<f64>> {
        let d = self.set.d();
        let b = self.set.radius();
        if selection.is_empty() {
            let n = norm(self.dir);
            return Some(if n == 0.0 { vec![0.0; d] } else { self.dir.iter().map(|x| b * x / n).collect() });
        }
        let constraints: Vec<_> = self.set.constraints().collect();
        let k = selection.len();
        let mut f = DMatrix::zeros(k, d);
        let mut g = DVector::zeros(k);
        for (row, &(ci, a)) in selection.iter().enumerate() {
            let td = &constraints[ci].factors().expect("branching only on factored constraints")[a];
            for j in 0..d {
                f[(row, j)] = td.0[j + 1];
            }
            g[row] = -td.0[0];
        }
        let svd = f.clone().svd(true, true);
        let u = svd.u.as_ref().unwrap();
        let v_t = svd.v_t.as_ref().unwrap();
        let top = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let mut theta0 = DVector::zeros(d);
        let mut p = DVector::from_column_slice(self.dir);
        for (i, &s) in svd.singular_values.iter().enumerate() {
            if top == 0.0 || s <= SVD_REL_TOL * top {
                continue;
            }
            let vi = v_t.row(i).transpose();
            theta0 += &vi * (u.column(i).dot(&g) / s);
            let along = vi.dot(&p);
            p -= &vi * along;
        }
        let residual = (&f * &theta0 - &g).norm();
        if residual > RESIDUAL_TOL * (1.0 + g.norm()) {
            return None;
        }
        let n0 = theta0.norm();
        if n0 > b * (1.0 + super::NORM_SLACK) {
            return None;
        }
        let pn = p.norm();
        if pn > 1e-14 * (1.0 + norm(self.dir)) {
            let rad = (b * b - n0 * n0).max(0.0).sqrt();
            theta0 += p * (rad / pn);
        }
        Some(theta0.iter().cloned().collect())
    }
}

struct Node {
    bound: f64,
    order: usize,
    selection: Vec<(usize, usize)>,
    theta: Vec<f64>,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Node {
    // max-heap: larger bound first, then earlier creation
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then_with(|| other.order.cmp(&self.order))
    }
}

struct BnbOutcome {
    best: Option<(Vec<f64>, f64)>,
    nodes: usize,
    complete: bool,
}

fn branch_and_bound(pb: &Problem<'_>, budget: usize) -> BnbOutcome {
    let mut heap = BinaryHeap::new();
    let mut order = 0;
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |selection: Vec<(usize, usize)>, heap: &mut BinaryHeap<Node>, best: &mut Option<(Vec<f64>, f64)>| {
        if let Some(theta) = pb.slice_max(&selection) {
            let bound = dot(pb.dir, &theta);
            if best.as_ref().is_some_and(|(_, v)| bound <= *v) {
                return;
            }
            if pb.feasible(&theta) {
                *best = Some((theta, bound));
            } else {
                heap.push(Node { bound, order, selection, theta });
                order += 1;
            }
        }
    };
    consider(Vec::new(), &mut heap, &mut best);
    let mut nodes = 0;
    while let Some(node) = heap.pop() {
        if best.as_ref().is_some_and(|(_, v)| node.bound <= *v) {
            return BnbOutcome { best, nodes, complete: true };
        }
        if nodes >= budget {
            heap.push(node);
            return BnbOutcome { best, nodes, complete: false };
        }
        nodes += 1;
        let Some(ci) = pb.first_violation(&node.theta) else { continue };
        let Some(factors) = pb.set.constraints().nth(ci).and_then(|c| c.factors()) else { continue };
        for a in 0..factors.len() {
            let mut sel = node.selection.clone();
            sel.push((ci, a));
            consider(sel, &mut heap, &mut best);
        }
    }
    BnbOutcome { best, nodes, complete: true }
}

fn uniform_in_ball(seed: u64, d: usize, b: f64) -> Vec<f64> {
    let mut rng = seeds::rng(seed);
    let mut x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let n = norm(&x);
    let r = b * rng.random::<f64>().powf(1.0 / d as f64);
    if n > 0.0 {
        x.iter_mut().for_each(|v| *v *= r / n);
    }
    x
}

fn polish(pb: &Problem<'_>, mut x: Vec<f64>, sweeps: usize) -> Vec<f64> {
    let d = x.len();
    let b = pb.set.radius();
    let mut f = dot(pb.dir, &x);
    let dn = norm(pb.dir);
    let mut moves: Vec<Vec<f64>> = Vec::with_capacity(2 * d + 2);
    if dn > 0.0 {
        let u: Vec<f64> = pb.dir.iter().map(|v| v / dn).collect();
        moves.push(u.clone());
        moves.push(u.iter().map(|v| -v).collect());
    }
    for j in 0..d {
        for s in [1.0, -1.0] {
            let mut e = vec![0.0; d];
            e[j] = s;
            moves.push(e);
        }
    }
    let mut step = 0.25 * b;
    for _ in 0..sweeps {
        if step < 1e-12 * b {
            break;
        }
        let mut improved = false;
        for m in &moves {
            let y: Vec<f64> = x.iter().zip(m).map(|(a, c)| a + step * c).collect();
            let y = tensor::clip_to_ball(&y, b);
            let fy = dot(pb.dir, &y);
            if fy > f && pb.feasible(&y) {
                x = y;
                f = fy;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    x
}

/// Approximate `argmax <direction, theta>` over the members of `set`.
pub fn optimistic_select(
    set: &HypothesisSet,
    direction: &[f64],
    budget: &OptimizerBudget,
) -> Result<Selection, HypothesisError> {
    if direction.len() != set.d() {
        return Err(HypothesisError::DimensionMismatch { expected: set.d(), got: direction.len() });
    }
    let pb = Problem { set, dir: direction, factor_tol: budget.factor_tol };
    let zero = vec![0.0; set.d()];
    if norm(direction) == 0.0 && pb.feasible(&zero) {
        return Ok(Selection { theta: zero, objective: 0.0, opt_gap: 0.0, nodes: 0, survivors: 0, certified: true });
    }

    let bnb = branch_and_bound(&pb, budget.nodes);

    let (d, b) = (set.d(), set.radius());
    let scored = par::map_indexed(budget.samples, |i| {
        let x = uniform_in_ball(seeds::derive(budget.seed, Purpose::Optimizer, &[i as u64]), d, b);
        pb.feasible(&x).then(|| (dot(direction, &x), x))
    });
    let mut survivors = 0;
    let mut sample_best: Option<(f64, Vec<f64>)> = None;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (v, x) in scored.into_iter().flatten() {
        survivors += 1;
        lo = lo.min(v);
        hi = hi.max(v);
        if sample_best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            sample_best = Some((v, x));
        }
    }

    let start = match (bnb.best, sample_best) {
        (Some((t, v)), Some((sv, sx))) => {
            if sv > v {
                sx
            } else {
                t
            }
        }
        (Some((t, _)), None) => t,
        (None, Some((_, sx))) => sx,
        (None, None) => {
            return Err(HypothesisError::InfeasibleWithinBudget { nodes: bnb.nodes, samples: budget.samples });
        }
    };
    let theta = polish(&pb, start, budget.polish);
    let objective = dot(direction, &theta);
    let opt_gap = if bnb.complete {
        0.0
    } else if survivors > 0 {
        hi - lo
    } else {
        f64::INFINITY
    };
    Ok(Selection { theta, objective, opt_gap, nodes: bnb.nodes, survivors, certified: bnb.complete })
}
