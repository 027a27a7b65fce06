//! Star-graph geometry: junction points, spider states and discrete paths,
//! plus the test-function class used by the martingale problem.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{precondition, Result};
use crate::scalar::Scalar;

/// Default tolerance (graph units) under which a radial coordinate counts as
/// being at the junction vertex.
pub const DEFAULT_ZERO_TOL: f64 = 1e-12;

/// 1-based branch label in `{1, ..., I}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Branch(pub u16);

impl Branch {
    pub fn new(label: usize) -> Self {
        Branch(label as u16)
    }

    /// Builds a label from a 0-based index.
    pub fn from_index(idx: usize) -> Self {
        Branch(idx as u16 + 1)
    }

    /// 0-based position, for indexing per-branch arrays.
    pub fn index(self) -> usize {
        self.0 as usize - 1
    }

    pub fn label(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// A point `(x, i)` of the star graph. All points with `radial == 0` are the
/// same vertex regardless of their label.
#[derive(Debug, Clone, Copy)]
pub struct JunctionPoint<S> {
    pub branch: Branch,
    pub radial: S,
}

impl<S: Scalar> JunctionPoint<S> {
    pub fn new(branch: Branch, radial: S) -> Result<Self> {
        if branch.0 == 0 {
            return Err(precondition("branch labels are 1-based"));
        }
        if !(radial >= S::zero()) {
            return Err(precondition(format!("radial coordinate must be >= 0, got {radial}")));
        }
        Ok(Self { branch, radial })
    }

    /// The junction vertex carrying an (irrelevant) label.
    pub fn vertex(branch: Branch) -> Self {
        Self {
            branch,
            radial: S::zero(),
        }
    }

    pub fn is_vertex(&self) -> bool {
        self.radial == S::zero()
    }
}

impl<S: Scalar> PartialEq for JunctionPoint<S> {
    fn eq(&self, other: &Self) -> bool {
        if self.is_vertex() && other.is_vertex() {
            return true;
        }
        self.branch == other.branch && self.radial == other.radial
    }
}

/// Geodesic distance on the star graph: `|x - y|` on a common branch,
/// `x + y` through the vertex otherwise.
pub fn distance<S: Scalar>(p: &JunctionPoint<S>, q: &JunctionPoint<S>) -> S {
    if p.branch == q.branch {
        (p.radial - q.radial).abs()
    } else {
        p.radial + q.radial
    }
}

/// Time, position and accumulated local time at the vertex.
#[derive(Debug, Clone, Copy)]
pub struct SpiderState<S> {
    pub t: S,
    pub point: JunctionPoint<S>,
    pub l: S,
}

impl<S: Scalar> PartialEq for SpiderState<S> {
    fn eq(&self, other: &Self) -> bool {
        self.t == other.t && self.point == other.point && self.l == other.l
    }
}

impl<S: Scalar> SpiderState<S> {
    pub fn new(t: S, point: JunctionPoint<S>, l: S) -> Result<Self> {
        if !(t >= S::zero()) {
            return Err(precondition(format!("time must be >= 0, got {t}")));
        }
        if !(l >= S::zero()) {
            return Err(precondition(format!("local time must be >= 0, got {l}")));
        }
        Ok(Self { t, point, l })
    }

    pub fn at(t: f64, branch: usize, radial: f64, l: f64) -> Result<Self> {
        Self::new(
            S::c(t),
            JunctionPoint::new(Branch::new(branch), S::c(radial))?,
            S::c(l),
        )
    }

    pub fn x(&self) -> S {
        self.point.radial
    }

    pub fn branch(&self) -> Branch {
        self.point.branch
    }
}

/// Discrete trajectory stored column-wise. `step_min[k]` is the minimum of the
/// radial part over `[t_k, t_{k+1}]` as known to whoever produced the path
/// (the simulator records bridge-detected vertex visits there).
#[derive(Debug, Clone, PartialEq)]
pub struct SpiderPath<S> {
    pub times: Vec<S>,
    pub x: Vec<S>,
    pub branch: Vec<Branch>,
    pub l: Vec<S>,
    pub step_min: Vec<S>,
}

/// First invariant a path breaks, with the offending grid index.
#[derive(Debug, Clone, PartialEq)]
pub enum PathViolation {
    LengthMismatch,
    TimesNotIncreasing(usize),
    NegativeRadial(usize),
    LocalTimeDecreasing(usize),
    LocalTimeOffZero(usize),
    LabelJumpOffZero(usize),
}

impl<S: Scalar> SpiderPath<S> {
    pub fn single(state: SpiderState<S>) -> Self {
        Self {
            times: vec![state.t],
            x: vec![state.x()],
            branch: vec![state.branch()],
            l: vec![state.l],
            step_min: Vec::new(),
        }
    }

    /// Builds a path from states; step minima default to the endpoint minimum.
    pub fn from_states(states: &[SpiderState<S>]) -> Self {
        let mut path = Self {
            times: Vec::with_capacity(states.len()),
            x: Vec::with_capacity(states.len()),
            branch: Vec::with_capacity(states.len()),
            l: Vec::with_capacity(states.len()),
            step_min: Vec::with_capacity(states.len().saturating_sub(1)),
        };
        for s in states {
            path.times.push(s.t);
            path.x.push(s.x());
            path.branch.push(s.branch());
            path.l.push(s.l);
        }
        for k in 1..states.len() {
            path.step_min.push(path.x[k - 1].min(path.x[k]));
        }
        path
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state(&self, k: usize) -> SpiderState<S> {
        SpiderState {
            t: self.times[k],
            point: JunctionPoint {
                branch: self.branch[k],
                radial: self.x[k],
            },
            l: self.l[k],
        }
    }

    pub fn last(&self) -> SpiderState<S> {
        self.state(self.len() - 1)
    }

    /// Checks grid monotonicity, nonnegativity, monotone local time, and that
    /// local time and labels only move on steps that visit the vertex.
    pub fn check_invariants(&self, zero_tol: S) -> Result<(), PathViolation> {
        let n = self.times.len();
        if self.x.len() != n
            || self.branch.len() != n
            || self.l.len() != n
            || self.step_min.len() != n.saturating_sub(1)
        {
            return Err(PathViolation::LengthMismatch);
        }
        for k in 0..n {
            if !(self.x[k] >= S::zero()) {
                return Err(PathViolation::NegativeRadial(k));
            }
        }
        for k in 1..n {
            if !(self.times[k] > self.times[k - 1]) {
                return Err(PathViolation::TimesNotIncreasing(k));
            }
            if self.l[k] < self.l[k - 1] {
                return Err(PathViolation::LocalTimeDecreasing(k));
            }
            let touches = self.step_min[k - 1] <= zero_tol;
            if self.l[k] > self.l[k - 1] && !touches {
                return Err(PathViolation::LocalTimeOffZero(k));
            }
            if self.branch[k] != self.branch[k - 1] && !touches {
                return Err(PathViolation::LabelJumpOffZero(k));
            }
        }
        Ok(())
    }
}

type BranchFn<S> = Arc<dyn Fn(Branch, S, S) -> S + Send + Sync>;

/// Per-branch `f_i(t, x)` with its first time derivative and first two space
/// derivatives. Must agree across branches at `x = 0`.
#[derive(Clone)]
pub struct TestFunction<S> {
    pub id: String,
    branches: usize,
    value: BranchFn<S>,
    dt: BranchFn<S>,
    dx: BranchFn<S>,
    dxx: BranchFn<S>,
}

impl<S: Scalar> fmt::Debug for TestFunction<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TestFunction")
            .field("id", &self.id)
            .field("branches", &self.branches)
            .finish()
    }
}

impl<S: Scalar> TestFunction<S> {
    pub fn new<F, Ft, Fx, Fxx>(id: impl Into<String>, branches: usize, value: F, dt: Ft, dx: Fx, dxx: Fxx) -> Self
    where
        F: Fn(Branch, S, S) -> S + Send + Sync + 'static,
        Ft: Fn(Branch, S, S) -> S + Send + Sync + 'static,
        Fx: Fn(Branch, S, S) -> S + Send + Sync + 'static,
        Fxx: Fn(Branch, S, S) -> S + Send + Sync + 'static,
    {
        Self {
            id: id.into(),
            branches,
            value: Arc::new(value),
            dt: Arc::new(dt),
            dx: Arc::new(dx),
            dxx: Arc::new(dxx),
        }
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn value(&self, i: Branch, t: S, x: S) -> S {
        (self.value)(i, t, x)
    }
    pub fn dt(&self, i: Branch, t: S, x: S) -> S {
        (self.dt)(i, t, x)
    }
    pub fn dx(&self, i: Branch, t: S, x: S) -> S {
        (self.dx)(i, t, x)
    }
    pub fn dxx(&self, i: Branch, t: S, x: S) -> S {
        (self.dxx)(i, t, x)
    }

    /// `f ≡ c`.
    pub fn constant(branches: usize, c: S) -> Self {
        Self::new(
            format!("const({c})"),
            branches,
            move |_, _, _| c,
            |_, _, _| S::zero(),
            |_, _, _| S::zero(),
            |_, _, _| S::zero(),
        )
    }

    /// `f_i(t, x) = x` on every branch.
    pub fn radial(branches: usize) -> Self {
        Self::new(
            "x",
            branches,
            |_, _, x| x,
            |_, _, _| S::zero(),
            |_, _, _| S::one(),
            |_, _, _| S::zero(),
        )
    }

    /// `f_i(t, x) = x²` on every branch.
    pub fn radial_squared(branches: usize) -> Self {
        Self::new(
            "x^2",
            branches,
            |_, _, x| x * x,
            |_, _, _| S::zero(),
            |_, _, x| S::c(2.0) * x,
            |_, _, _| S::c(2.0),
        )
    }

    /// `f_i(t, x) = (1 + w_i x) exp(-x²/2)`: bounded, smooth, equal to 1 at the
    /// vertex, with branch-dependent slope `w_i` there.
    pub fn branch_weighted_bump(weights: Vec<S>) -> Self {
        let w = Arc::new(weights);
        let branches = w.len();
        let (w0, w1, w2) = (w.clone(), w.clone(), w);
        Self::new(
            "bump",
            branches,
            move |i, _, x| (S::one() + w0[i.index()] * x) * (-x * x / S::c(2.0)).exp(),
            |_, _, _| S::zero(),
            move |i, _, x| {
                let wi = w1[i.index()];
                (wi - x - wi * x * x) * (-x * x / S::c(2.0)).exp()
            },
            move |i, _, x| {
                let wi = w2[i.index()];
                // d/dx of (wi - x - wi x²) e^{-x²/2}
                (-S::one() - S::c(2.0) * wi * x - x * (wi - x - wi * x * x)) * (-x * x / S::c(2.0)).exp()
            },
        )
    }

    /// Linear combination `a f + b g` (derivatives combine linearly).
    pub fn combine(a: S, f: &Self, b: S, g: &Self) -> Self {
        let (f1, f2, f3, f4) = (f.clone(), f.clone(), f.clone(), f.clone());
        let (g1, g2, g3, g4) = (g.clone(), g.clone(), g.clone(), g.clone());
        Self::new(
            format!("{a}*{}+{b}*{}", f.id, g.id),
            f.branches,
            move |i, t, x| a * f1.value(i, t, x) + b * g1.value(i, t, x),
            move |i, t, x| a * f2.dt(i, t, x) + b * g2.dt(i, t, x),
            move |i, t, x| a * f3.dx(i, t, x) + b * g3.dx(i, t, x),
            move |i, t, x| a * f4.dxx(i, t, x) + b * g4.dxx(i, t, x),
        )
    }
}

/// Result of [`check_junction_continuity`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuityCheck<S> {
    pub continuous: bool,
    pub max_gap: S,
}

/// Largest vertex mismatch `|f_i(t,0) - f_j(t,0)|` over the sampled times and
/// all branch pairs; continuous iff it does not exceed `tol`.
pub fn check_junction_continuity<S: Scalar>(
    f: &TestFunction<S>,
    times: &[S],
    tol: S,
) -> Result<ContinuityCheck<S>> {
    if !(tol > S::zero()) {
        return Err(precondition("continuity tolerance must be positive"));
    }
    let mut gap = S::zero();
    for &t in times {
        let vals: Vec<S> = (0..f.branches)
            .map(|i| f.value(Branch::from_index(i), t, S::zero()))
            .collect();
        let hi = vals.iter().copied().fold(S::neg_infinity(), S::max);
        let lo = vals.iter().copied().fold(S::infinity(), S::min);
        gap = gap.max(hi - lo);
    }
    Ok(ContinuityCheck {
        continuous: gap <= tol,
        max_gap: gap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(r: f64, b: usize) -> JunctionPoint<f64> {
        JunctionPoint::new(Branch::new(b), r).unwrap()
    }

    #[test]
    fn distance_examples() {
        assert_eq!(distance(&p(2.0, 1), &p(3.5, 1)), 1.5);
        assert_eq!(distance(&p(2.0, 1), &p(3.0, 2)), 5.0);
        assert_eq!(distance(&p(0.0, 1), &p(0.0, 3)), 0.0);
    }

    #[test]
    fn vertex_equality_is_label_blind() {
        assert_eq!(p(0.0, 1), p(0.0, 4));
        assert_ne!(p(1.0, 1), p(1.0, 2));
        assert!(JunctionPoint::new(Branch::new(1), -0.5).is_err());
    }

    #[test]
    fn continuity_examples() {
        let sq = TestFunction::<f64>::new("x2", 3, |_, _, x| x * x, |_, _, _| 0.0, |_, _, x| 2.0 * x, |_, _, _| 2.0);
        let times: Vec<f64> = (0..11).map(|k| k as f64 * 0.1).collect();
        let r = check_junction_continuity(&sq, &times, 1e-12).unwrap();
        assert!(r.continuous);
        assert_eq!(r.max_gap, 0.0);

        let shifted = TestFunction::<f64>::new(
            "shift",
            2,
            |i, _, x| if i.label() == 1 { x } else { x + 1.0 },
            |_, _, _| 0.0,
            |_, _, _| 1.0,
            |_, _, _| 0.0,
        );
        let r = check_junction_continuity(&shifted, &times, 1e-12).unwrap();
        assert!(!r.continuous);
        assert_eq!(r.max_gap, 1.0);

        let trig = TestFunction::<f64>::new(
            "trig",
            3,
            |i, t, x| t.sin() + x * i.label() as f64,
            |_, t, _| t.cos(),
            |i, _, _| i.label() as f64,
            |_, _, _| 0.0,
        );
        assert!(check_junction_continuity(&trig, &times, 1e-12).unwrap().continuous);
    }

    #[test]
    fn bump_derivatives_match_finite_differences() {
        let f = TestFunction::<f64>::branch_weighted_bump(vec![1.0, -0.5, 2.0]);
        let h = 1e-5;
        for &x in &[0.0, 0.3, 1.1, 2.5] {
            for i in 1..=3 {
                let b = Branch::new(i);
                let fd1 = (f.value(b, 0.0, x + h) - f.value(b, 0.0, (x - h).max(0.0))) / (x + h - (x - h).max(0.0));
                assert!((fd1 - f.dx(b, 0.0, x)).abs() < 1e-4, "dx at {x}");
                let fd2 = (f.dx(b, 0.0, x + h) - f.dx(b, 0.0, (x - h).max(0.0))) / (x + h - (x - h).max(0.0));
                assert!((fd2 - f.dxx(b, 0.0, x)).abs() < 1e-4, "dxx at {x}");
            }
        }
    }

    #[test]
    fn invariant_checker_flags_off_zero_local_time() {
        let s0 = SpiderState::<f64>::at(0.0, 1, 1.0, 0.0).unwrap();
        let s1 = SpiderState::<f64>::at(0.1, 1, 1.0, 0.5).unwrap();
        let path = SpiderPath::from_states(&[s0, s1]);
        assert_eq!(path.check_invariants(1e-12), Err(PathViolation::LocalTimeOffZero(1)));
        let s1 = SpiderState::<f64>::at(0.1, 2, 1.0, 0.0).unwrap();
        let path = SpiderPath::from_states(&[s0, s1]);
        assert_eq!(path.check_invariants(1e-12), Err(PathViolation::LabelJumpOffZero(1)));
    }
}
