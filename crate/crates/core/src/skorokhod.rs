//! One-sided Skorokhod reflection on a discrete grid, and the path
//! functionals built on it (modulus of continuity, occupation below a level,
//! misplaced local-time mass).

use std::collections::VecDeque;

use crate::error::{precondition, Result};
use crate::junction::SpiderPath;
use crate::scalar::Scalar;

/// Signed driving path `y = x - ℓ` on a strictly increasing grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DrivingPath<S> {
    pub times: Vec<S>,
    pub y: Vec<S>,
}

impl<S: Scalar> DrivingPath<S> {
    pub fn new(times: Vec<S>, y: Vec<S>) -> Result<Self> {
        if times.len() != y.len() || times.is_empty() {
            return Err(precondition("times and values must be non-empty and of equal length"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(precondition("time grid must be strictly increasing"));
        }
        Ok(Self { times, y })
    }

    /// Uniform grid `t_k = k·dt`.
    pub fn uniform(dt: S, y: Vec<S>) -> Result<Self> {
        let times = (0..y.len()).map(|k| S::from_usize_lossy(k) * dt).collect();
        Self::new(times, y)
    }
}

/// Output of [`reflect`]: `x = y + ℓ ≥ 0` with minimal nondecreasing `ℓ`.
#[derive(Debug, Clone, PartialEq)]
pub struct Reflected<S> {
    pub x: Vec<S>,
    pub ell: Vec<S>,
}

/// Incremental form of the reflection map; feeding `y_0, y_1, ...` reproduces
/// [`reflect`] bit for bit.
#[derive(Debug, Clone, Copy)]
pub struct Reflector<S> {
    ell: S,
}

impl<S: Scalar> Default for Reflector<S> {
    fn default() -> Self {
        Self { ell: S::zero() }
    }
}

impl<S: Scalar> Reflector<S> {
    pub fn with_local_time(ell: S) -> Self {
        Self { ell }
    }

    /// Pushes the next driving value and returns `(x, ℓ)`.
    #[inline]
    pub fn push(&mut self, y: S) -> (S, S) {
        let neg = -y;
        if neg > self.ell {
            self.ell = neg;
        }
        (y + self.ell, self.ell)
    }

    /// Pushes a value whose step also reached `step_min` between grid nodes.
    #[inline]
    pub fn push_with_min(&mut self, y: S, step_min: S) -> (S, S) {
        let neg = -step_min;
        if neg > self.ell {
            self.ell = neg;
        }
        self.push(y)
    }

    pub fn local_time(&self) -> S {
        self.ell
    }
}

/// `ℓ_k = max(0, max_{j ≤ k} -y_j)`, `x_k = y_k + ℓ_k`.
pub fn reflect<S: Scalar>(path: &DrivingPath<S>) -> Result<Reflected<S>> {
    if path.y[0] < S::zero() {
        return Err(precondition(format!("driving path must start at y_0 >= 0, got {}", path.y[0])));
    }
    let mut r = Reflector::default();
    let (x, ell) = path.y.iter().map(|&y| r.push(y)).unzip();
    Ok(Reflected { x, ell })
}

/// Sup of `|f(u) - f(s)|` over grid pairs with `|u - s| ≤ θ`.
///
/// Sliding-window max/min with monotone deques, `O(K)`.
pub fn modulus<S: Scalar>(times: &[S], values: &[S], theta: S) -> Result<S> {
    if times.len() != values.len() {
        return Err(precondition("times and values must have equal length"));
    }
    if !(theta > S::zero()) {
        return Err(precondition("theta must be positive"));
    }
    let n = times.len();
    let mut best = S::zero();
    let mut maxq: VecDeque<usize> = VecDeque::new();
    let mut minq: VecDeque<usize> = VecDeque::new();
    let mut lo = 0usize;
    for hi in 0..n {
        while maxq.back().is_some_and(|&j| values[j] <= values[hi]) {
            maxq.pop_back();
        }
        maxq.push_back(hi);
        while minq.back().is_some_and(|&j| values[j] >= values[hi]) {
            minq.pop_back();
        }
        minq.push_back(hi);
        while times[hi] - times[lo] > theta {
            lo += 1;
        }
        while maxq.front().is_some_and(|&j| j < lo) {
            maxq.pop_front();
        }
        while minq.front().is_some_and(|&j| j < lo) {
            minq.pop_front();
        }
        let spread = values[maxq[0]] - values[minq[0]];
        if spread > best {
            best = spread;
        }
    }
    Ok(best)
}

/// Left-endpoint Riemann sum of `1{x(u) < ε} du`.
pub fn occupation_below<S: Scalar>(times: &[S], x: &[S], eps: S) -> Result<S> {
    if !(eps > S::zero()) {
        return Err(precondition("eps must be positive"));
    }
    if times.len() != x.len() {
        return Err(precondition("times and values must have equal length"));
    }
    let mut acc = S::zero();
    for k in 1..times.len() {
        if x[k - 1] < eps {
            acc = acc + (times[k] - times[k - 1]);
        }
    }
    Ok(acc)
}

/// Total local-time increase on steps whose radial minimum exceeds `delta`.
pub fn flat_off_zero_defect<S: Scalar>(path: &SpiderPath<S>, delta: S) -> Result<S> {
    if !(delta > S::zero()) {
        return Err(precondition("delta must be positive"));
    }
    let mut acc = S::zero();
    for k in 1..path.len() {
        if path.step_min[k - 1] > delta {
            acc = acc + (path.l[k] - path.l[k - 1]);
        }
    }
    Ok(acc)
}
