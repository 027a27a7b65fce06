//! Backward parabolic system on the star graph with the local-time
//! Kirchhoff condition `∂_l u + Σ α_i ∂_x u_i = 0` at the vertex.
//!
//! Each time step is fully implicit. Per `(branch, l)` slice the branch
//! equation is linear in the unknown vertex trace, so the slice solution is
//! split as `u = v + u0·w` (`v`: zero trace, `w`: unit trace, no source).
//! The trace then follows from an upwind sweep of the Kirchhoff relation
//! from `L_max` down to `l = 0`.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{precondition, Result, SpiderError};
use crate::junction::{Branch, SpiderState};
use crate::quadrature::{integrate, QuadOptions};
use crate::scalar::Scalar;
use crate::simulator::{terminal_states, SchemeConfig, SimulatedSource};
use crate::stats::Estimate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeGrid {
    pub x_max: f64,
    pub l_max: f64,
    pub horizon: f64,
    pub mx: usize,
    pub ml: usize,
    pub mt: usize,
}

impl PdeGrid {
    pub fn validate(&self) -> Result<()> {
        if !(self.x_max > 0.0 && self.l_max > 0.0 && self.horizon > 0.0) {
            return Err(precondition("x_max, l_max and horizon must be positive"));
        }
        if self.mx < 2 || self.ml < 2 || self.mt < 2 {
            return Err(precondition("need at least 3 nodes per axis"));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.x_max / self.mx as f64
    }

    pub fn dl(&self) -> f64 {
        self.l_max / self.ml as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.mt as f64
    }

    pub fn x(&self, k: usize) -> f64 {
        if k == self.mx {
            self.x_max
        } else {
            k as f64 * self.dx()
        }
    }

    pub fn l(&self, m: usize) -> f64 {
        if m == self.ml {
            self.l_max
        } else {
            m as f64 * self.dl()
        }
    }

    pub fn t(&self, n: usize) -> f64 {
        if n == self.mt {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }
}

type Field<S> = Arc<dyn Fn(Branch, S, S) -> S + Send + Sync>;

/// Terminal data `g_i(x, l)` with its first derivatives.
#[derive(Clone)]
pub struct TerminalData<S> {
    pub label: String,
    branches: usize,
    value: Field<S>,
    dx: Field<S>,
    dl: Field<S>,
}

impl<S: Scalar> TerminalData<S> {
    pub fn new<G, Gx, Gl>(label: impl Into<String>, branches: usize, value: G, dx: Gx, dl: Gl) -> Self
    where
        G: Fn(Branch, S, S) -> S + Send + Sync + 'static,
        Gx: Fn(Branch, S, S) -> S + Send + Sync + 'static,
        Gl: Fn(Branch, S, S) -> S + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            branches,
            value: Arc::new(value),
            dx: Arc::new(dx),
            dl: Arc::new(dl),
        }
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    pub fn value(&self, i: Branch, x: S, l: S) -> S {
        (self.value)(i, x, l)
    }

    pub fn dx(&self, i: Branch, x: S, l: S) -> S {
        (self.dx)(i, x, l)
    }

    pub fn dl(&self, i: Branch, x: S, l: S) -> S {
        (self.dl)(i, x, l)
    }

    /// Largest gap `|g_i(0,l) - g_j(0,l)|` over the given l-values.
    pub fn junction_gap(&self, ls: &[S]) -> S {
        let mut gap = S::zero();
        for &l in ls {
            let first = self.value(Branch::new(1), S::zero(), l);
            for i in 2..=self.branches {
                gap = gap.max((self.value(Branch::new(i), S::zero(), l) - first).abs());
            }
        }
        gap
    }
}

/// Terminal-data families selectable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalPreset {
    /// `g ≡ value`.
    Constant { value: f64 },
    /// `g_i(x, l) = x - l`.
    XMinusL,
    /// `g_i(x, l) = x`; incompatible with the Kirchhoff condition.
    Radial,
    /// `g_i(x, l) = e^{-x²}` on every branch.
    Gaussian,
    /// `g_i(x, l) = A(l) + κ_i e^{-l} x e^{-x}` with
    /// `A(l) = -∫₀^l e^{-m} Σ_i α_i(T, m) κ_i dm`, compatible by construction.
    CompatibleBump { kappa: Vec<f64> },
}

impl TerminalPreset {
    pub fn build<S: Scalar>(&self, cs: &CoefficientSet<S>, horizon: f64) -> Result<TerminalData<S>> {
        let n = cs.branches();
        Ok(match self.clone() {
            TerminalPreset::Constant { value } => {
                let c = S::c(value);
                TerminalData::new("constant", n, move |_, _, _| c, |_, _, _| S::zero(), |_, _, _| S::zero())
            }
            TerminalPreset::XMinusL => {
                TerminalData::new("x-minus-l", n, |_, x, l| x - l, |_, _, _| S::one(), |_, _, _| -S::one())
            }
            TerminalPreset::Radial => {
                TerminalData::new("radial", n, |_, x, _| x, |_, _, _| S::one(), |_, _, _| S::zero())
            }
            TerminalPreset::Gaussian => TerminalData::new(
                "gaussian",
                n,
                |_, x: S, _| (-x * x).exp(),
                |_, x: S, _| S::c(-2.0) * x * (-x * x).exp(),
                |_, _, _| S::zero(),
            ),
            TerminalPreset::CompatibleBump { kappa } => {
                if kappa.len() != n {
                    return Err(SpiderError::Config(format!("kappa needs {n} entries, got {}", kappa.len())));
                }
                let kappa: Arc<Vec<S>> = Arc::new(kappa.iter().map(|&k| S::c(k)).collect());
                let cs = cs.clone();
                let t = S::c(horizon);
                let k1 = kappa.clone();
                // dA/dl
                let slope = Arc::new(move |l: S| {
                    let a = cs.alpha(t, l);
                    -(-l).exp() * a.iter().zip(k1.iter()).fold(S::zero(), |acc, (a, k)| acc + *a * *k)
                });
                let s1 = slope.clone();
                let opts = QuadOptions {
                    abs_tol: 1e-13,
                    rel_tol: 1e-12,
                    max_intervals: 500,
                };
                let big_a = move |l: S| -> S {
                    integrate(|m| s1(m), S::zero(), l, &opts)
                        .map(|r| r.value)
                        .unwrap_or_else(|_| S::nan())
                };
                let (k2, k3, k4) = (kappa.clone(), kappa.clone(), kappa);
                TerminalData::new(
                    "compatible-bump",
                    n,
                    move |i, x: S, l: S| big_a(l) + k2[i.index()] * (-l).exp() * x * (-x).exp(),
                    move |i, x: S, l: S| k3[i.index()] * (-l).exp() * (S::one() - x) * (-x).exp(),
                    move |i, x: S, l: S| slope(l) - k4[i.index()] * (-l).exp() * x * (-x).exp(),
                )
            }
        })
    }
}

/// `max_l |∂_l g(0,l) + Σ_i α_i(T,l) ∂_x g_i(0,l)|` over the l-nodes.
pub fn check_compatibility<S: Scalar>(g: &TerminalData<S>, cs: &CoefficientSet<S>, grid: &PdeGrid) -> S {
    let t = S::c(grid.horizon);
    let mut worst = S::zero();
    for m in 0..=grid.ml {
        let l = S::c(grid.l(m));
        let alpha = cs.alpha(t, l);
        let mut r = g.dl(Branch::new(1), S::zero(), l);
        for (k, a) in alpha.iter().enumerate() {
            r = r + *a * g.dx(Branch::from_index(k), S::zero(), l);
        }
        worst = worst.max(r.abs());
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Compatibility residual above which a warning is issued.
    pub compatibility_tol: f64,
    /// Cell Péclet number `|b|Δx/σ²` above which a warning is issued.
    pub peclet_bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            compatibility_tol: 1e-6,
            peclet_bound: 2.0,
        }
    }
}

/// Grid solution with a single stored vertex trace.
#[derive(Debug, Clone)]
pub struct PdeSolution<S> {
    pub grid: PdeGrid,
    pub branches: usize,
    values: Vec<S>,
    trace: Vec<S>,
    pub compatibility_residual: S,
    pub warnings: Vec<String>,
}

impl<S: Scalar> PdeSolution<S> {
    fn index(&self, n: usize, i: usize, k: usize, m: usize) -> usize {
        ((n * self.branches + i) * (self.grid.ml + 1) + m) * (self.grid.mx + 1) + k
    }

    /// `u_i(t_n, x_k, l_m)`; `k = 0` reads the vertex trace.
    pub fn u(&self, n: usize, branch: Branch, k: usize, m: usize) -> S {
        if k == 0 {
            return self.trace(n, m);
        }
        self.values[self.index(n, branch.index(), k, m)]
    }

    pub fn trace(&self, n: usize, m: usize) -> S {
        self.trace[n * (self.grid.ml + 1) + m]
    }

    /// Bilinear interpolation in `(x, l)` at time node `n`.
    pub fn interpolate(&self, n: usize, branch: Branch, x: S, l: S) -> Result<S> {
        let g = &self.grid;
        let (xf, lf) = (x.to_f64_lossy(), l.to_f64_lossy());
        if n > g.mt || branch.0 == 0 || branch.label() > self.branches {
            return Err(precondition("time node or branch outside the grid"));
        }
        if !(0.0..=g.x_max).contains(&xf) || !(0.0..=g.l_max).contains(&lf) {
            return Err(precondition(format!("point (x={xf}, l={lf}) outside the grid")));
        }
        let fx = xf / g.dx();
        let fl = lf / g.dl();
        let k = (fx.floor() as usize).min(g.mx - 1);
        let m = (fl.floor() as usize).min(g.ml - 1);
        let (wx, wl) = (S::c(fx - k as f64), S::c(fl - m as f64));
        let one = S::one();
        let u00 = self.u(n, branch, k, m);
        let u10 = self.u(n, branch, k + 1, m);
        let u01 = self.u(n, branch, k, m + 1);
        let u11 = self.u(n, branch, k + 1, m + 1);
        Ok((one - wx) * (one - wl) * u00 + wx * (one - wl) * u10 + (one - wx) * wl * u01 + wx * wl * u11)
    }

    /// Rows `(t, x, branch, l, u)` at time node `n`.
    pub fn slice(&self, n: usize) -> Vec<(f64, f64, usize, f64, f64)> {
        let g = &self.grid;
        let mut rows = Vec::with_capacity(self.branches * (g.ml + 1) * (g.mx + 1));
        for i in 0..self.branches {
            for m in 0..=g.ml {
                for k in 0..=g.mx {
                    rows.push((
                        g.t(n),
                        g.x(k),
                        i + 1,
                        g.l(m),
                        self.u(n, Branch::from_index(i), k, m).to_f64_lossy(),
                    ));
                }
            }
        }
        rows
    }

    /// Extreme values over all nodes.
    pub fn min_max(&self) -> (S, S) {
        let mut lo = S::infinity();
        let mut hi = S::neg_infinity();
        for n in 0..=self.grid.mt {
            for m in 0..=self.grid.ml {
                lo = lo.min(self.trace(n, m));
                hi = hi.max(self.trace(n, m));
            }
            for i in 0..self.branches {
                for m in 0..=self.grid.ml {
                    for k in 1..=self.grid.mx {
                        let v = self.values[self.index(n, i, k, m)];
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
            }
        }
        (lo, hi)
    }
}

/// Solves `L u = rhs` for a tridiagonal system (Thomas algorithm) for two
/// right-hand sides at once. Returns `None` on a vanishing pivot.
fn thomas2<S: Scalar>(lower: &[S], diag: &[S], upper: &[S], r1: &mut [S], r2: &mut [S], scratch: &mut [S]) -> Option<()> {
    let n = diag.len();
    let tiny = S::c(1e-300).max(S::min_positive_value());
    let mut beta = diag[0];
    if beta.abs() <= tiny {
        return None;
    }
    r1[0] = r1[0] / beta;
    r2[0] = r2[0] / beta;
    for k in 1..n {
        scratch[k] = upper[k - 1] / beta;
        beta = diag[k] - lower[k] * scratch[k];
        if beta.abs() <= tiny || !beta.is_finite() {
            return None;
        }
        r1[k] = (r1[k] - lower[k] * r1[k - 1]) / beta;
        r2[k] = (r2[k] - lower[k] * r2[k - 1]) / beta;
    }
    for k in (0..n - 1).rev() {
        r1[k] = r1[k] - scratch[k + 1] * r1[k + 1];
        r2[k] = r2[k] - scratch[k + 1] * r2[k + 1];
    }
    Some(())
}

struct SliceOut<S> {
    v: Vec<S>,
    w: Vec<S>,
    /// Derivative at 0+ of the old layer plus `v`.
    d: S,
    peclet: f64,
}

pub fn solve_backward<S: Scalar>(
    cs: &CoefficientSet<S>,
    g: &TerminalData<S>,
    grid: &PdeGrid,
    opts: &SolverOptions,
) -> Result<PdeSolution<S>> {
    grid.validate()?;
    if g.branches() != cs.branches() {
        return Err(precondition("terminal data and coefficients disagree on the branch count"));
    }
    let ls: Vec<S> = (0..=grid.ml).map(|m| S::c(grid.l(m))).collect();
    let gap = g.junction_gap(&ls);
    if gap > S::c(1e-12) {
        return Err(precondition(format!("terminal data is discontinuous at the vertex (gap {gap})")));
    }
    let branches = cs.branches();
    let (mx, ml, mt) = (grid.mx, grid.ml, grid.mt);
    let mut sol = PdeSolution {
        grid: *grid,
        branches,
        values: vec![S::zero(); (mt + 1) * branches * (ml + 1) * (mx + 1)],
        trace: vec![S::zero(); (mt + 1) * (ml + 1)],
        compatibility_residual: check_compatibility(g, cs, grid),
        warnings: Vec::new(),
    };
    if sol.compatibility_residual > S::c(opts.compatibility_tol) {
        let msg = format!(
            "terminal data violates the compatibility condition (max residual {})",
            sol.compatibility_residual
        );
        log::warn!("{msg}");
        sol.warnings.push(msg);
    }

    // Terminal layer.
    for i in 0..branches {
        for m in 0..=ml {
            for k in 0..=mx {
                let idx = sol.index(mt, i, k, m);
                sol.values[idx] = g.value(Branch::from_index(i), S::c(grid.x(k)), ls[m]);
            }
        }
    }
    for m in 0..=ml {
        sol.trace[mt * (ml + 1) + m] = g.value(Branch::new(1), S::zero(), ls[m]);
    }
    for n in 0..mt {
        for i in 0..branches {
            for m in 0..=ml {
                let idx = sol.index(n, i, 0, m);
                sol.values[idx] = S::nan();
            }
        }
    }

    let dx = S::c(grid.dx());
    let dl = S::c(grid.dl());
    let dt = S::c(grid.dt());
    let two = S::c(2.0);
    let half = S::c(0.5);
    // Neumann data at the outer boundary and the far-l closure, both read
    // off the terminal data (zero for data that is flat there).
    let psi: Vec<Vec<S>> = (0..branches)
        .map(|i| ls.iter().map(|&l| g.dx(Branch::from_index(i), S::c(grid.x_max), l)).collect())
        .collect();
    let closure = g.dl(Branch::new(1), S::zero(), S::c(grid.l_max));
    let mut max_peclet = 0.0f64;

    // Each step solves for the increment over the previous layer. The
    // residual is built from differences, so constants stay exact.
    for n in (0..mt).rev() {
        let t = S::c(grid.t(n));
        let slices: Vec<(usize, usize)> = (0..branches).flat_map(|i| (0..=ml).map(move |m| (i, m))).collect();
        let prev: &PdeSolution<S> = &sol;
        let solved: Vec<Result<SliceOut<S>>> = slices
            .par_iter()
            .map(|&(i, m)| {
                let br = Branch::from_index(i);
                let l = ls[m];
                let old = |k: usize| {
                    if k == 0 {
                        prev.trace[(n + 1) * (ml + 1) + m]
                    } else {
                        prev.values[prev.index(n + 1, i, k, m)]
                    }
                };
                let mut lower = vec![S::zero(); mx];
                let mut diag = vec![S::zero(); mx];
                let mut upper = vec![S::zero(); mx];
                let mut rv = vec![S::zero(); mx];
                let mut rw = vec![S::zero(); mx];
                let mut scratch = vec![S::zero(); mx];
                let mut peclet = 0.0f64;
                for k in 1..=mx {
                    let x = S::c(grid.x(k));
                    let sigma = cs.sigma(br, t, x, l);
                    let b = cs.drift(br, t, x, l);
                    if !sigma.is_finite() || !b.is_finite() {
                        return Err(SpiderError::CoefficientEvaluation {
                            what: format!("sigma/b_{br}"),
                            t: grid.t(n),
                            x: grid.x(k),
                            l: grid.l(m),
                        });
                    }
                    let a = half * sigma * sigma / (dx * dx);
                    peclet = peclet.max((b.abs() * dx / (sigma * sigma)).to_f64_lossy());
                    let r = k - 1;
                    let here = old(k);
                    if k < mx {
                        let bp = b.max(S::zero()) / dx;
                        let bm = (-b).max(S::zero()) / dx;
                        lower[r] = -dt * (a + bm);
                        diag[r] = S::one() + dt * (two * a + bp + bm);
                        upper[r] = -dt * (a + bp);
                        rv[r] = dt * ((a + bm) * (old(k - 1) - here) + (a + bp) * (old(k + 1) - here));
                        if k == 1 {
                            // Unit trace increment for w; zero for v.
                            rw[r] = dt * (a + bm);
                        }
                    } else {
                        // Ghost node u_{M+1} = u_{M-1} + 2Δx ψ; drift uses ψ directly.
                        let p = psi[i][m];
                        lower[r] = -dt * two * a;
                        diag[r] = S::one() + dt * two * a;
                        rv[r] = dt * (two * a * (old(k - 1) - here) + two * a * dx * p + b * p);
                        if k == 1 {
                            rw[r] = dt * two * a;
                        }
                    }
                }
                if thomas2(&lower, &diag, &upper, &mut rv, &mut rw, &mut scratch).is_none() {
                    return Err(SpiderError::LinearSolve {
                        branch: i + 1,
                        l_index: m,
                        t_index: n,
                    });
                }
                // One-sided derivative at 0+ of the old layer plus v.
                let (u0, u1, u2) = (old(0), old(1), old(2));
                let d = (S::c(4.0) * (u1 - u0 + rv[0]) - (u2 - u0 + rv[1])) / (two * dx);
                Ok(SliceOut {
                    v: rv,
                    w: rw,
                    d,
                    peclet,
                })
            })
            .collect();
        let mut outs = Vec::with_capacity(solved.len());
        for s in solved {
            let s = s?;
            max_peclet = max_peclet.max(s.peclet);
            outs.push(s);
        }

        // (-3u0 + 4u1 - u2)/(2Δx) of the unit-trace solution.
        let d_w = |o: &SliceOut<S>| (S::c(-3.0) + S::c(4.0) * o.w[0] - o.w[1]) / (two * dx);
        let old_trace: Vec<S> = sol.trace[(n + 1) * (ml + 1)..(n + 2) * (ml + 1)].to_vec();
        let mut delta = vec![S::zero(); ml + 1];
        for m in (0..=ml).rev() {
            let alpha = cs.alpha(t, ls[m]);
            let (mut sv, mut sw) = (S::zero(), S::zero());
            for (i, a) in alpha.iter().enumerate() {
                let o = &outs[i * (ml + 1) + m];
                sv = sv + *a * o.d;
                sw = sw + *a * d_w(o);
            }
            delta[m] = if m == ml {
                (-closure - sv) / sw
            } else {
                (old_trace[m + 1] - old_trace[m] + delta[m + 1] + dl * sv) / (S::one() - dl * sw)
            };
            if !delta[m].is_finite() {
                return Err(SpiderError::LinearSolve {
                    branch: 0,
                    l_index: m,
                    t_index: n,
                });
            }
        }
        for m in 0..=ml {
            sol.trace[n * (ml + 1) + m] = old_trace[m] + delta[m];
            for i in 0..branches {
                let o = &outs[i * (ml + 1) + m];
                for k in 1..=mx {
                    let idx = sol.index(n, i, k, m);
                    let before = sol.values[sol.index(n + 1, i, k, m)];
                    sol.values[idx] = before + (o.v[k - 1] + delta[m] * o.w[k - 1]);
                }
            }
        }
    }
    for n in 0..mt {
        for i in 0..branches {
            for m in 0..=ml {
                let idx = sol.index(n, i, 0, m);
                sol.values[idx] = sol.trace[n * (ml + 1) + m];
            }
        }
    }
    for i in 0..branches {
        for m in 0..=ml {
            let idx = sol.index(mt, i, 0, m);
            sol.values[idx] = sol.trace[mt * (ml + 1) + m];
        }
    }
    if max_peclet > opts.peclet_bound {
        let msg = format!("cell Peclet number {max_peclet:.3} exceeds {}", opts.peclet_bound);
        log::warn!("{msg}");
        sol.warnings.push(msg);
    }
    Ok(sol)
}

/// PDE value at the initial state against a Monte Carlo estimate of
/// `E[g_{i(T)}(x(T), l(T))]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeynmanKacReport {
    pub pde: f64,
    pub mc: Estimate,
    pub discrepancy: f64,
    /// Half-width `3·SE + 0.02·range(g)`.
    pub tolerance: f64,
    pub g_range: f64,
    pub failed_paths: usize,
    pub pass: bool,
}

/// Range of `g` over the grid nodes.
pub fn terminal_range<S: Scalar>(g: &TerminalData<S>, grid: &PdeGrid) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..g.branches() {
        for m in 0..=grid.ml {
            for k in 0..=grid.mx {
                let v = g.value(Branch::from_index(i), S::c(grid.x(k)), S::c(grid.l(m))).to_f64_lossy();
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    hi - lo
}

pub fn feynman_kac_compare<S: Scalar>(
    sol: &PdeSolution<S>,
    cs: &CoefficientSet<S>,
    g: &TerminalData<S>,
    init: &SpiderState<S>,
    cfg: &SchemeConfig,
    n_paths: usize,
) -> Result<FeynmanKacReport> {
    if (cfg.horizon - sol.grid.horizon).abs() > 1e-12 * sol.grid.horizon {
        return Err(precondition("Monte Carlo horizon differs from the PDE horizon"));
    }
    let pde = sol.interpolate(0, init.branch(), init.x(), init.l)?.to_f64_lossy();
    let source = SimulatedSource {
        cs,
        init: *init,
        cfg: cfg.terminal_only(),
        n: n_paths,
    };
    let finals = terminal_states(&source)?;
    let values: Vec<f64> = finals
        .iter()
        .map(|s| g.value(s.branch(), s.x(), s.l).to_f64_lossy())
        .collect();
    let mc = Estimate::from_samples(&values);
    let g_range = terminal_range(g, &sol.grid);
    let tolerance = 3.0 * mc.se + 0.02 * g_range;
    let discrepancy = (pde - mc.mean).abs();
    Ok(FeynmanKacReport {
        pde,
        mc,
        discrepancy,
        tolerance,
        g_range,
        failed_paths: 0,
        pass: discrepancy <= tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientPreset;

    fn grid(mx: usize, ml: usize, mt: usize) -> PdeGrid {
        PdeGrid {
            x_max: 4.0,
            l_max: 2.0,
            horizon: 0.5,
            mx,
            ml,
            mt,
        }
    }

    #[test]
    fn compatibility_examples() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let gr = grid(10, 10, 10);
        let c = TerminalPreset::Constant { value: 2.0 }.build(&cs, 0.5).unwrap();
        assert_eq!(check_compatibility(&c, &cs, &gr), 0.0);
        let xl = TerminalPreset::XMinusL.build(&cs, 0.5).unwrap();
        assert!(check_compatibility(&xl, &cs, &gr) < 1e-15);
        let x = TerminalPreset::Radial.build(&cs, 0.5).unwrap();
        assert!((check_compatibility(&x, &cs, &gr) - 1.0).abs() < 1e-15);
        let bump = TerminalPreset::CompatibleBump { kappa: vec![1.0, -1.0] }.build(&cs, 0.5).unwrap();
        assert!(check_compatibility(&bump, &cs, &gr) < 1e-12);
    }

    #[test]
    fn constant_data_is_reproduced_exactly() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let g = TerminalPreset::Constant { value: 1.75 }.build(&cs, 0.5).unwrap();
        let sol = solve_backward(&cs, &g, &grid(20, 8, 10), &SolverOptions::default()).unwrap();
        assert_eq!(sol.min_max(), (1.75, 1.75));
        assert!(sol.warnings.is_empty());
    }

    #[test]
    fn incompatible_data_warns_but_solves() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let g = TerminalPreset::Radial.build(&cs, 0.5).unwrap();
        let sol = solve_backward(&cs, &g, &grid(20, 8, 10), &SolverOptions::default()).unwrap();
        assert!(sol.warnings.iter().any(|w| w.contains("compatibility")));
        assert!((sol.compatibility_residual - 1.0).abs() < 1e-15);
    }

    #[test]
    fn discontinuous_data_is_rejected() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let g = TerminalData::new("jump", 2, |i: Branch, _, _| i.label() as f64, |_, _, _| 0.0, |_, _, _| 0.0);
        assert!(solve_backward(&cs, &g, &grid(10, 4, 4), &SolverOptions::default()).is_err());
    }

    #[test]
    fn interpolation_is_exact_on_nodes_and_rejects_outside_points() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let g = TerminalPreset::XMinusL.build(&cs, 0.5).unwrap();
        let gr = grid(16, 8, 4);
        let sol = solve_backward(&cs, &g, &gr, &SolverOptions::default()).unwrap();
        let v = sol.interpolate(0, Branch::new(2), 1.3, 0.7).unwrap();
        assert!((v - 0.6).abs() < 1e-10);
        assert!(sol.interpolate(0, Branch::new(1), 5.0, 0.1).is_err());
        assert!(sol.interpolate(0, Branch::new(3), 1.0, 0.1).is_err());
    }

    #[test]
    fn thomas_matches_dense_solution() {
        let lower = [0.0, -1.0, -1.0, -1.0];
        let diag = [4.0, 4.0, 4.0, 4.0];
        let upper = [-1.0, -1.0, -1.0, 0.0];
        let mut r1 = [1.0, 2.0, 3.0, 4.0];
        let mut r2 = [0.0, 0.0, 0.0, 1.0];
        let mut scratch = [0.0; 4];
        thomas2(&lower, &diag, &upper, &mut r1, &mut r2, &mut scratch).unwrap();
        let apply = |u: &[f64]| {
            (0..4)
                .map(|k| {
                    let mut s = diag[k] * u[k];
                    if k > 0 {
                        s += lower[k] * u[k - 1];
                    }
                    if k < 3 {
                        s += upper[k] * u[k + 1];
                    }
                    s
                })
                .collect::<Vec<_>>()
        };
        let back = apply(&r1);
        for (b, e) in back.iter().zip([1.0, 2.0, 3.0, 4.0]) {
            assert!((b - e).abs() < 1e-14);
        }
        let back = apply(&r2);
        assert!((back[3] - 1.0).abs() < 1e-14);
    }
}
