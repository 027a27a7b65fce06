//! Frozen-coefficient path simulation of the spider diffusion.
//!
//! Coefficients are frozen in `(t, l)` at the knots of a coarse grid; inside
//! each coarse cell an Euler step drives `y`, the reflection map turns it
//! into `(x, l)`, and the branch label is redrawn from the frozen spinning
//! measure whenever a new excursion starts from the vertex.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{precondition, Result, SpiderError};
use crate::junction::{Branch, SpiderPath, SpiderState, DEFAULT_ZERO_TOL};
use crate::rng::{path_seed, PathRng};
use crate::scalar::Scalar;
use crate::skorokhod::Reflector;
use crate::stats::Estimate;

/// Uniform coarse grid `t_j = jT/n` and its step map `η_n`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreezingGrid<S> {
    pub n: usize,
    pub horizon: S,
}

impl<S: Scalar> FreezingGrid<S> {
    pub fn new(n: usize, horizon: S) -> Result<Self> {
        if n == 0 {
            return Err(precondition("freezing grid needs at least one cell"));
        }
        if !(horizon >= S::zero()) {
            return Err(precondition("horizon must be >= 0"));
        }
        Ok(Self { n, horizon })
    }

    pub fn knot(&self, j: usize) -> S {
        if j >= self.n {
            return self.horizon;
        }
        self.horizon * S::from_usize_lossy(j) / S::from_usize_lossy(self.n)
    }

    /// Largest knot `≤ u` (right-continuous, `η(T) = T`).
    pub fn eta(&self, u: S) -> S {
        if self.horizon == S::zero() {
            return S::zero();
        }
        let j = (u / self.horizon * S::from_usize_lossy(self.n)).floor();
        let mut j = j.to_usize().unwrap_or(0).min(self.n);
        // Guard against rounding putting u just below its own knot.
        while j > 0 && self.knot(j) > u {
            j -= 1;
        }
        while j < self.n && self.knot(j + 1) <= u {
            j += 1;
        }
        self.knot(j)
    }
}

/// How vertex visits between fine-grid nodes are handled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CrossingMode {
    /// Only grid nodes where the reflected position is exactly 0 count.
    #[default]
    GridTouch,
    /// The minimum of the Brownian bridge over each step is sampled; a step
    /// whose bridge reaches the vertex starts a new excursion and pushes the
    /// local time by the overshoot.
    BridgeCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub n_freeze: usize,
    pub n_fine: usize,
    pub horizon: f64,
    #[serde(default)]
    pub crossing: CrossingMode,
    pub seed: u64,
    /// Fine steps between stored nodes (must divide `n_freeze * n_fine`).
    #[serde(default = "one")]
    pub record_stride: usize,
    #[serde(default = "default_zero_tol")]
    pub zero_tol: f64,
}

fn one() -> usize {
    1
}

fn default_zero_tol() -> f64 {
    DEFAULT_ZERO_TOL
}

impl SchemeConfig {
    pub fn new(n_freeze: usize, n_fine: usize, horizon: f64, seed: u64) -> Self {
        Self {
            n_freeze,
            n_fine,
            horizon,
            crossing: CrossingMode::GridTouch,
            seed,
            record_stride: 1,
            zero_tol: DEFAULT_ZERO_TOL,
        }
    }

    pub fn with_crossing(mut self, crossing: CrossingMode) -> Self {
        self.crossing = crossing;
        self
    }

    pub fn with_record_stride(mut self, stride: usize) -> Self {
        self.record_stride = stride;
        self
    }

    /// Store only the initial and terminal states.
    pub fn terminal_only(mut self) -> Self {
        self.record_stride = self.total_steps().max(1);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn total_steps(&self) -> usize {
        self.n_freeze * self.n_fine
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_freeze == 0 || self.n_fine == 0 {
            return Err(precondition("n_freeze and n_fine must be >= 1"));
        }
        if !(self.horizon >= 0.0) || !self.horizon.is_finite() {
            return Err(precondition("horizon must be finite and >= 0"));
        }
        if self.record_stride == 0 || self.total_steps() % self.record_stride != 0 {
            return Err(precondition(format!(
                "record_stride {} must divide the {} fine steps",
                self.record_stride,
                self.total_steps()
            )));
        }
        if !(self.zero_tol >= 0.0) {
            return Err(precondition("zero_tol must be >= 0"));
        }
        Ok(())
    }

    /// Times of the stored nodes.
    pub fn record_times<S: Scalar>(&self) -> Vec<S> {
        if self.horizon == 0.0 {
            return vec![S::zero()];
        }
        let k = self.total_steps();
        (0..=k)
            .step_by(self.record_stride)
            .map(|i| fine_time(S::c(self.horizon), i, k))
            .collect()
    }
}

fn fine_time<S: Scalar>(horizon: S, k: usize, total: usize) -> S {
    if k == total {
        horizon
    } else {
        horizon * S::from_usize_lossy(k) / S::from_usize_lossy(total)
    }
}

/// One fine step as seen by a [`StepVisitor`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step<S> {
    pub k: usize,
    pub t0: S,
    pub t1: S,
    pub x0: S,
    pub x1: S,
    pub l0: S,
    pub l1: S,
    pub branch0: Branch,
    pub branch1: Branch,
    /// Minimum of the radial part over the step.
    pub step_min: S,
}

/// Streaming consumer of a path, step by step.
pub trait StepVisitor<S> {
    fn begin(&mut self, init: &SpiderState<S>);
    fn step(&mut self, step: &Step<S>);
}

/// Stores every `stride`-th node.
#[derive(Debug)]
pub struct PathRecorder<S> {
    stride: usize,
    pending_min: S,
    path: SpiderPath<S>,
}

impl<S: Scalar> PathRecorder<S> {
    pub fn new(stride: usize, capacity: usize) -> Self {
        Self {
            stride: stride.max(1),
            pending_min: S::infinity(),
            path: SpiderPath {
                times: Vec::with_capacity(capacity),
                x: Vec::with_capacity(capacity),
                branch: Vec::with_capacity(capacity),
                l: Vec::with_capacity(capacity),
                step_min: Vec::with_capacity(capacity),
            },
        }
    }

    pub fn into_path(self) -> SpiderPath<S> {
        self.path
    }
}

impl<S: Scalar> StepVisitor<S> for PathRecorder<S> {
    fn begin(&mut self, init: &SpiderState<S>) {
        self.path.times.push(init.t);
        self.path.x.push(init.x());
        self.path.branch.push(init.branch());
        self.path.l.push(init.l);
    }

    fn step(&mut self, s: &Step<S>) {
        self.pending_min = self.pending_min.min(s.step_min);
        if (s.k + 1) % self.stride == 0 {
            self.path.times.push(s.t1);
            self.path.x.push(s.x1);
            self.path.branch.push(s.branch1);
            self.path.l.push(s.l1);
            self.path.step_min.push(self.pending_min);
            self.pending_min = S::infinity();
        }
    }
}

fn coefficient_error<S: Scalar>(what: &str, branch: Branch, t: S, x: S, l: S) -> SpiderError {
    SpiderError::CoefficientEvaluation {
        what: format!("{what}_{branch}"),
        t: t.to_f64_lossy(),
        x: x.to_f64_lossy(),
        l: l.to_f64_lossy(),
    }
}

// Crossing probabilities below e^{-40} are not sampled.
const BRIDGE_CUTOFF: f64 = 40.0;

/// Runs the scheme for one path with an explicit RNG seed, streaming every
/// fine step into `visitor`.
pub fn run_path<S: Scalar>(
    cs: &CoefficientSet<S>,
    init: &SpiderState<S>,
    cfg: &SchemeConfig,
    seed: u64,
    visitor: &mut dyn StepVisitor<S>,
) -> Result<()> {
    cfg.validate()?;
    if init.branch().0 == 0 || init.branch().label() > cs.branches() {
        return Err(precondition(format!(
            "initial branch {} outside 1..={}",
            init.branch(),
            cs.branches()
        )));
    }
    if init.t != S::zero() {
        return Err(precondition("paths start at t = 0"));
    }
    visitor.begin(init);
    if cfg.horizon == 0.0 {
        return Ok(());
    }
    let horizon = S::c(cfg.horizon);
    let grid = FreezingGrid::new(cfg.n_freeze, horizon)?;
    let total = cfg.total_steps();
    let dt = horizon / S::from_usize_lossy(total);
    let sqrt_dt = dt.sqrt();
    let zero_tol = S::c(cfg.zero_tol);
    let bridge = cfg.crossing == CrossingMode::BridgeCorrected;

    let mut rng = PathRng::new(seed);
    let mut alpha = vec![S::zero(); cs.branches()];
    let mut probs = vec![0.0f64; cs.branches()];

    let l_start = init.l;
    let mut reflector = Reflector::default();
    let mut y = init.x();
    let mut x = init.x();
    let mut l = l_start;
    let mut branch = init.branch();
    let mut t = S::zero();

    for j in 0..cfg.n_freeze {
        let tj = grid.knot(j);
        let lj = l;
        cs.alpha_into(tj, lj, &mut alpha);
        for (p, a) in probs.iter_mut().zip(&alpha) {
            *p = a.to_f64_lossy();
            if !p.is_finite() || *p < 0.0 {
                return Err(coefficient_error("alpha", branch, tj, x, lj));
            }
        }
        for m in 0..cfg.n_fine {
            let k = j * cfg.n_fine + m;
            let t1 = fine_time(horizon, k + 1, total);
            let sigma = cs.sigma(branch, tj, x, lj);
            if !sigma.is_finite() {
                return Err(coefficient_error("sigma", branch, tj, x, lj));
            }
            let b = cs.drift(branch, tj, x, lj);
            if !b.is_finite() {
                return Err(coefficient_error("b", branch, tj, x, lj));
            }
            let xi = S::c(rng.standard_normal());
            let y1 = y + sigma * sqrt_dt * xi + b * dt;
            let ell_prev = reflector.local_time();

            let (x1, ell, step_min) = if bridge {
                let end_unreflected = y1 + ell_prev;
                let var = sigma * sigma * dt;
                let exponent = S::c(2.0) * x * end_unreflected / var;
                if end_unreflected <= S::zero() || exponent < S::c(BRIDGE_CUTOFF) {
                    let u = S::c(rng.uniform());
                    let gap = y1 - y;
                    let bridge_min = (y + y1 - (gap * gap - S::c(2.0) * var * u.ln()).sqrt()) / S::c(2.0);
                    let bridge_min = bridge_min.min(y).min(y1);
                    let (x1, ell) = reflector.push_with_min(y1, bridge_min);
                    (x1, ell, (bridge_min + ell_prev).max(S::zero()))
                } else {
                    let (x1, ell) = reflector.push(y1);
                    (x1, ell, x.min(x1))
                }
            } else {
                let (x1, ell) = reflector.push(y1);
                (x1, ell, x.min(x1))
            };

            let l1 = l_start + ell;
            let mut branch1 = branch;
            if step_min <= zero_tol && x1 > zero_tol {
                branch1 = Branch::from_index(rng.categorical(&probs));
            }
            visitor.step(&Step {
                k,
                t0: t,
                t1,
                x0: x,
                x1,
                l0: l,
                l1,
                branch0: branch,
                branch1,
                step_min,
            });
            y = y1;
            x = x1;
            l = l1;
            branch = branch1;
            t = t1;
        }
    }
    Ok(())
}

/// Simulates one path using `cfg.seed` directly as the stream seed.
pub fn simulate_path<S: Scalar>(
    cs: &CoefficientSet<S>,
    init: &SpiderState<S>,
    cfg: &SchemeConfig,
) -> Result<SpiderPath<S>> {
    cfg.validate()?;
    let nodes = if cfg.horizon == 0.0 {
        1
    } else {
        cfg.total_steps() / cfg.record_stride + 1
    };
    let mut rec = PathRecorder::new(cfg.record_stride, nodes);
    run_path(cs, init, cfg, cfg.seed, &mut rec)?;
    Ok(rec.into_path())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathFailure {
    pub index: usize,
    pub seed: u64,
    pub message: String,
}

/// Independent paths on a shared record grid. Path `ids[k]` was simulated
/// with seed `seeds[k] = path_seed(master, ids[k])`.
#[derive(Debug, Clone)]
pub struct PathEnsemble<S> {
    pub times: Vec<S>,
    pub paths: Vec<SpiderPath<S>>,
    pub ids: Vec<usize>,
    pub seeds: Vec<u64>,
    pub failures: Vec<PathFailure>,
    pub config: SchemeConfig,
}

pub fn simulate_ensemble<S: Scalar>(
    cs: &CoefficientSet<S>,
    init: &SpiderState<S>,
    cfg: &SchemeConfig,
    n: usize,
) -> Result<PathEnsemble<S>> {
    if n == 0 {
        return Err(precondition("ensemble size must be >= 1"));
    }
    cfg.validate()?;
    let results: Vec<(u64, Result<SpiderPath<S>>)> = (0..n)
        .into_par_iter()
        .map(|k| {
            let seed = path_seed(cfg.seed, k as u64);
            let c = cfg.with_seed(seed);
            (seed, simulate_path(cs, init, &c))
        })
        .collect();
    let mut ens = PathEnsemble {
        times: cfg.record_times(),
        paths: Vec::with_capacity(n),
        ids: Vec::with_capacity(n),
        seeds: Vec::with_capacity(n),
        failures: Vec::new(),
        config: *cfg,
    };
    for (k, (seed, r)) in results.into_iter().enumerate() {
        match r {
            Ok(p) => {
                ens.paths.push(p);
                ens.ids.push(k);
                ens.seeds.push(seed);
            }
            Err(SpiderError::Precondition(msg)) => return Err(SpiderError::Precondition(msg)),
            Err(e) => {
                log::warn!("path {k} aborted: {e}");
                ens.failures.push(PathFailure {
                    index: k,
                    seed,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(ens)
}

/// Anything that can replay paths step by step: a stored ensemble or an
/// on-the-fly simulation.
pub trait PathSource<S: Scalar>: Sync {
    fn num_paths(&self) -> usize;
    fn horizon(&self) -> S;
    fn visit(&self, k: usize, visitor: &mut dyn StepVisitor<S>) -> Result<()>;
}

impl<S: Scalar> PathSource<S> for PathEnsemble<S> {
    fn num_paths(&self) -> usize {
        self.paths.len()
    }

    fn horizon(&self) -> S {
        *self.times.last().unwrap_or(&S::zero())
    }

    fn visit(&self, k: usize, visitor: &mut dyn StepVisitor<S>) -> Result<()> {
        replay(&self.paths[k], visitor);
        Ok(())
    }
}

/// Streams the stored nodes of `path` as steps.
pub fn replay<S: Scalar>(path: &SpiderPath<S>, visitor: &mut dyn StepVisitor<S>) {
    visitor.begin(&path.state(0));
    for k in 1..path.len() {
        visitor.step(&Step {
            k: k - 1,
            t0: path.times[k - 1],
            t1: path.times[k],
            x0: path.x[k - 1],
            x1: path.x[k],
            l0: path.l[k - 1],
            l1: path.l[k],
            branch0: path.branch[k - 1],
            branch1: path.branch[k],
            step_min: path.step_min[k - 1],
        });
    }
}

/// Paths simulated on demand; path `k` is identical to path `k` of
/// [`simulate_ensemble`] with the same arguments.
#[derive(Clone)]
pub struct SimulatedSource<'a, S: Scalar> {
    pub cs: &'a CoefficientSet<S>,
    pub init: SpiderState<S>,
    pub cfg: SchemeConfig,
    pub n: usize,
}

impl<'a, S: Scalar> PathSource<S> for SimulatedSource<'a, S> {
    fn num_paths(&self) -> usize {
        self.n
    }

    fn horizon(&self) -> S {
        S::c(self.cfg.horizon)
    }

    fn visit(&self, k: usize, visitor: &mut dyn StepVisitor<S>) -> Result<()> {
        run_path(self.cs, &self.init, &self.cfg, path_seed(self.cfg.seed, k as u64), visitor)
    }
}

/// Runs a fresh visitor over every path in parallel and returns the
/// per-path outputs in path order.
pub fn map_paths<S, V, R, Make, Finish>(source: &dyn PathSource<S>, make: Make, finish: Finish) -> Result<Vec<R>>
where
    S: Scalar,
    V: StepVisitor<S>,
    R: Send,
    Make: Fn(usize) -> V + Sync,
    Finish: Fn(V) -> R + Sync,
{
    (0..source.num_paths())
        .into_par_iter()
        .map(|k| {
            let mut v = make(k);
            source.visit(k, &mut v)?;
            Ok(finish(v))
        })
        .collect()
}

/// Records the state at the end of the path.
#[derive(Debug, Clone, Copy)]
pub struct TerminalState<S> {
    pub state: Option<SpiderState<S>>,
}

impl<S: Scalar> StepVisitor<S> for TerminalState<S> {
    fn begin(&mut self, init: &SpiderState<S>) {
        self.state = Some(*init);
    }

    fn step(&mut self, s: &Step<S>) {
        if let Some(st) = self.state.as_mut() {
            st.t = s.t1;
            st.point.radial = s.x1;
            st.point.branch = s.branch1;
            st.l = s.l1;
        }
    }
}

/// Terminal states of every path in `source`.
pub fn terminal_states<S: Scalar>(source: &dyn PathSource<S>) -> Result<Vec<SpiderState<S>>> {
    map_paths(source, |_| TerminalState { state: None }, |v| v.state.expect("visited"))
}

/// Summary of the ensemble marginal at one record time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub t: f64,
    pub n: usize,
    pub branch_frequency: Vec<Estimate>,
    pub mean_x: Estimate,
    pub mean_x2: Estimate,
    pub mean_l: Estimate,
    pub mean_l2: Estimate,
    pub cov_xl: f64,
    pub var_x: f64,
    pub var_l: f64,
}

/// Record-grid index of time `t`, if `t` is a record time.
pub fn grid_index<S: Scalar>(times: &[S], t: S) -> Option<usize> {
    let span = times.last().copied().unwrap_or(S::one()).max(S::one());
    let tol = span * S::c(1e-9);
    times.iter().position(|&s| (s - t).abs() <= tol)
}

pub fn marginal_statistics<S: Scalar>(ens: &PathEnsemble<S>, t: S) -> Result<MarginalSummary> {
    let k = grid_index(&ens.times, t).ok_or_else(|| precondition(format!("t = {t} is not on the record grid")))?;
    if ens.paths.is_empty() {
        return Err(precondition("empty ensemble"));
    }
    let branches = ens
        .paths
        .iter()
        .map(|p| p.branch.iter().map(|b| b.label()).max().unwrap_or(1))
        .max()
        .unwrap_or(1);
    let xs: Vec<f64> = ens.paths.iter().map(|p| p.x[k].to_f64_lossy()).collect();
    let ls: Vec<f64> = ens.paths.iter().map(|p| p.l[k].to_f64_lossy()).collect();
    Ok(summarize(
        ens.times[k].to_f64_lossy(),
        &xs,
        &ls,
        &ens.paths.iter().map(|p| p.branch[k]).collect::<Vec<_>>(),
        branches,
    ))
}

pub fn summarize(t: f64, xs: &[f64], ls: &[f64], branches: &[Branch], n_branches: usize) -> MarginalSummary {
    let n = xs.len();
    let x2: Vec<f64> = xs.iter().map(|x| x * x).collect();
    let l2: Vec<f64> = ls.iter().map(|l| l * l).collect();
    let mean_x = Estimate::from_samples(xs);
    let mean_l = Estimate::from_samples(ls);
    let xl: Vec<f64> = xs.iter().zip(ls).map(|(x, l)| x * l).collect();
    let mean_xl = Estimate::from_samples(&xl).mean;
    let denom = if n > 1 { (n - 1) as f64 / n as f64 } else { 1.0 };
    let branch_frequency = (1..=n_branches)
        .map(|b| {
            let ind: Vec<f64> = branches.iter().map(|br| if br.label() == b { 1.0 } else { 0.0 }).collect();
            Estimate::from_samples(&ind)
        })
        .collect();
    MarginalSummary {
        t,
        n,
        branch_frequency,
        mean_x2: Estimate::from_samples(&x2),
        mean_l2: Estimate::from_samples(&l2),
        cov_xl: (mean_xl - mean_x.mean * mean_l.mean) / denom,
        var_x: mean_x.sd * mean_x.sd,
        var_l: mean_l.sd * mean_l.sd,
        mean_x,
        mean_l,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientPreset;
    use crate::skorokhod::flat_off_zero_defect;

    fn brownian(alpha: Vec<f64>) -> CoefficientSet<f64> {
        CoefficientPreset::brownian_constant(alpha).build().unwrap()
    }

    #[test]
    fn freezing_grid_step_map() {
        let g = FreezingGrid::new(4, 1.0f64).unwrap();
        assert_eq!(g.eta(0.0), 0.0);
        assert_eq!(g.eta(0.24), 0.0);
        assert_eq!(g.eta(0.25), 0.25);
        assert_eq!(g.eta(0.99), 0.75);
        assert_eq!(g.eta(1.0), 1.0);
        for k in 0..=1000 {
            let u = k as f64 / 1000.0;
            assert!(g.eta(u) <= u);
        }
        let g = FreezingGrid::new(10, 1.0f64).unwrap();
        assert_eq!(g.eta(0.3), g.knot(3));
    }

    #[test]
    fn degenerate_horizon_returns_initial_state() {
        let cs = brownian(vec![0.5, 0.5]);
        let init = SpiderState::at(0.0, 2, 1.5, 0.25).unwrap();
        let cfg = SchemeConfig::new(4, 8, 0.0, 1);
        let p = simulate_path(&cs, &init, &cfg).unwrap();
        assert_eq!(p, SpiderPath::single(init));
    }

    #[test]
    fn invalid_configurations_are_rejected() {
        let cs = brownian(vec![0.5, 0.5]);
        let init = SpiderState::at(0.0, 1, 0.0, 0.0).unwrap();
        assert!(simulate_path(&cs, &init, &SchemeConfig::new(0, 8, 1.0, 1)).is_err());
        assert!(simulate_path(&cs, &init, &SchemeConfig::new(4, 8, 1.0, 1).with_record_stride(5)).is_err());
        let bad = SpiderState::at(0.0, 3, 0.0, 0.0).unwrap();
        assert!(simulate_path(&cs, &bad, &SchemeConfig::new(4, 8, 1.0, 1)).is_err());
    }

    #[test]
    fn paths_satisfy_invariants_in_both_modes() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        for mode in [CrossingMode::GridTouch, CrossingMode::BridgeCorrected] {
            for seed in 0..20 {
                let init = SpiderState::at(0.0, 1, 0.1 * seed as f64, 0.0).unwrap();
                let cfg = SchemeConfig::new(16, 64, 1.0, seed).with_crossing(mode);
                let p = simulate_path(&cs, &init, &cfg).unwrap();
                assert_eq!(p.len(), 16 * 64 + 1);
                p.check_invariants(cfg.zero_tol).unwrap();
                let defect = flat_off_zero_defect(&p, 2.0 * (1.0f64 / 1024.0).sqrt()).unwrap();
                assert!(defect <= 1e-12);
            }
        }
    }

    #[test]
    fn decimated_recording_keeps_invariants() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let init = SpiderState::at(0.0, 1, 0.0, 0.0).unwrap();
        let full = SchemeConfig::new(8, 32, 1.0, 5).with_crossing(CrossingMode::BridgeCorrected);
        let coarse = full.with_record_stride(16);
        let a = simulate_path(&cs, &init, &full).unwrap();
        let b = simulate_path(&cs, &init, &coarse).unwrap();
        assert_eq!(b.len(), 17);
        b.check_invariants(1e-12).unwrap();
        for k in 0..b.len() {
            assert_eq!(b.x[k], a.x[16 * k]);
            assert_eq!(b.l[k], a.l[16 * k]);
            assert_eq!(b.branch[k], a.branch[16 * k]);
        }
    }

    #[test]
    fn labels_only_change_after_vertex_visits_and_follow_alpha() {
        let cs = brownian(vec![0.2, 0.3, 0.5]);
        let init = SpiderState::at(0.0, 1, 0.0, 0.0).unwrap();
        let cfg = SchemeConfig::new(1, 256, 1.0, 3).terminal_only();
        let ens = simulate_ensemble(&cs, &init, &cfg, 20_000).unwrap();
        let s = marginal_statistics(&ens, 1.0).unwrap();
        for (k, a) in [0.2, 0.3, 0.5].iter().enumerate() {
            let e = &s.branch_frequency[k];
            assert!((e.mean - a).abs() < 4.0 * e.se, "branch {k}: {} vs {a}", e.mean);
        }
    }

    #[test]
    fn ensemble_is_reproducible_and_matches_single_path() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let init = SpiderState::at(0.0, 1, 0.0, 0.0).unwrap();
        let cfg = SchemeConfig::new(8, 16, 1.0, 42);
        let a = simulate_ensemble(&cs, &init, &cfg, 5).unwrap();
        let b = simulate_ensemble(&cs, &init, &cfg, 5).unwrap();
        assert_eq!(a.paths, b.paths);
        assert_eq!(a.seeds, b.seeds);
        let one = simulate_ensemble(&cs, &init, &cfg, 1).unwrap();
        let direct = simulate_path(&cs, &init, &cfg.with_seed(path_seed(42, 0))).unwrap();
        assert_eq!(one.paths[0], direct);
        assert_eq!(a.paths[0], direct);
    }

    #[test]
    fn coefficient_failures_are_reported_per_path() {
        let bounds = crate::coefficients::CoefficientBounds {
            a_lower: 0.5,
            sigma_lower: 1.0,
            lip_b: 1.0,
            lip_sigma: 1.0,
            lip_alpha: 1.0,
        };
        let cs = CoefficientSet::new(
            "blowup",
            2,
            |_, _, _, _| 1.0,
            |_, _, x, _| if x > 1.0 { f64::NAN } else { 0.0 },
            |_, _, out: &mut [f64]| out.copy_from_slice(&[0.5, 0.5]),
            bounds,
        )
        .unwrap();
        let init = SpiderState::at(0.0, 1, 0.9, 0.0).unwrap();
        let cfg = SchemeConfig::new(4, 64, 1.0, 1);
        let ens = simulate_ensemble(&cs, &init, &cfg, 50).unwrap();
        assert!(!ens.failures.is_empty());
        assert_eq!(ens.failures.len() + ens.paths.len(), 50);
        assert!(ens.failures[0].message.contains("b_"));
    }

    #[test]
    fn constant_paths_have_zero_variance_summaries() {
        let init = SpiderState::at(0.0, 2, 1.25, 0.5).unwrap();
        let mut p = SpiderPath::single(init);
        p.times.push(1.0);
        p.x.push(1.25);
        p.branch.push(Branch::new(2));
        p.l.push(0.5);
        p.step_min.push(1.25);
        let ens = PathEnsemble {
            times: vec![0.0, 1.0],
            paths: vec![p.clone(), p.clone(), p],
            ids: vec![0, 1, 2],
            seeds: vec![0, 1, 2],
            failures: vec![],
            config: SchemeConfig::new(1, 1, 1.0, 0),
        };
        let s = marginal_statistics(&ens, 1.0).unwrap();
        assert_eq!(s.mean_x.mean, 1.25);
        assert_eq!(s.mean_x.se, 0.0);
        assert_eq!(s.var_l, 0.0);
        assert_eq!(s.cov_xl, 0.0);
        assert_eq!(s.branch_frequency[1].mean, 1.0);
        assert!(marginal_statistics(&ens, 0.5).is_err());
    }
}
