//! Statistical checks of the defining properties of the spider law:
//! martingale increments of `V^f`, non-stickiness at the vertex, support of
//! the local time, and convergence of the scheme under refinement.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{precondition, Result};
use crate::junction::{distance, Branch, JunctionPoint, SpiderPath, SpiderState, TestFunction};
use crate::scalar::Scalar;
use crate::simulator::{map_paths, replay, PathSource, SchemeConfig, SimulatedSource, Step, StepVisitor};
use crate::skorokhod::modulus;
use crate::stats::{bonferroni_z, fit_through_origin, normal_cdf, slope, Estimate, MeanVar};

/// Streams `V^f` for several test functions at once and stores its value,
/// together with `x` and `l`, at the probe times.
///
/// `V^f(t) = f(t, X_t) − f(0, X_0) − Σ Lf(t_k, X_k) Δt − Σ Σ_j α_j(t_k, l_k) ∂_x f_j(t_k, 0) Δl_k`
/// with left endpoints and the coefficients at the current state.
pub struct VfAccumulator<'a, S: Scalar> {
    cs: &'a CoefficientSet<S>,
    fs: &'a [TestFunction<S>],
    probes: &'a [S],
    tol: S,
    alpha: Vec<S>,
    v: Vec<S>,
    /// `values[p][f]`: `V^f` at probe `p`.
    pub values: Vec<Vec<S>>,
    pub x: Vec<S>,
    pub l: Vec<S>,
    pub hit: Vec<bool>,
}

impl<'a, S: Scalar> VfAccumulator<'a, S> {
    pub fn new(cs: &'a CoefficientSet<S>, fs: &'a [TestFunction<S>], probes: &'a [S]) -> Self {
        let span = probes.iter().copied().fold(S::one(), S::max);
        Self {
            cs,
            fs,
            probes,
            tol: span * S::c(1e-9),
            alpha: vec![S::zero(); cs.branches()],
            v: vec![S::zero(); fs.len()],
            values: vec![vec![S::zero(); fs.len()]; probes.len()],
            x: vec![S::zero(); probes.len()],
            l: vec![S::zero(); probes.len()],
            hit: vec![false; probes.len()],
        }
    }

    fn record(&mut self, t: S, x: S, l: S) {
        for p in 0..self.probes.len() {
            if (self.probes[p] - t).abs() <= self.tol {
                self.values[p].copy_from_slice(&self.v);
                self.x[p] = x;
                self.l[p] = l;
                self.hit[p] = true;
            }
        }
    }
}

impl<'a, S: Scalar> StepVisitor<S> for VfAccumulator<'a, S> {
    fn begin(&mut self, init: &SpiderState<S>) {
        self.v.fill(S::zero());
        self.record(init.t, init.x(), init.l);
    }

    fn step(&mut self, s: &Step<S>) {
        let dt = s.t1 - s.t0;
        let dl = s.l1 - s.l0;
        let sigma = self.cs.sigma(s.branch0, s.t0, s.x0, s.l0);
        let b = self.cs.drift(s.branch0, s.t0, s.x0, s.l0);
        if dl != S::zero() {
            self.cs.alpha_into(s.t0, s.l0, &mut self.alpha);
        }
        let half = S::c(0.5);
        for (f, v) in self.fs.iter().zip(self.v.iter_mut()) {
            let gen = f.dt(s.branch0, s.t0, s.x0)
                + half * sigma * sigma * f.dxx(s.branch0, s.t0, s.x0)
                + b * f.dx(s.branch0, s.t0, s.x0);
            let mut dv = f.value(s.branch1, s.t1, s.x1) - f.value(s.branch0, s.t0, s.x0) - gen * dt;
            if dl != S::zero() {
                let mut flux = S::zero();
                for (j, a) in self.alpha.iter().enumerate() {
                    flux = flux + *a * f.dx(Branch::from_index(j), s.t0, S::zero());
                }
                dv = dv - flux * dl;
            }
            *v = *v + dv;
        }
        self.record(s.t1, s.x1, s.l1);
    }
}

/// `V^f` at every node of a stored path.
pub fn vf_along_path<S: Scalar>(path: &SpiderPath<S>, cs: &CoefficientSet<S>, f: &TestFunction<S>) -> Vec<S> {
    let fs = std::slice::from_ref(f);
    let probes = path.times.clone();
    let mut acc = VfAccumulator::new(cs, fs, &probes);
    replay(path, &mut acc);
    acc.values.into_iter().map(|v| v[0]).collect()
}

/// `Ψ_s`-measurable weight multiplying a martingale increment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weight {
    One,
    Radial,
    SinLocalTime,
}

impl Weight {
    pub const DEFAULT: [Weight; 3] = [Weight::One, Weight::Radial, Weight::SinLocalTime];

    pub fn eval(self, x: f64, l: f64) -> f64 {
        match self {
            Weight::One => 1.0,
            Weight::Radial => x,
            Weight::SinLocalTime => l.sin(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleEntry {
    pub s: f64,
    pub u: f64,
    pub weight: Weight,
    pub mean: f64,
    pub se: f64,
    pub z: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub function: String,
    pub entries: Vec<MartingaleEntry>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MartingaleSuite {
    pub reports: Vec<MartingaleReport>,
    /// Number of simultaneous z-tests.
    pub tests: usize,
    pub z_threshold: f64,
    pub paths: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MartingaleOptions {
    /// Family-wise level split over all tests (0.0027 is the two-sided 3σ level).
    pub family_alpha: f64,
    /// Use this threshold instead of the Bonferroni one.
    pub z_override: Option<f64>,
}

impl Default for MartingaleOptions {
    fn default() -> Self {
        Self {
            family_alpha: 0.0027,
            z_override: None,
        }
    }
}

fn z_score(mean: f64, se: f64) -> f64 {
    if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Estimates `E[φ_s (V^f(u) − V^f(s))]` for every test function, pair and
/// weight. `cs` is the coefficient set used inside `V^f`; passing one that
/// differs from the simulated law gives a negative control.
pub fn martingale_test<S: Scalar>(
    source: &dyn PathSource<S>,
    cs: &CoefficientSet<S>,
    fs: &[TestFunction<S>],
    pairs: &[(f64, f64)],
    weights: &[Weight],
    opts: &MartingaleOptions,
) -> Result<MartingaleSuite> {
    if fs.is_empty() || pairs.is_empty() || weights.is_empty() {
        return Err(precondition("need at least one test function, pair and weight"));
    }
    let horizon = source.horizon().to_f64_lossy();
    for &(s, u) in pairs {
        if !(0.0 <= s && s < u && u <= horizon) {
            return Err(precondition(format!("pair ({s}, {u}) must satisfy 0 <= s < u <= T")));
        }
    }
    let mut probes: Vec<f64> = pairs.iter().flat_map(|&(s, u)| [s, u]).collect();
    probes.sort_by(f64::total_cmp);
    probes.dedup();
    let probes_s: Vec<S> = probes.iter().map(|&p| S::c(p)).collect();
    let idx = |t: f64| probes.iter().position(|&p| p == t).expect("probe");

    let samples = map_paths(
        source,
        |_| VfAccumulator::new(cs, fs, &probes_s),
        |acc| {
            let ok = acc.hit.iter().all(|&h| h);
            (ok, acc.values, acc.x, acc.l)
        },
    )?;
    if samples.iter().any(|s| !s.0) {
        return Err(precondition("pair times must lie on the path grid"));
    }

    let tests = fs.len() * pairs.len() * weights.len();
    let z_threshold = opts.z_override.unwrap_or_else(|| bonferroni_z(opts.family_alpha, tests));
    let mut reports = Vec::with_capacity(fs.len());
    for (fi, f) in fs.iter().enumerate() {
        let mut entries = Vec::new();
        for &(s, u) in pairs {
            let (ps, pu) = (idx(s), idx(u));
            for &w in weights {
                let mut acc = MeanVar::default();
                for (_, values, x, l) in &samples {
                    let phi = w.eval(x[ps].to_f64_lossy(), l[ps].to_f64_lossy());
                    acc.push(phi * (values[pu][fi] - values[ps][fi]).to_f64_lossy());
                }
                let e = acc.estimate();
                let z = z_score(e.mean, e.se);
                entries.push(MartingaleEntry {
                    s,
                    u,
                    weight: w,
                    mean: e.mean,
                    se: e.se,
                    z,
                    pass: z.abs() <= z_threshold,
                });
            }
        }
        let pass = entries.iter().all(|e| e.pass);
        reports.push(MartingaleReport {
            function: f.id.clone(),
            entries,
            pass,
        });
    }
    Ok(MartingaleSuite {
        pass: reports.iter().all(|r| r.pass),
        reports,
        tests,
        z_threshold,
        paths: samples.len(),
    })
}

struct Occupation<'a, S> {
    eps: &'a [S],
    acc: Vec<S>,
}

impl<'a, S: Scalar> StepVisitor<S> for Occupation<'a, S> {
    fn begin(&mut self, _: &SpiderState<S>) {
        self.acc.fill(S::zero());
    }

    fn step(&mut self, s: &Step<S>) {
        for (a, &e) in self.acc.iter_mut().zip(self.eps) {
            if s.x0 < e {
                *a = *a + (s.t1 - s.t0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OccupationPoint {
    pub eps: f64,
    pub estimate: Estimate,
    pub ratio: f64,
    /// Every path spent the whole horizon below `eps`.
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NonStickiness {
    pub points: Vec<OccupationPoint>,
    /// Slope and R² of the fit through the origin over unsaturated points.
    pub slope: f64,
    pub r2: f64,
    pub max_ratio: f64,
}

/// Per-ε estimates of `E ∫₀ᵀ 1{x < ε} dt` (left-endpoint sums) with a
/// linear fit through the origin.
pub fn non_stickiness_curve<S: Scalar>(source: &dyn PathSource<S>, eps: &[f64]) -> Result<NonStickiness> {
    if eps.is_empty() || eps.iter().any(|e| !(*e > 0.0)) {
        return Err(precondition("eps values must be positive"));
    }
    let eps_s: Vec<S> = eps.iter().map(|&e| S::c(e)).collect();
    let horizon = source.horizon().to_f64_lossy();
    let per_path = map_paths(
        source,
        |_| Occupation {
            eps: &eps_s,
            acc: vec![S::zero(); eps_s.len()],
        },
        |o| o.acc.iter().map(|a| a.to_f64_lossy()).collect::<Vec<f64>>(),
    )?;
    let mut points = Vec::with_capacity(eps.len());
    for (k, &e) in eps.iter().enumerate() {
        let xs: Vec<f64> = per_path.iter().map(|v| v[k]).collect();
        let est = Estimate::from_samples(&xs);
        points.push(OccupationPoint {
            eps: e,
            ratio: est.mean / e,
            saturated: xs.iter().all(|&v| (v - horizon).abs() <= 1e-12 * horizon.max(1.0)),
            estimate: est,
        });
    }
    let fit: Vec<&OccupationPoint> = points.iter().filter(|p| !p.saturated).collect();
    let x: Vec<f64> = fit.iter().map(|p| p.eps).collect();
    let y: Vec<f64> = fit.iter().map(|p| p.estimate.mean).collect();
    let (c, r2) = if x.is_empty() { (f64::NAN, f64::NAN) } else { fit_through_origin(&x, &y) };
    Ok(NonStickiness {
        max_ratio: fit.iter().map(|p| p.ratio).fold(f64::NAN, f64::max),
        points,
        slope: c,
        r2,
    })
}

/// Expected left-endpoint occupation sum for reflected Brownian motion from
/// the origin on `steps` uniform steps: `Σ_k P(|W_{t_k}| < ε) Δt`.
pub fn reflected_bm_occupation(eps: f64, horizon: f64, steps: usize) -> f64 {
    let dt = horizon / steps as f64;
    (0..steps)
        .map(|k| {
            let t = k as f64 * dt;
            if t == 0.0 {
                dt
            } else {
                (2.0 * normal_cdf(eps / t.sqrt()) - 1.0) * dt
            }
        })
        .sum()
}

/// Largest local-time increase on a step that stays above `delta`, over all
/// paths of a stored ensemble.
pub fn local_time_support_defect<S: Scalar>(paths: &[SpiderPath<S>], delta: S) -> Result<S> {
    let defects: Result<Vec<S>> = paths
        .par_iter()
        .map(|p| crate::skorokhod::flat_off_zero_defect(p, delta))
        .collect();
    Ok(defects?.into_iter().fold(S::zero(), S::max))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusScaling {
    pub thetas: Vec<f64>,
    pub mean_modulus: Vec<f64>,
    /// Slope of `log E[w(θ)]` against `log θ`.
    pub exponent: f64,
}

/// Mean modulus of continuity of the local time over `thetas` and its
/// log-log slope.
pub fn modulus_scaling<S: Scalar>(paths: &[SpiderPath<S>], thetas: &[f64]) -> Result<ModulusScaling> {
    if paths.is_empty() || thetas.len() < 2 {
        return Err(precondition("need paths and at least two window widths"));
    }
    let mut means = Vec::with_capacity(thetas.len());
    for &th in thetas {
        let w: Result<Vec<f64>> = paths
            .par_iter()
            .map(|p| modulus(&p.times, &p.l, S::c(th)).map(|v| v.to_f64_lossy()))
            .collect();
        means.push(Estimate::from_samples(&w?).mean);
    }
    let lx: Vec<f64> = thetas.iter().map(|t| t.ln()).collect();
    let ly: Vec<f64> = means.iter().map(|m| m.ln()).collect();
    Ok(ModulusScaling {
        exponent: slope(&lx, &ly),
        thetas: thetas.to_vec(),
        mean_modulus: means,
    })
}

/// A terminal marginal sample `(x, i, l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mark {
    pub x: f64,
    pub branch: Branch,
    pub l: f64,
}

impl Mark {
    pub fn from_state<S: Scalar>(s: &SpiderState<S>) -> Self {
        Self {
            x: s.x().to_f64_lossy(),
            branch: s.branch(),
            l: s.l.to_f64_lossy(),
        }
    }
}

/// Star-graph distance plus the local-time gap.
pub fn mark_distance(a: &Mark, b: &Mark) -> f64 {
    let p = JunctionPoint {
        branch: a.branch,
        radial: a.x,
    };
    let q = JunctionPoint {
        branch: b.branch,
        radial: b.x,
    };
    distance(&p, &q) + (a.l - b.l).abs()
}

/// Energy distance `2E d(X,Y) − E d(X,X') − E d(Y,Y')` with U-statistics for
/// the within-sample terms. Cross pairs with equal index are skipped so that
/// coupled samples are not compared with their own partner.
pub fn energy_distance(a: &[Mark], b: &[Mark]) -> f64 {
    let within = |s: &[Mark]| -> f64 {
        let n = s.len();
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += mark_distance(&s[i], &s[j]);
            }
        }
        2.0 * acc / (n * (n - 1)) as f64
    };
    let mut cross = 0.0;
    let mut count = 0usize;
    for (i, p) in a.iter().enumerate() {
        for (j, q) in b.iter().enumerate() {
            if i != j {
                cross += mark_distance(p, q);
                count += 1;
            }
        }
    }
    2.0 * cross / count as f64 - within(a) - within(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceStep {
    pub n_freeze_coarse: usize,
    pub n_freeze_fine: usize,
    /// Block estimate of the energy distance.
    pub energy: Estimate,
    /// Mean distance between the two coupled terminal states.
    pub coupling: Estimate,
    /// Paired branch-frequency differences (coarse − fine).
    pub branch_gap: Vec<Estimate>,
    /// Three standard errors of the energy estimate.
    pub noise_floor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelfConvergence {
    pub total_steps: usize,
    pub steps: Vec<ConvergenceStep>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelfConvergenceOptions {
    pub paths: usize,
    /// Blocks and block size of the energy-distance estimate.
    pub blocks: usize,
    pub block_size: usize,
}

impl Default for SelfConvergenceOptions {
    fn default() -> Self {
        Self {
            paths: 20_000,
            blocks: 10,
            block_size: 400,
        }
    }
}

/// Compares terminal marginals of freezing grids `n, 2n, 4n, ...` with the
/// fine grid held fixed at `base.total_steps()` steps and common random
/// numbers, so only the freezing differs between levels.
pub fn self_convergence<S: Scalar>(
    cs: &CoefficientSet<S>,
    init: &SpiderState<S>,
    base: &SchemeConfig,
    doublings: usize,
    opts: &SelfConvergenceOptions,
) -> Result<SelfConvergence> {
    if doublings < 2 {
        return Err(precondition("need at least 2 doublings"));
    }
    let total = base.total_steps();
    let finest = base.n_freeze << doublings;
    if total % finest != 0 {
        return Err(precondition(format!(
            "{total} fine steps cannot be split into {finest} freezing cells"
        )));
    }
    if opts.blocks < 2 || opts.block_size < 2 {
        return Err(precondition("need at least 2 blocks of at least 2 samples"));
    }
    let levels: Result<Vec<Vec<Mark>>> = (0..=doublings)
        .map(|d| {
            let nf = base.n_freeze << d;
            let mut cfg = *base;
            cfg.n_freeze = nf;
            cfg.n_fine = total / nf;
            cfg.record_stride = 1;
            let cfg = cfg.terminal_only();
            let src = SimulatedSource {
                cs,
                init: *init,
                cfg,
                n: opts.paths,
            };
            let states = crate::simulator::terminal_states(&src)?;
            Ok(states.iter().map(Mark::from_state).collect())
        })
        .collect();
    let levels = levels?;
    let branches = cs.branches();
    let mut steps = Vec::with_capacity(doublings);
    for d in 0..doublings {
        let (a, b) = (&levels[d], &levels[d + 1]);
        let coupling = Estimate::from_samples(&a.iter().zip(b).map(|(p, q)| mark_distance(p, q)).collect::<Vec<_>>());
        let branch_gap = (1..=branches)
            .map(|k| {
                let diff: Vec<f64> = a
                    .iter()
                    .zip(b)
                    .map(|(p, q)| (p.branch.label() == k) as u8 as f64 - (q.branch.label() == k) as u8 as f64)
                    .collect();
                Estimate::from_samples(&diff)
            })
            .collect();
        let m = opts.block_size.min(a.len() / opts.blocks).max(2);
        let blocks: Vec<f64> = (0..opts.blocks)
            .into_par_iter()
            .map(|k| energy_distance(&a[k * m..(k + 1) * m], &b[k * m..(k + 1) * m]))
            .collect();
        let energy = Estimate::from_samples(&blocks);
        steps.push(ConvergenceStep {
            n_freeze_coarse: base.n_freeze << d,
            n_freeze_fine: base.n_freeze << (d + 1),
            noise_floor: 3.0 * energy.se,
            energy,
            coupling,
            branch_gap,
        });
    }
    Ok(SelfConvergence {
        total_steps: total,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientPreset;
    use crate::simulator::simulate_path;

    fn spider() -> CoefficientSet<f64> {
        CoefficientPreset::reference_l_dependent().build().unwrap()
    }

    fn path(seed: u64) -> SpiderPath<f64> {
        let init = SpiderState::at(0.0, 1, 0.3, 0.0).unwrap();
        simulate_path(&spider(), &init, &SchemeConfig::new(8, 32, 1.0, seed)).unwrap()
    }

    #[test]
    fn constant_function_gives_zero() {
        let p = path(1);
        let v = vf_along_path(&p, &spider(), &TestFunction::constant(2, 3.5));
        assert!(v.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn radial_function_recovers_driving_increments() {
        // With b = 0 and f = x the local-time term is Σ α_j = 1 times Δl.
        let p = path(2);
        let v = vf_along_path(&p, &spider(), &TestFunction::radial(2));
        for k in 0..p.len() {
            let y = p.x[k] - p.x[0] - (p.l[k] - p.l[0]);
            assert!((v[k] - y).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn z_score_conventions() {
        assert_eq!(z_score(0.0, 0.0), 0.0);
        assert_eq!(z_score(1.0, 0.0), f64::INFINITY);
        assert_eq!(z_score(-1.0, 0.5), -2.0);
    }

    #[test]
    fn occupation_oracle_limits() {
        // Tiny eps: only the first interval counts. Huge eps: everything.
        assert!((reflected_bm_occupation(1e-12, 1.0, 100) - 0.01).abs() < 1e-9);
        assert!((reflected_bm_occupation(100.0, 1.0, 100) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn energy_distance_separates_shifted_samples() {
        let mk = |x: f64, b: usize| Mark {
            x,
            branch: Branch::new(b),
            l: 0.0,
        };
        let a: Vec<Mark> = (0..50).map(|k| mk(k as f64 / 50.0, 1)).collect();
        let same: Vec<Mark> = (0..50).map(|k| mk((k as f64 + 0.5) / 50.0, 1)).collect();
        let other: Vec<Mark> = (0..50).map(|k| mk(k as f64 / 50.0, 2)).collect();
        assert!(energy_distance(&a, &same).abs() < 0.05);
        assert!(energy_distance(&a, &other) > 0.5);
    }
}
