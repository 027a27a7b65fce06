//! Diffusion coefficients on the star graph and their declared regularity
//! bounds, with randomized validation and JSON presets.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{precondition, Result, SpiderError};
use crate::junction::Branch;
use crate::scalar::Scalar;

pub type BranchCoefficient<S> = Arc<dyn Fn(Branch, S, S, S) -> S + Send + Sync>;
/// Writes `α(t, l)` into the output slice (length `I`).
pub type SpinningMeasure<S> = Arc<dyn Fn(S, S, &mut [S]) + Send + Sync>;

/// Declared constants of the regularity assumption. Each `lip_*` bounds the
/// sum of the sup norm and the Lipschitz constants in every argument.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientBounds<S> {
    pub a_lower: S,
    pub sigma_lower: S,
    pub lip_b: S,
    pub lip_sigma: S,
    pub lip_alpha: S,
}

impl<S: Scalar> CoefficientBounds<S> {
    pub fn validate(&self, branches: usize) -> Result<()> {
        let inv_i = S::one() / S::from_usize_lossy(branches);
        if !(self.a_lower > S::zero() && self.a_lower <= inv_i * (S::one() + S::c(1e-12))) {
            return Err(precondition(format!(
                "a_lower must lie in (0, 1/I], got {} with I = {branches}",
                self.a_lower
            )));
        }
        for (name, v) in [
            ("sigma_lower", self.sigma_lower),
            ("lip_b", self.lip_b),
            ("lip_sigma", self.lip_sigma),
            ("lip_alpha", self.lip_alpha),
        ] {
            if !(v > S::zero()) {
                return Err(precondition(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-branch volatility and drift plus the spinning measure at the vertex.
#[derive(Clone)]
pub struct CoefficientSet<S> {
    pub label: String,
    branches: usize,
    sigma: BranchCoefficient<S>,
    drift: BranchCoefficient<S>,
    alpha: SpinningMeasure<S>,
    pub bounds: CoefficientBounds<S>,
    standard_brownian: bool,
}

impl<S: Scalar> fmt::Debug for CoefficientSet<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoefficientSet")
            .field("label", &self.label)
            .field("branches", &self.branches)
            .field("bounds", &self.bounds)
            .field("standard_brownian", &self.standard_brownian)
            .finish()
    }
}

impl<S: Scalar> CoefficientSet<S> {
    pub fn new<Fs, Fb, Fa>(
        label: impl Into<String>,
        branches: usize,
        sigma: Fs,
        drift: Fb,
        alpha: Fa,
        bounds: CoefficientBounds<S>,
    ) -> Result<Self>
    where
        Fs: Fn(Branch, S, S, S) -> S + Send + Sync + 'static,
        Fb: Fn(Branch, S, S, S) -> S + Send + Sync + 'static,
        Fa: Fn(S, S, &mut [S]) + Send + Sync + 'static,
    {
        if branches < 2 {
            return Err(precondition(format!("need at least 2 branches, got {branches}")));
        }
        bounds.validate(branches)?;
        Ok(Self {
            label: label.into(),
            branches,
            sigma: Arc::new(sigma),
            drift: Arc::new(drift),
            alpha: Arc::new(alpha),
            bounds,
            standard_brownian: false,
        })
    }

    /// `σ ≡ 1`, `b ≡ 0` with the given spinning measure.
    pub fn brownian<Fa>(label: impl Into<String>, branches: usize, alpha: Fa, a_lower: S, lip_alpha: S) -> Result<Self>
    where
        Fa: Fn(S, S, &mut [S]) + Send + Sync + 'static,
    {
        let bounds = CoefficientBounds {
            a_lower,
            sigma_lower: S::one(),
            lip_b: S::c(1e-12),
            lip_sigma: S::one(),
            lip_alpha: lip_alpha.max(S::c(1e-12)),
        };
        let mut cs = Self::new(label, branches, |_, _, _, _| S::one(), |_, _, _, _| S::zero(), alpha, bounds)?;
        cs.standard_brownian = true;
        Ok(cs)
    }

    pub fn branches(&self) -> usize {
        self.branches
    }

    /// Whether σ ≡ 1 and b ≡ 0 were declared at construction.
    pub fn is_standard_brownian(&self) -> bool {
        self.standard_brownian
    }

    #[inline]
    pub fn sigma(&self, i: Branch, t: S, x: S, l: S) -> S {
        (self.sigma)(i, t, x, l)
    }

    #[inline]
    pub fn drift(&self, i: Branch, t: S, x: S, l: S) -> S {
        (self.drift)(i, t, x, l)
    }

    #[inline]
    pub fn alpha_into(&self, t: S, l: S, out: &mut [S]) {
        (self.alpha)(t, l, out)
    }

    pub fn alpha(&self, t: S, l: S) -> Vec<S> {
        let mut out = vec![S::zero(); self.branches];
        self.alpha_into(t, l, &mut out);
        out
    }

    /// Same σ and b with a different spinning measure (used for negative
    /// controls and branch permutations).
    pub fn with_alpha<Fa>(&self, label: impl Into<String>, alpha: Fa) -> Self
    where
        Fa: Fn(S, S, &mut [S]) + Send + Sync + 'static,
    {
        let mut cs = self.clone();
        cs.label = label.into();
        cs.alpha = Arc::new(alpha);
        cs
    }

    /// Relabels branches: new branch `k` carries old branch `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.branches {
            return Err(precondition("permutation length must equal branch count"));
        }
        let mut seen = vec![false; self.branches];
        for &p in perm {
            if p >= self.branches || seen[p] {
                return Err(precondition("not a permutation of 0..I"));
            }
            seen[p] = true;
        }
        let perm: Arc<Vec<usize>> = Arc::new(perm.to_vec());
        let (p1, p2, p3) = (perm.clone(), perm.clone(), perm);
        let (s, d, a) = (self.sigma.clone(), self.drift.clone(), self.alpha.clone());
        let n = self.branches;
        let mut cs = self.clone();
        cs.label = format!("{}-permuted", self.label);
        cs.sigma = Arc::new(move |i, t, x, l| s(Branch::from_index(p1[i.index()]), t, x, l));
        cs.drift = Arc::new(move |i, t, x, l| d(Branch::from_index(p2[i.index()]), t, x, l));
        cs.alpha = Arc::new(move |t, l, out: &mut [S]| {
            let mut tmp = vec![S::zero(); n];
            a(t, l, &mut tmp);
            for (k, o) in out.iter_mut().enumerate() {
                *o = tmp[p3[k]];
            }
        });
        Ok(cs)
    }
}

/// Sampling box `[0,T] × [0,X] × [0,L]` for coefficient validation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationWindow<S> {
    pub t_max: S,
    pub x_max: S,
    pub l_max: S,
}

impl<S: Scalar> Default for ValidationWindow<S> {
    fn default() -> Self {
        Self {
            t_max: S::one(),
            x_max: S::c(5.0),
            l_max: S::c(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// Spinning measure does not sum to one.
    Simplex,
    /// Spinning measure component below `a_lower`.
    A,
    /// Volatility below `sigma_lower`.
    E,
    /// Sup norm plus sampled Lipschitz quotients exceed the declared constant.
    R,
    /// Coefficient returned a non-finite value.
    Evaluation,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Condition::Simplex => "simplex",
            Condition::A => "(A)",
            Condition::E => "(E)",
            Condition::R => "(R)",
            Condition::Evaluation => "evaluation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub condition: Condition,
    pub coefficient: String,
    pub branch: Option<usize>,
    pub t: f64,
    pub x: f64,
    pub l: f64,
    pub value: f64,
    pub bound: f64,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} violated by {}{} at sampled point (t={}, x={}, l={}): value {} vs bound {}",
            self.condition,
            self.coefficient,
            self.branch.map(|b| format!("_{b}")).unwrap_or_default(),
            self.t,
            self.x,
            self.l,
            self.value,
            self.bound
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub samples: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, c: Condition) -> bool {
        self.violations.iter().any(|v| v.condition == c)
    }
}

const SIMPLEX_TOL: f64 = 1e-9;
const LIPSCHITZ_STEP: f64 = 1e-3;

/// Randomized check of the regularity assumption on `window`.
///
/// Sample `k` depends only on `(seed, k)`, so a smaller budget checks a prefix
/// of the points a larger one does. The window corners are not special-cased;
/// the sampler draws `(t, x, l)` uniformly and, for each point, probes one
/// difference quotient per argument with step `1e-3` of the window size.
pub fn validate_coefficients<S: Scalar>(
    cs: &CoefficientSet<S>,
    window: &ValidationWindow<S>,
    sample_budget: usize,
    seed: u64,
) -> Result<ValidationReport> {
    if sample_budget == 0 {
        return Err(precondition("sample_budget must be >= 1"));
    }
    let n = cs.branches();
    let b = cs.bounds;
    let mut report = ValidationReport {
        samples: sample_budget,
        violations: Vec::new(),
    };
    let mut alpha = vec![S::zero(); n];
    let mut alpha2 = vec![S::zero(); n];
    // Running sup norms and Lipschitz quotients per branch: [sup, lip_t, lip_x, lip_l].
    let mut sig_acc = vec![[0.0f64; 4]; n];
    let mut drift_acc = vec![[0.0f64; 4]; n];
    let mut alpha_acc = vec![[0.0f64; 2]; n];
    let mut sig_wit = vec![(0.0, 0.0, 0.0); n];
    let mut drift_wit = vec![(0.0, 0.0, 0.0); n];
    let mut alpha_wit = vec![(0.0, 0.0, 0.0); n];

    let mut flagged = std::collections::HashSet::new();
    let mut push = |report: &mut ValidationReport, v: Violation| {
        let key = (v.condition, v.coefficient.clone(), v.branch);
        if flagged.insert(key) {
            report.violations.push(v);
        }
    };

    let steps = [
        window.t_max.to_f64_lossy() * LIPSCHITZ_STEP,
        window.x_max.to_f64_lossy() * LIPSCHITZ_STEP,
        window.l_max.to_f64_lossy() * LIPSCHITZ_STEP,
    ];

    for k in 0..sample_budget {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(k as u64);
        let t: f64 = rng.gen::<f64>() * window.t_max.to_f64_lossy();
        let x: f64 = rng.gen::<f64>() * window.x_max.to_f64_lossy();
        let l: f64 = rng.gen::<f64>() * window.l_max.to_f64_lossy();
        let (ts, ls) = (S::c(t), S::c(l));

        cs.alpha_into(ts, ls, &mut alpha);
        if alpha.iter().any(|a| !a.is_finite()) {
            push(
                &mut report,
                Violation {
                    condition: Condition::Evaluation,
                    coefficient: "alpha".into(),
                    branch: None,
                    t,
                    x,
                    l,
                    value: f64::NAN,
                    bound: f64::NAN,
                },
            );
        } else {
            let sum: f64 = alpha.iter().map(|a| a.to_f64_lossy()).sum();
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                push(
                    &mut report,
                    Violation {
                        condition: Condition::Simplex,
                        coefficient: "alpha".into(),
                        branch: None,
                        t,
                        x,
                        l,
                        value: sum,
                        bound: 1.0,
                    },
                );
            }
            for (i, a) in alpha.iter().enumerate() {
                if *a < b.a_lower {
                    push(
                        &mut report,
                        Violation {
                            condition: Condition::A,
                            coefficient: "alpha".into(),
                            branch: Some(i + 1),
                            t,
                            x,
                            l,
                            value: a.to_f64_lossy(),
                            bound: b.a_lower.to_f64_lossy(),
                        },
                    );
                }
            }
            // Lipschitz quotients of α in t and l.
            for (dir, h) in [(0usize, steps[0]), (1, steps[2])] {
                let (t2, l2) = if dir == 0 { (t + h, l) } else { (t, l + h) };
                cs.alpha_into(S::c(t2), S::c(l2), &mut alpha2);
                for i in 0..n {
                    let q = (alpha2[i] - alpha[i]).abs().to_f64_lossy() / h;
                    if q.is_finite() && q > alpha_acc[i][dir] {
                        alpha_acc[i][dir] = q;
                        alpha_wit[i] = (t, x, l);
                    }
                }
            }
        }

        for i in 0..n {
            let br = Branch::from_index(i);
            for (name, acc, wit, is_sigma) in [
                ("sigma", &mut sig_acc[i], &mut sig_wit[i], true),
                ("b", &mut drift_acc[i], &mut drift_wit[i], false),
            ] {
                let eval = |tt: f64, xx: f64, ll: f64| {
                    if is_sigma {
                        cs.sigma(br, S::c(tt), S::c(xx), S::c(ll))
                    } else {
                        cs.drift(br, S::c(tt), S::c(xx), S::c(ll))
                    }
                };
                let v = eval(t, x, l);
                if !v.is_finite() {
                    push(
                        &mut report,
                        Violation {
                            condition: Condition::Evaluation,
                            coefficient: name.into(),
                            branch: Some(i + 1),
                            t,
                            x,
                            l,
                            value: f64::NAN,
                            bound: f64::NAN,
                        },
                    );
                    continue;
                }
                if is_sigma && v < b.sigma_lower {
                    push(
                        &mut report,
                        Violation {
                            condition: Condition::E,
                            coefficient: name.into(),
                            branch: Some(i + 1),
                            t,
                            x,
                            l,
                            value: v.to_f64_lossy(),
                            bound: b.sigma_lower.to_f64_lossy(),
                        },
                    );
                }
                let vf = v.to_f64_lossy();
                if vf.abs() > acc[0] {
                    acc[0] = vf.abs();
                    *wit = (t, x, l);
                }
                for (dir, h) in steps.iter().enumerate() {
                    let (t2, x2, l2) = match dir {
                        0 => (t + h, x, l),
                        1 => (t, x + h, l),
                        _ => (t, x, l + h),
                    };
                    let v2 = eval(t2, x2, l2).to_f64_lossy();
                    let q = (v2 - vf).abs() / h;
                    if q.is_finite() && q > acc[dir + 1] {
                        acc[dir + 1] = q;
                        *wit = (t, x, l);
                    }
                }
            }
        }
    }

    for i in 0..n {
        for (name, acc, wit, bound) in [
            ("sigma", &sig_acc[i], sig_wit[i], b.lip_sigma),
            ("b", &drift_acc[i], drift_wit[i], b.lip_b),
        ] {
            let total: f64 = acc.iter().sum();
            // Declared zero coefficients get a tiny positive constant; allow for it.
            if total > bound.to_f64_lossy() * (1.0 + 1e-9) + 1e-9 {
                push(
                    &mut report,
                    Violation {
                        condition: Condition::R,
                        coefficient: name.into(),
                        branch: Some(i + 1),
                        t: wit.0,
                        x: wit.1,
                        l: wit.2,
                        value: total,
                        bound: bound.to_f64_lossy(),
                    },
                );
            }
        }
        let total = alpha_acc[i][0] + alpha_acc[i][1];
        if total > b.lip_alpha.to_f64_lossy() * (1.0 + 1e-9) + 1e-9 {
            push(
                &mut report,
                Violation {
                    condition: Condition::R,
                    coefficient: "alpha".into(),
                    branch: Some(i + 1),
                    t: alpha_wit[i].0,
                    x: alpha_wit[i].1,
                    l: alpha_wit[i].2,
                    value: total,
                    bound: b.lip_alpha.to_f64_lossy(),
                },
            );
        }
    }
    Ok(report)
}

/// How the spinning measure of the Brownian preset depends on local time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaMode {
    Constant,
    LDependent,
}

/// Built-in coefficient families loadable from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CoefficientPreset {
    /// Constant σ_i, b_i and α.
    Constant {
        sigma: Vec<f64>,
        drift: Vec<f64>,
        alpha: Vec<f64>,
    },
    /// σ_i = σ⁰_i + σ¹_i·min(l, cap), b_i likewise, α moving linearly from
    /// `alpha0` at l = 0 to `alpha1` at l = cap and constant beyond.
    AffineInL {
        sigma0: Vec<f64>,
        sigma1: Vec<f64>,
        drift0: Vec<f64>,
        drift1: Vec<f64>,
        alpha0: Vec<f64>,
        alpha1: Vec<f64>,
        l_cap: f64,
    },
    /// σ_i = σ⁰_i (1 + a sin ωt), b_i = c_i cos ωt, α = mix of `alpha0` and
    /// `alpha1` with weight (1 + sin ωt)/2.
    TrigInT {
        sigma0: Vec<f64>,
        sigma_amp: f64,
        drift_amp: Vec<f64>,
        omega: f64,
        alpha0: Vec<f64>,
        alpha1: Vec<f64>,
    },
    /// σ ≡ 1, b ≡ 0. `l-dependent` uses α(l) = far + (near − far)/(1 + rate·l).
    BrownianSpider {
        branches: usize,
        alpha_mode: AlphaMode,
        #[serde(default)]
        alpha: Option<Vec<f64>>,
        #[serde(default)]
        alpha_near: Option<Vec<f64>>,
        #[serde(default)]
        alpha_far: Option<Vec<f64>>,
        #[serde(default = "default_rate")]
        rate: f64,
    },
}

fn default_rate() -> f64 {
    1.0
}

fn check_simplex(name: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|a| !(*a > 0.0)) {
        return Err(SpiderError::Config(format!("{name}: components must be positive")));
    }
    let s: f64 = v.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return Err(SpiderError::Config(format!("{name}: components sum to {s}, expected 1")));
    }
    Ok(())
}

fn check_len(name: &str, v: &[f64], n: usize) -> Result<()> {
    if v.len() != n {
        return Err(SpiderError::Config(format!("{name}: expected {n} entries, got {}", v.len())));
    }
    Ok(())
}

fn min_of(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().map(|a| a.abs()).fold(0.0, f64::max)
}

/// Default spinning measures for the Brownian preset: a linear ramp far from
/// the vertex and its reverse near it. For two branches this is the reference
/// measure α₁(l) = 0.3 + 0.3/(1 + l).
pub fn default_alpha_pair(branches: usize) -> (Vec<f64>, Vec<f64>) {
    if branches == 2 {
        return (vec![0.6, 0.4], vec![0.3, 0.7]);
    }
    let total = (branches * (branches + 1) / 2) as f64;
    let far: Vec<f64> = (1..=branches).map(|k| k as f64 / total).collect();
    let near: Vec<f64> = far.iter().rev().copied().collect();
    (near, far)
}

impl CoefficientPreset {
    pub fn branches(&self) -> usize {
        match self {
            CoefficientPreset::Constant { alpha, .. } => alpha.len(),
            CoefficientPreset::AffineInL { alpha0, .. } => alpha0.len(),
            CoefficientPreset::TrigInT { alpha0, .. } => alpha0.len(),
            CoefficientPreset::BrownianSpider { branches, .. } => *branches,
        }
    }

    /// Two-branch Brownian spider with α₁(l) = 0.3 + 0.3/(1 + l).
    pub fn reference_l_dependent() -> Self {
        CoefficientPreset::BrownianSpider {
            branches: 2,
            alpha_mode: AlphaMode::LDependent,
            alpha: None,
            alpha_near: Some(vec![0.6, 0.4]),
            alpha_far: Some(vec![0.3, 0.7]),
            rate: 1.0,
        }
    }

    pub fn brownian_constant(alpha: Vec<f64>) -> Self {
        CoefficientPreset::BrownianSpider {
            branches: alpha.len(),
            alpha_mode: AlphaMode::Constant,
            alpha: Some(alpha),
            alpha_near: None,
            alpha_far: None,
            rate: 1.0,
        }
    }

    /// Instantiates the family with automatically derived bounds.
    pub fn build<S: Scalar>(&self) -> Result<CoefficientSet<S>> {
        let n = self.branches();
        if n < 2 {
            return Err(SpiderError::Config(format!("need at least 2 branches, got {n}")));
        }
        match self.clone() {
            CoefficientPreset::Constant { sigma, drift, alpha } => {
                check_len("sigma", &sigma, n)?;
                check_len("drift", &drift, n)?;
                check_simplex("alpha", &alpha)?;
                if min_of(&sigma) <= 0.0 {
                    return Err(SpiderError::Config("sigma must be positive".into()));
                }
                let bounds = CoefficientBounds {
                    a_lower: S::c(min_of(&alpha).min(1.0 / n as f64)),
                    sigma_lower: S::c(min_of(&sigma)),
                    lip_b: S::c(max_abs(&drift).max(1e-12)),
                    lip_sigma: S::c(max_abs(&sigma)),
                    lip_alpha: S::c(1e-12),
                };
                let (sg, dr): (Vec<S>, Vec<S>) =
                    (sigma.iter().map(|v| S::c(*v)).collect(), drift.iter().map(|v| S::c(*v)).collect());
                let al: Vec<S> = alpha.iter().map(|v| S::c(*v)).collect();
                let brownian = sigma.iter().all(|s| *s == 1.0) && drift.iter().all(|d| *d == 0.0);
                let mut cs = CoefficientSet::new(
                    "constant",
                    n,
                    move |i, _, _, _| sg[i.index()],
                    move |i, _, _, _| dr[i.index()],
                    move |_, _, out: &mut [S]| out.copy_from_slice(&al),
                    bounds,
                )?;
                cs.standard_brownian = brownian;
                Ok(cs)
            }
            CoefficientPreset::AffineInL {
                sigma0,
                sigma1,
                drift0,
                drift1,
                alpha0,
                alpha1,
                l_cap,
            } => {
                for (name, v) in [("sigma0", &sigma0), ("sigma1", &sigma1), ("drift0", &drift0), ("drift1", &drift1)] {
                    check_len(name, v, n)?;
                }
                check_len("alpha1", &alpha1, n)?;
                check_simplex("alpha0", &alpha0)?;
                check_simplex("alpha1", &alpha1)?;
                if !(l_cap > 0.0) {
                    return Err(SpiderError::Config("l_cap must be positive".into()));
                }
                let sig_lo = sigma0
                    .iter()
                    .zip(&sigma1)
                    .map(|(a, b)| a.min(a + b * l_cap))
                    .fold(f64::INFINITY, f64::min);
                if sig_lo <= 0.0 {
                    return Err(SpiderError::Config("sigma0 + sigma1*l must stay positive on [0, l_cap]".into()));
                }
                let sig_hi = sigma0.iter().zip(&sigma1).map(|(a, b)| a.abs().max((a + b * l_cap).abs())).fold(0.0, f64::max);
                let dr_hi = drift0.iter().zip(&drift1).map(|(a, b)| a.abs().max((a + b * l_cap).abs())).fold(0.0, f64::max);
                let slope_alpha = alpha0.iter().zip(&alpha1).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max) / l_cap;
                let bounds = CoefficientBounds {
                    a_lower: S::c(min_of(&alpha0).min(min_of(&alpha1)).min(1.0 / n as f64)),
                    sigma_lower: S::c(sig_lo),
                    lip_b: S::c((dr_hi + max_abs(&drift1)).max(1e-12)),
                    lip_sigma: S::c(sig_hi + max_abs(&sigma1)),
                    lip_alpha: S::c(slope_alpha.max(1e-12)),
                };
                let to_s = |v: &[f64]| v.iter().map(|a| S::c(*a)).collect::<Vec<S>>();
                let (s0, s1, d0, d1, a0, a1) = (
                    to_s(&sigma0),
                    to_s(&sigma1),
                    to_s(&drift0),
                    to_s(&drift1),
                    to_s(&alpha0),
                    to_s(&alpha1),
                );
                let cap = S::c(l_cap);
                CoefficientSet::new(
                    "affine-in-l",
                    n,
                    move |i, _, _, l| s0[i.index()] + s1[i.index()] * l.min(cap),
                    move |i, _, _, l| d0[i.index()] + d1[i.index()] * l.min(cap),
                    move |_, l, out: &mut [S]| {
                        let w = l.min(cap) / cap;
                        for k in 0..out.len() {
                            out[k] = (S::one() - w) * a0[k] + w * a1[k];
                        }
                    },
                    bounds,
                )
            }
            CoefficientPreset::TrigInT {
                sigma0,
                sigma_amp,
                drift_amp,
                omega,
                alpha0,
                alpha1,
            } => {
                check_len("sigma0", &sigma0, n)?;
                check_len("drift_amp", &drift_amp, n)?;
                check_len("alpha1", &alpha1, n)?;
                check_simplex("alpha0", &alpha0)?;
                check_simplex("alpha1", &alpha1)?;
                if !(sigma_amp.abs() < 1.0) || min_of(&sigma0) <= 0.0 {
                    return Err(SpiderError::Config("need sigma0 > 0 and |sigma_amp| < 1".into()));
                }
                let s_hi = max_abs(&sigma0) * (1.0 + sigma_amp.abs());
                let d_hi = max_abs(&drift_amp);
                let a_slope = alpha0.iter().zip(&alpha1).map(|(a, b)| (b - a).abs()).fold(0.0, f64::max) * omega.abs() / 2.0;
                let bounds = CoefficientBounds {
                    a_lower: S::c(min_of(&alpha0).min(min_of(&alpha1)).min(1.0 / n as f64)),
                    sigma_lower: S::c(min_of(&sigma0) * (1.0 - sigma_amp.abs())),
                    lip_b: S::c((d_hi * (1.0 + omega.abs())).max(1e-12)),
                    lip_sigma: S::c(s_hi + max_abs(&sigma0) * sigma_amp.abs() * omega.abs()),
                    lip_alpha: S::c(a_slope.max(1e-12)),
                };
                let to_s = |v: &[f64]| v.iter().map(|a| S::c(*a)).collect::<Vec<S>>();
                let (s0, da, a0, a1) = (to_s(&sigma0), to_s(&drift_amp), to_s(&alpha0), to_s(&alpha1));
                let (amp, om) = (S::c(sigma_amp), S::c(omega));
                CoefficientSet::new(
                    "trig-in-t",
                    n,
                    move |i, t, _, _| s0[i.index()] * (S::one() + amp * (om * t).sin()),
                    move |i, t, _, _| da[i.index()] * (om * t).cos(),
                    move |t, _, out: &mut [S]| {
                        let w = (S::one() + (om * t).sin()) / S::c(2.0);
                        for k in 0..out.len() {
                            out[k] = (S::one() - w) * a0[k] + w * a1[k];
                        }
                    },
                    bounds,
                )
            }
            CoefficientPreset::BrownianSpider {
                branches,
                alpha_mode,
                alpha,
                alpha_near,
                alpha_far,
                rate,
            } => match alpha_mode {
                AlphaMode::Constant => {
                    let alpha = alpha.unwrap_or_else(|| vec![1.0 / branches as f64; branches]);
                    check_len("alpha", &alpha, branches)?;
                    check_simplex("alpha", &alpha)?;
                    let a_lower = min_of(&alpha).min(1.0 / branches as f64);
                    let al: Vec<S> = alpha.iter().map(|v| S::c(*v)).collect();
                    CoefficientSet::brownian(
                        "brownian-spider/constant",
                        branches,
                        move |_, _, out: &mut [S]| out.copy_from_slice(&al),
                        S::c(a_lower),
                        S::c(1e-12),
                    )
                }
                AlphaMode::LDependent => {
                    let (dn, df) = default_alpha_pair(branches);
                    let near = alpha_near.unwrap_or(dn);
                    let far = alpha_far.unwrap_or(df);
                    check_len("alpha_near", &near, branches)?;
                    check_len("alpha_far", &far, branches)?;
                    check_simplex("alpha_near", &near)?;
                    check_simplex("alpha_far", &far)?;
                    if !(rate > 0.0) {
                        return Err(SpiderError::Config("rate must be positive".into()));
                    }
                    let a_lower = min_of(&near).min(min_of(&far)).min(1.0 / branches as f64);
                    let lip = rate * near.iter().zip(&far).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    let (nr, fr): (Vec<S>, Vec<S>) =
                        (near.iter().map(|v| S::c(*v)).collect(), far.iter().map(|v| S::c(*v)).collect());
                    let r = S::c(rate);
                    CoefficientSet::brownian(
                        "brownian-spider/l-dependent",
                        branches,
                        move |_, l, out: &mut [S]| {
                            let w = S::one() / (S::one() + r * l);
                            for k in 0..out.len() {
                                out[k] = fr[k] + (nr[k] - fr[k]) * w;
                            }
                        },
                        S::c(a_lower),
                        S::c(lip),
                    )
                }
            },
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SpiderError::Config(format!("coefficient preset: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn const_set(alpha: [f64; 2], sigma_lower: f64) -> CoefficientSet<f64> {
        let bounds = CoefficientBounds {
            a_lower: 0.25,
            sigma_lower,
            lip_b: 1.0,
            lip_sigma: 1.0,
            lip_alpha: 1.0,
        };
        CoefficientSet::new(
            "t",
            2,
            |_, _, _, _| 1.0,
            |_, _, _, _| 0.0,
            move |_, _, out: &mut [f64]| out.copy_from_slice(&alpha),
            bounds,
        )
        .unwrap()
    }

    #[test]
    fn constants_within_bounds_pass() {
        let cs = const_set([0.3, 0.7], 0.5);
        let r = validate_coefficients(&cs, &ValidationWindow::default(), 200, 1).unwrap();
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn alpha_below_lower_bound_is_reported() {
        let cs = const_set([0.1, 0.9], 0.5);
        let r = validate_coefficients(&cs, &ValidationWindow::default(), 10, 1).unwrap();
        assert!(r.has(Condition::A));
        let v = r.violations.iter().find(|v| v.condition == Condition::A).unwrap();
        assert_eq!(v.branch, Some(1));
        assert!(v.to_string().starts_with("(A) violated"));
    }

    #[test]
    fn degenerate_sigma_is_reported_with_witness() {
        let bounds = CoefficientBounds {
            a_lower: 0.25,
            sigma_lower: 0.1,
            lip_b: 1.0,
            lip_sigma: 10.0,
            lip_alpha: 1.0,
        };
        let cs = CoefficientSet::new(
            "x",
            2,
            |i, _, x, _| if i.label() == 1 { x } else { 1.0 },
            |_, _, _, _| 0.0,
            |_, _, out: &mut [f64]| out.copy_from_slice(&[0.5, 0.5]),
            bounds,
        )
        .unwrap();
        let window = ValidationWindow { t_max: 1.0, x_max: 2.0, l_max: 1.0 };
        let r = validate_coefficients(&cs, &window, 500, 3).unwrap();
        let v = r.violations.iter().find(|v| v.condition == Condition::E).expect("(E) violation");
        assert!(v.x < 0.1);
        assert_eq!(v.branch, Some(1));
    }

    #[test]
    fn non_finite_coefficient_is_an_evaluation_violation() {
        let bounds = CoefficientBounds {
            a_lower: 0.25,
            sigma_lower: 0.1,
            lip_b: 1.0,
            lip_sigma: 10.0,
            lip_alpha: 1.0,
        };
        let cs = CoefficientSet::new(
            "nan",
            2,
            |_, _, _, _| 1.0,
            |_, _, x, _| if x > 1.0 { f64::NAN } else { 0.0 },
            |_, _, out: &mut [f64]| out.copy_from_slice(&[0.5, 0.5]),
            bounds,
        )
        .unwrap();
        let r = validate_coefficients(&cs, &ValidationWindow::default(), 50, 3).unwrap();
        assert!(r.has(Condition::Evaluation));
    }

    #[test]
    fn lipschitz_excess_and_simplex_defect_are_reported() {
        let bounds = CoefficientBounds {
            a_lower: 0.1,
            sigma_lower: 0.5,
            lip_b: 0.5,
            lip_sigma: 2.0,
            lip_alpha: 1.0,
        };
        let cs = CoefficientSet::new(
            "steep",
            2,
            |_, _, _, _| 1.0,
            |_, _, x: f64, _| (3.0 * x).sin(),
            |_, _, out: &mut [f64]| out.copy_from_slice(&[0.5, 0.6]),
            bounds,
        )
        .unwrap();
        let r = validate_coefficients(&cs, &ValidationWindow::default(), 100, 3).unwrap();
        assert!(r.has(Condition::R));
        assert!(r.has(Condition::Simplex));
    }

    #[test]
    fn zero_budget_is_rejected() {
        let cs = const_set([0.3, 0.7], 0.5);
        assert!(validate_coefficients(&cs, &ValidationWindow::default(), 0, 1).is_err());
    }

    #[test]
    fn reference_preset_matches_closed_form() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        assert!(cs.is_standard_brownian());
        for &l in &[0.0, 0.5, 1.0, 3.0] {
            let a = cs.alpha(0.0, l);
            assert!((a[0] - (0.3 + 0.3 / (1.0 + l))).abs() < 1e-15);
            assert!((a[0] + a[1] - 1.0).abs() < 1e-15);
        }
        let r = validate_coefficients(&cs, &ValidationWindow::default(), 300, 9).unwrap();
        assert!(r.is_valid(), "{:?}", r.violations);
    }

    #[test]
    fn presets_parse_and_validate() {
        let texts = [
            r#"{"family":"constant","sigma":[1.0,2.0,0.5],"drift":[0.1,0.0,-0.2],"alpha":[0.2,0.3,0.5]}"#,
            r#"{"family":"affine-in-l","sigma0":[1.0,1.0],"sigma1":[0.1,-0.1],"drift0":[0.0,0.2],"drift1":[0.1,0.0],"alpha0":[0.5,0.5],"alpha1":[0.3,0.7],"l_cap":2.0}"#,
            r#"{"family":"trig-in-t","sigma0":[1.0,1.5],"sigma_amp":0.3,"drift_amp":[0.2,-0.1],"omega":3.0,"alpha0":[0.4,0.6],"alpha1":[0.7,0.3]}"#,
            r#"{"family":"brownian-spider","branches":3,"alpha_mode":"l-dependent"}"#,
        ];
        for text in texts {
            let preset = CoefficientPreset::from_json(text).unwrap();
            let cs: CoefficientSet<f64> = preset.build().unwrap();
            let r = validate_coefficients(&cs, &ValidationWindow::default(), 300, 5).unwrap();
            assert!(r.is_valid(), "{text}: {:?}", r.violations);
        }
        assert!(CoefficientPreset::from_json(r#"{"family":"constant","sigma":[1,1],"drift":[0,0],"alpha":[0.5,0.5],"bogus":1}"#).is_err());
        assert!(CoefficientPreset::from_json(r#"{"family":"constant","sigma":[1,1],"drift":[0,0],"alpha":[0.5,0.6]}"#)
            .unwrap()
            .build::<f64>()
            .is_err());
    }

    #[test]
    fn permutation_swaps_alpha_components() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        let p = cs.permuted(&[1, 0]).unwrap();
        let (a, b) = (cs.alpha(0.0, 0.7), p.alpha(0.0, 0.7));
        assert_eq!(a[0], b[1]);
        assert_eq!(a[1], b[0]);
    }
}
