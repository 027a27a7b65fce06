//! Two-branch face of the spider: the skew SDE
//! `dy = σ̃ dW + b̃ dt + β(t, ℓ⁰) dℓ⁰` on the real line.
//!
//! Branch 2 carries `y > 0`, branch 1 carries `y < 0`, and the signed process
//! is `y = (2i - 3)·x`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::coefficients::{CoefficientBounds, CoefficientSet};
use crate::error::{precondition, Result, SpiderError};
use crate::junction::{Branch, JunctionPoint, SpiderState};
use crate::scalar::Scalar;
use crate::simulator::{map_paths, simulate_path, PathSource, SchemeConfig, SimulatedSource, Step, StepVisitor};

type LineCoefficient<S> = Arc<dyn Fn(S, S, S) -> S + Send + Sync>;
type VertexCoefficient<S> = Arc<dyn Fn(S, S) -> S + Send + Sync>;

/// Coefficients of the skew SDE. The one-sided limits `σ̃(t, 0±, l)` are
/// given explicitly.
#[derive(Clone)]
pub struct SkewCoefficients<S> {
    pub label: String,
    sigma: LineCoefficient<S>,
    drift: LineCoefficient<S>,
    alpha: VertexCoefficient<S>,
    sigma_plus: VertexCoefficient<S>,
    sigma_minus: VertexCoefficient<S>,
    pub a_lower: S,
    pub sigma_lower: S,
    /// Upper bound on `|σ̃|`, also used as its Lipschitz constant.
    pub sigma_upper: S,
    pub lip_b: S,
    pub lip_alpha: S,
    standard_brownian: bool,
}

impl<S: Scalar> std::fmt::Debug for SkewCoefficients<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SkewCoefficients")
            .field("label", &self.label)
            .field("a_lower", &self.a_lower)
            .field("sigma_lower", &self.sigma_lower)
            .field("sigma_upper", &self.sigma_upper)
            .finish()
    }
}

impl<S: Scalar> SkewCoefficients<S> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<Fs, Fb, Fa, Fp, Fm>(
        label: impl Into<String>,
        sigma: Fs,
        drift: Fb,
        alpha: Fa,
        sigma_plus: Fp,
        sigma_minus: Fm,
        a_lower: S,
        sigma_lower: S,
        sigma_upper: S,
        lip_b: S,
        lip_alpha: S,
    ) -> Result<Self>
    where
        Fs: Fn(S, S, S) -> S + Send + Sync + 'static,
        Fb: Fn(S, S, S) -> S + Send + Sync + 'static,
        Fa: Fn(S, S) -> S + Send + Sync + 'static,
        Fp: Fn(S, S) -> S + Send + Sync + 'static,
        Fm: Fn(S, S) -> S + Send + Sync + 'static,
    {
        if !(a_lower > S::zero() && a_lower <= S::c(0.5)) {
            return Err(precondition(format!("a_lower must lie in (0, 1/2], got {a_lower}")));
        }
        if !(sigma_lower > S::zero() && sigma_upper >= sigma_lower) {
            return Err(precondition("need 0 < sigma_lower <= sigma_upper"));
        }
        if !(lip_b > S::zero() && lip_alpha > S::zero()) {
            return Err(precondition("Lipschitz bounds must be positive"));
        }
        Ok(Self {
            label: label.into(),
            sigma: Arc::new(sigma),
            drift: Arc::new(drift),
            alpha: Arc::new(alpha),
            sigma_plus: Arc::new(sigma_plus),
            sigma_minus: Arc::new(sigma_minus),
            a_lower,
            sigma_lower,
            sigma_upper,
            lip_b,
            lip_alpha,
            standard_brownian: false,
        })
    }

    /// `σ̃ ≡ 1`, `b̃ ≡ 0` with skewness `α(t, l)`.
    pub fn brownian<Fa>(label: impl Into<String>, alpha: Fa, a_lower: S, lip_alpha: S) -> Result<Self>
    where
        Fa: Fn(S, S) -> S + Send + Sync + 'static,
    {
        let mut sk = Self::new(
            label,
            |_, _, _| S::one(),
            |_, _, _| S::zero(),
            alpha,
            |_, _| S::one(),
            |_, _| S::one(),
            a_lower,
            S::one(),
            S::one(),
            S::c(1e-12),
            lip_alpha.max(S::c(1e-12)),
        )?;
        sk.standard_brownian = true;
        Ok(sk)
    }

    pub fn sigma(&self, t: S, y: S, l: S) -> S {
        (self.sigma)(t, y, l)
    }

    pub fn drift(&self, t: S, y: S, l: S) -> S {
        (self.drift)(t, y, l)
    }

    pub fn alpha(&self, t: S, l: S) -> S {
        (self.alpha)(t, l)
    }

    pub fn sigma_plus(&self, t: S, l: S) -> S {
        (self.sigma_plus)(t, l)
    }

    pub fn sigma_minus(&self, t: S, l: S) -> S {
        (self.sigma_minus)(t, l)
    }
}

/// `(α₁, α₂)` for given `α`, `σ̃(0+)`, `σ̃(0−)`.
pub fn alpha_pair<S: Scalar>(alpha: S, sigma_plus: S, sigma_minus: S) -> Result<(S, S)> {
    let up = alpha * sigma_plus;
    let down = (S::one() - alpha) * sigma_minus;
    let den = up + down;
    if !(den > S::zero()) || !den.is_finite() {
        return Err(precondition(format!(
            "skewness denominator vanishes: alpha={alpha}, sigma(0+)={sigma_plus}, sigma(0-)={sigma_minus}"
        )));
    }
    Ok((down / den, up / den))
}

/// Skewness parameter from its ingredients.
pub fn beta_from<S: Scalar>(alpha: S, sigma_plus: S, sigma_minus: S) -> Result<S> {
    let up = alpha * sigma_plus;
    let down = (S::one() - alpha) * sigma_minus;
    let den = up + down;
    if !(den > S::zero()) || !den.is_finite() {
        return Err(precondition(format!(
            "skewness denominator vanishes: alpha={alpha}, sigma(0+)={sigma_plus}, sigma(0-)={sigma_minus}"
        )));
    }
    Ok((up - down) / den)
}

/// `β(s, l) = (α σ̃(0+) − (1−α) σ̃(0−)) / (α σ̃(0+) + (1−α) σ̃(0−))`.
pub fn beta<S: Scalar>(s: S, l: S, sk: &SkewCoefficients<S>) -> Result<S> {
    let (sp, sm) = (sk.sigma_plus(s, l), sk.sigma_minus(s, l));
    if !(sp > S::zero() && sm > S::zero()) {
        return Err(precondition(format!(
            "one-sided volatilities must be positive at (s={s}, l={l}): sigma(0+)={sp}, sigma(0-)={sm}"
        )));
    }
    beta_from(sk.alpha(s, l), sp, sm)
}

/// Two-branch spider with `σ₂(x) = σ̃(x)`, `σ₁(x) = σ̃(−x)`,
/// `b₂(x) = b̃(x)`, `b₁(x) = −b̃(−x)` and the reweighted spinning measure.
pub fn to_spider<S: Scalar>(sk: &SkewCoefficients<S>) -> Result<CoefficientSet<S>> {
    let (a, sp, sm) = (sk.alpha.clone(), sk.sigma_plus.clone(), sk.sigma_minus.clone());
    let spinning = move |t: S, l: S, out: &mut [S]| match alpha_pair(a(t, l), sp(t, l), sm(t, l)) {
        Ok((a1, a2)) => {
            out[0] = a1;
            out[1] = a2;
        }
        Err(_) => out.fill(S::nan()),
    };
    let label = format!("{}/spider", sk.label);
    // α₂ ≥ a·σ_lo/σ_hi since the denominator is at most σ_hi.
    let a_lower = (sk.a_lower * sk.sigma_lower / sk.sigma_upper).min(S::c(0.5));
    let ratio = sk.sigma_upper / sk.sigma_lower;
    let lip_alpha = sk.lip_alpha * ratio * ratio + sk.sigma_upper / sk.sigma_lower;
    if sk.standard_brownian {
        return CoefficientSet::brownian(label, 2, spinning, a_lower, sk.lip_alpha);
    }
    let (s1, s2) = (sk.sigma.clone(), sk.sigma.clone());
    let (d1, d2) = (sk.drift.clone(), sk.drift.clone());
    let bounds = CoefficientBounds {
        a_lower,
        sigma_lower: sk.sigma_lower,
        lip_b: sk.lip_b,
        lip_sigma: sk.sigma_upper,
        lip_alpha,
    };
    CoefficientSet::new(
        label,
        2,
        move |i: Branch, t, x, l| if i.label() == 2 { s2(t, x, l) } else { s1(t, -x, l) },
        move |i: Branch, t, x, l| if i.label() == 2 { d2(t, x, l) } else { -d1(t, -x, l) },
        spinning,
        bounds,
    )
}

/// Spider state of the real-line point `y0` at time 0. The origin is put on
/// branch 1; its label is redrawn at the first step anyway.
pub fn spider_start<S: Scalar>(y0: S) -> Result<SpiderState<S>> {
    if !y0.is_finite() {
        return Err(precondition("y0 must be finite"));
    }
    let branch = if y0 > S::zero() { Branch::new(2) } else { Branch::new(1) };
    SpiderState::new(S::zero(), JunctionPoint::new(branch, y0.abs())?, S::zero())
}

/// `(2i − 3)·x`.
#[inline]
pub fn signed<S: Scalar>(x: S, branch: Branch) -> S {
    if branch.label() == 2 {
        x
    } else {
        -x
    }
}

/// Signed path with the spider's local time.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewPath<S> {
    pub times: Vec<S>,
    pub y: Vec<S>,
    pub l: Vec<S>,
    pub branch: Vec<Branch>,
}

pub fn simulate_skew<S: Scalar>(sk: &SkewCoefficients<S>, y0: S, cfg: &SchemeConfig) -> Result<SkewPath<S>> {
    let cs = to_spider(sk)?;
    let path = simulate_path(&cs, &spider_start(y0)?, cfg)?;
    Ok(SkewPath {
        y: path.x.iter().zip(&path.branch).map(|(&x, &b)| signed(x, b)).collect(),
        times: path.times,
        l: path.l,
        branch: path.branch,
    })
}

/// Terminal `(y_T, l_T)` of `n` independent skew paths (seeds as in
/// [`crate::simulator::simulate_ensemble`]).
pub fn skew_terminal<S: Scalar>(sk: &SkewCoefficients<S>, y0: S, cfg: &SchemeConfig, n: usize) -> Result<Vec<(S, S)>> {
    let cs = to_spider(sk)?;
    let source = SimulatedSource {
        cs: &cs,
        init: spider_start(y0)?,
        cfg: *cfg,
        n,
    };
    let src: &dyn PathSource<S> = &source;
    map_paths(src, |_| SignedEnd::default(), |v| (v.y, v.l))
}

#[derive(Default)]
struct SignedEnd<S> {
    y: S,
    l: S,
}

impl<S: Scalar> StepVisitor<S> for SignedEnd<S> {
    fn begin(&mut self, init: &SpiderState<S>) {
        self.y = signed(init.x(), init.branch());
        self.l = init.l;
    }

    fn step(&mut self, s: &Step<S>) {
        self.y = signed(s.x1, s.branch1);
        self.l = s.l1;
    }
}

/// Skew SDE families loadable from JSON: `σ̃ = σ±` and `b̃ = b±` on the two
/// half-lines, `α(l) = far + (near − far)/(1 + rate·l)` (constant when
/// `alpha_far` is absent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkewPreset {
    pub alpha: f64,
    #[serde(default)]
    pub alpha_far: Option<f64>,
    #[serde(default = "unit")]
    pub rate: f64,
    #[serde(default = "unit")]
    pub sigma_plus: f64,
    #[serde(default = "unit")]
    pub sigma_minus: f64,
    #[serde(default)]
    pub drift_plus: f64,
    #[serde(default)]
    pub drift_minus: f64,
}

fn unit() -> f64 {
    1.0
}

impl SkewPreset {
    pub fn constant(alpha: f64) -> Self {
        Self {
            alpha,
            alpha_far: None,
            rate: 1.0,
            sigma_plus: 1.0,
            sigma_minus: 1.0,
            drift_plus: 0.0,
            drift_minus: 0.0,
        }
    }

    pub fn build<S: Scalar>(&self) -> Result<SkewCoefficients<S>> {
        let far = self.alpha_far.unwrap_or(self.alpha);
        for (name, a) in [("alpha", self.alpha), ("alpha_far", far)] {
            if !(a > 0.0 && a < 1.0) {
                return Err(SpiderError::Config(format!("{name} must lie in (0, 1), got {a}")));
            }
        }
        if !(self.sigma_plus > 0.0 && self.sigma_minus > 0.0) {
            return Err(SpiderError::Config("sigma_plus and sigma_minus must be positive".into()));
        }
        if !(self.rate > 0.0) {
            return Err(SpiderError::Config("rate must be positive".into()));
        }
        let (near, far_s, rate) = (S::c(self.alpha), S::c(far), S::c(self.rate));
        let alpha = move |_: S, l: S| far_s + (near - far_s) / (S::one() + rate * l);
        let a_lower = S::c(self.alpha.min(far).min(1.0 - self.alpha).min(1.0 - far));
        let lip_alpha = S::c((self.rate * (self.alpha - far).abs()).max(1e-12));
        let brownian =
            self.sigma_plus == 1.0 && self.sigma_minus == 1.0 && self.drift_plus == 0.0 && self.drift_minus == 0.0;
        if brownian {
            return SkewCoefficients::brownian("skew-brownian", alpha, a_lower, lip_alpha);
        }
        let (sp, sm) = (S::c(self.sigma_plus), S::c(self.sigma_minus));
        let (dp, dm) = (S::c(self.drift_plus), S::c(self.drift_minus));
        SkewCoefficients::new(
            "skew-piecewise",
            move |_, y: S, _| if y >= S::zero() { sp } else { sm },
            move |_, y: S, _| if y >= S::zero() { dp } else { dm },
            alpha,
            move |_, _| sp,
            move |_, _| sm,
            a_lower,
            sp.min(sm),
            sp.max(sm),
            dp.abs().max(dm.abs()).max(S::c(1e-12)),
            lip_alpha,
        )
    }
}
