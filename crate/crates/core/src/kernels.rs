//! Transition kernels of the Brownian spider (`σ ≡ 1`, `b ≡ 0`) with a
//! spinning measure that may depend on time and local time.
//!
//! A kernel is a mixed measure in `(y, j, ℓ)` where `ℓ` is the local-time
//! increment: a density part on `ℓ > 0` and, for sources off the vertex, an
//! atom on `{ℓ = 0, j = i}` carrying the killed heat kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coefficients::CoefficientSet;
use crate::error::{precondition, Result};
use crate::junction::Branch;
use crate::quadrature::{integrate, integrate_with, QuadOptions};
use crate::scalar::Scalar;

/// Which prefactor to use in the joint density of
/// `(|W_t|, L⁰_t, G_t)` (`G_t` the last zero before `t`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TripleDensityForm {
    /// `2/√(2πs³)·e^{-ℓ²/2s}` without a factor `ℓ`. Its total mass is infinite.
    Printed,
    /// `2ℓ/√(2πs³)·e^{-ℓ²/2s}`, the law of `(|W_t|, L⁰_t, G_t)`.
    #[default]
    LocalTimeWeighted,
}

/// Time argument of `α` in the kernel from the vertex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AlphaTime {
    /// `α_j(s, l + ℓ)`: the source time.
    Start,
    /// `α_j(s + u, l + ℓ)`: the time of the last vertex visit.
    #[default]
    LastZero,
}

/// First-passage density of Brownian motion from `a > 0` to 0 at time `u`.
#[inline]
pub fn first_passage_density<S: Scalar>(a: S, u: S) -> S {
    if !(a > S::zero()) || !(u > S::zero()) {
        return S::zero();
    }
    a / (S::TAU() * u * u * u).sqrt() * (-a * a / (S::c(2.0) * u)).exp()
}

/// Heat kernel `e^{-z²/2τ}/√(2πτ)`.
#[inline]
pub fn heat_kernel<S: Scalar>(z: S, tau: S) -> S {
    (-z * z / (S::c(2.0) * tau)).exp() / (S::TAU() * tau).sqrt()
}

/// Joint density of `(|W_t|, L⁰_t, G_t)` at `(x, ℓ, s)` in the chosen form.
pub fn triple_density<S: Scalar>(form: TripleDensityForm, x: S, ell: S, s: S, t: S) -> S {
    if !(x > S::zero()) || !(ell > S::zero()) || !(s > S::zero()) || s > t {
        return S::zero();
    }
    prefactor(form, ell) * first_passage_density(ell, s) * first_passage_density(x, t - s)
}

#[inline]
fn prefactor<S: Scalar>(form: TripleDensityForm, ell: S) -> S {
    match form {
        TripleDensityForm::LocalTimeWeighted => S::c(2.0),
        TripleDensityForm::Printed => S::c(2.0) / ell,
    }
}

/// Mass of the triple density over `x > 0`, `ℓ > ell_floor`, `0 < s < t`,
/// by nested quadrature on a truncated domain.
pub fn triple_density_mass<S: Scalar>(form: TripleDensityForm, t: S, ell_floor: S, opts: &QuadOptions) -> Result<S> {
    if !(t > S::zero()) {
        return Err(precondition("t must be positive"));
    }
    let reach = S::c(12.0) * t.sqrt();
    let half = t / S::c(2.0);
    let r = integrate_with(
        |ell: S| {
            integrate_with(
                |x: S| {
                    // Split the s-integral where each first-passage factor peaks.
                    let a = integrate(|s: S| triple_density(form, x, ell, s, t), S::zero(), half, opts)?;
                    let b = integrate(|s: S| triple_density(form, x, ell, s, t), half, t, opts)?;
                    Ok(a.value + b.value)
                },
                S::zero(),
                reach,
                opts,
            )
            .map(|r| r.value)
        },
        ell_floor.max(S::zero()),
        reach,
        opts,
    )?;
    Ok(r.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelOptions {
    pub form: TripleDensityForm,
    pub alpha_time: AlphaTime,
    /// Tolerances of every time integral.
    pub inner_abs_tol: f64,
    pub inner_rel_tol: f64,
    /// Tolerance of the `(y, ℓ)` integrals behind masses and bins.
    pub entry_tol: f64,
    /// Truncation of `y` and `ℓ` in multiples of `√(t - s)`.
    pub truncation: f64,
}

impl Default for KernelOptions {
    fn default() -> Self {
        Self {
            form: TripleDensityForm::LocalTimeWeighted,
            alpha_time: AlphaTime::LastZero,
            inner_abs_tol: 1e-8,
            inner_rel_tol: 1e-8,
            entry_tol: 1e-6,
            truncation: 10.0,
        }
    }
}

impl KernelOptions {
    fn inner(&self) -> QuadOptions {
        QuadOptions {
            abs_tol: self.inner_abs_tol,
            rel_tol: self.inner_rel_tol,
            max_intervals: 2000,
        }
    }

    fn outer(&self) -> QuadOptions {
        QuadOptions {
            abs_tol: self.entry_tol,
            rel_tol: self.entry_tol,
            max_intervals: 2000,
        }
    }
}

/// Source point of a kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSource<S> {
    /// The vertex at time `s` with local time `l`.
    Junction { s: S, l: S },
    /// `(x, i)` with `x > 0` at time `s` with local time `l`.
    Point { s: S, x: S, branch: Branch, l: S },
}

impl<S: Scalar> KernelSource<S> {
    pub fn time(&self) -> S {
        match *self {
            KernelSource::Junction { s, .. } | KernelSource::Point { s, .. } => s,
        }
    }

    pub fn local_time(&self) -> S {
        match *self {
            KernelSource::Junction { l, .. } | KernelSource::Point { l, .. } => l,
        }
    }
}

/// Masses of a kernel with their error budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMasses {
    pub atom: f64,
    pub continuous: Vec<f64>,
    pub branch: Vec<f64>,
    pub total: f64,
    pub quadrature_error: f64,
    /// Bound on the mass outside the truncated domain.
    pub tail_bound: f64,
}

/// Mixed transition measure from a source to time `t`.
#[derive(Clone)]
pub struct SpiderKernel<'a, S: Scalar> {
    cs: &'a CoefficientSet<S>,
    pub source: KernelSource<S>,
    pub t: S,
    pub opts: KernelOptions,
}

fn brownian_only<S: Scalar>(cs: &CoefficientSet<S>) -> Result<()> {
    if !cs.is_standard_brownian() {
        return Err(precondition(format!(
            "kernels need sigma = 1 and b = 0; coefficient set '{}' is not declared Brownian",
            cs.label
        )));
    }
    Ok(())
}

/// Kernel from the vertex at time `s` with local time `l` to time `t`.
pub fn kernel_from_junction<'a, S: Scalar>(
    cs: &'a CoefficientSet<S>,
    s: S,
    l: S,
    t: S,
    opts: KernelOptions,
) -> Result<SpiderKernel<'a, S>> {
    brownian_only(cs)?;
    if !(t > s) || !(l >= S::zero()) {
        return Err(precondition("need t > s and l >= 0"));
    }
    Ok(SpiderKernel {
        cs,
        source: KernelSource::Junction { s, l },
        t,
        opts,
    })
}

/// Kernel from `(x, i)`, `x > 0`, at time `s` with local time `l`.
pub fn kernel_general<'a, S: Scalar>(
    cs: &'a CoefficientSet<S>,
    source: KernelSource<S>,
    t: S,
    opts: KernelOptions,
) -> Result<SpiderKernel<'a, S>> {
    brownian_only(cs)?;
    match source {
        KernelSource::Junction { s, l } => kernel_from_junction(cs, s, l, t, opts),
        KernelSource::Point { s, x, branch, l } => {
            if !(x > S::zero()) {
                return Err(precondition("general kernel needs x > 0; use the vertex kernel"));
            }
            if branch.0 == 0 || branch.label() > cs.branches() {
                return Err(precondition(format!("branch {branch} outside 1..={}", cs.branches())));
            }
            if !(t > s) || !(l >= S::zero()) {
                return Err(precondition("need t > s and l >= 0"));
            }
            Ok(SpiderKernel { cs, source, t, opts })
        }
    }
}

// e^{-w²/2} has decayed by e^{-40} this far past the lower limit.
const GAUSS_REACH: f64 = 9.0;

impl<'a, S: Scalar> SpiderKernel<'a, S> {
    pub fn branches(&self) -> usize {
        self.cs.branches()
    }

    pub fn horizon(&self) -> S {
        self.t - self.source.time()
    }

    /// Truncation radius used for `y` and `ℓ`.
    pub fn reach(&self) -> S {
        let base = S::c(self.opts.truncation) * self.horizon().sqrt();
        match self.source {
            KernelSource::Junction { .. } => base,
            KernelSource::Point { x, .. } => base + x,
        }
    }

    /// `∫₀^τ c(ℓ) h_ℓ(u) h_y(τ-u) α_j(time(u), l+ℓ) du`, the density of the
    /// vertex kernel started at `start` over a horizon `tau`.
    fn vertex_density(&self, y: S, j: Branch, ell: S, start: S, tau: S, alpha_time: AlphaTime) -> Result<S> {
        if !(y > S::zero()) || !(ell > S::zero()) || !(tau > S::zero()) {
            return Ok(S::zero());
        }
        let lt = self.source.local_time() + ell;
        let mut buf = vec![S::zero(); self.cs.branches()];
        let mut alpha = |u: S| -> S {
            let time = match alpha_time {
                AlphaTime::Start => start,
                AlphaTime::LastZero => start + u,
            };
            self.cs.alpha_into(time, lt, &mut buf);
            buf[j.index()]
        };
        let two = S::c(2.0);
        let gauss = (two / S::PI()).sqrt();
        let half = tau / two;
        let opts = self.opts.inner();
        let reach = S::c(GAUSS_REACH);

        // u ∈ (0, τ/2] with u = ℓ²/w².
        let lo = ell / half.sqrt();
        let first = integrate(
            |w: S| {
                let u = ell * ell / (w * w);
                gauss * (-w * w / two).exp() * first_passage_density(y, tau - u) * alpha(u)
            },
            lo,
            lo + reach,
            &opts,
        )?;
        // v = τ - u ∈ (0, τ/2] with v = y²/w².
        let lo = y / half.sqrt();
        let second = integrate(
            |w: S| {
                let v = y * y / (w * w);
                gauss * (-w * w / two).exp() * first_passage_density(ell, tau - v) * alpha(tau - v)
            },
            lo,
            lo + reach,
            &opts,
        )?;
        Ok(prefactor(self.opts.form, ell) * (first.value + second.value))
    }

    /// Density of the continuous part at `(y, j, ℓ)`, `ℓ` being the
    /// local-time increment.
    pub fn density(&self, y: S, j: Branch, ell: S) -> Result<S> {
        match self.source {
            KernelSource::Junction { s, .. } => self.vertex_density(y, j, ell, s, self.horizon(), self.opts.alpha_time),
            KernelSource::Point { s, x, .. } => {
                if !(y > S::zero()) || !(ell > S::zero()) {
                    return Ok(S::zero());
                }
                let tau = self.horizon();
                let two = S::c(2.0);
                let gauss = (two / S::PI()).sqrt();
                let lo = x / tau.sqrt();
                if lo > S::c(40.0) {
                    return Ok(S::zero());
                }
                // First passage to the vertex at u = x²/w².
                let r = integrate_with(
                    |w: S| {
                        let u = x * x / (w * w);
                        let inner = self.vertex_density(y, j, ell, s + u, tau - u, AlphaTime::LastZero)?;
                        Ok(gauss * (-w * w / two).exp() * inner)
                    },
                    lo,
                    lo + S::c(GAUSS_REACH),
                    &self.opts.inner(),
                )?;
                Ok(r.value)
            }
        }
    }

    /// Density of the atom on `{ℓ = 0, j = i}`.
    pub fn atom(&self, y: S, j: Branch) -> S {
        match self.source {
            KernelSource::Junction { .. } => S::zero(),
            KernelSource::Point { x, branch, .. } => {
                if j != branch || !(y >= S::zero()) {
                    return S::zero();
                }
                let tau = self.horizon();
                (heat_kernel(y - x, tau) - heat_kernel(y + x, tau)).max(S::zero())
            }
        }
    }

    /// Total atom mass, by quadrature of the killed heat kernel.
    pub fn atom_mass(&self) -> Result<S> {
        match self.source {
            KernelSource::Junction { .. } => Ok(S::zero()),
            KernelSource::Point { x, branch, .. } => {
                let tau = self.horizon();
                let w = S::c(GAUSS_REACH) * tau.sqrt();
                let lo = (x - w).max(S::zero());
                let opts = QuadOptions {
                    abs_tol: 1e-13,
                    rel_tol: 1e-12,
                    max_intervals: 2000,
                };
                // Split at the peak so the panels see a smooth bump.
                let a = integrate(|y| self.atom(y, branch), lo, x, &opts)?;
                let b = integrate(|y| self.atom(y, branch), x, x + w, &opts)?;
                Ok(a.value + b.value)
            }
        }
    }

    /// Atom mass on `y ∈ [y0, y1]`, by quadrature.
    pub fn atom_bin_mass(&self, j: Branch, y0: S, y1: S) -> Result<S> {
        match self.source {
            KernelSource::Point { branch, .. } if branch == j => {
                let opts = QuadOptions {
                    abs_tol: 1e-12,
                    rel_tol: 1e-10,
                    max_intervals: 2000,
                };
                Ok(integrate(|y| self.atom(y, j), y0, y1, &opts)?.value)
            }
            _ => Ok(S::zero()),
        }
    }

    /// Continuous-part mass on `[y0, y1] × [l0, l1]` for branch `j`.
    pub fn bin_mass(&self, j: Branch, y0: S, y1: S, l0: S, l1: S) -> Result<S> {
        let opts = self.opts.outer();
        let r = integrate_with(
            |ell: S| Ok(integrate_with(|y: S| self.density(y, j, ell), y0, y1, &opts)?.value),
            l0,
            l1,
            &opts,
        )?;
        Ok(r.value)
    }

    /// Density of the position `(y, j)` with the local time integrated out.
    pub fn position_density(&self, y: S, j: Branch) -> Result<S> {
        let r = integrate_with(|ell: S| self.density(y, j, ell), S::zero(), self.reach(), &self.opts.outer())?;
        Ok(r.value + self.atom(y, j))
    }

    /// Branch masses, total mass and error budget.
    pub fn masses(&self) -> Result<KernelMasses> {
        let reach = self.reach();
        let opts = self.opts.outer();
        let per_branch: Vec<Result<(f64, f64)>> = (0..self.branches())
            .into_par_iter()
            .map(|k| {
                let j = Branch::from_index(k);
                let mut err = S::zero();
                let r = integrate_with(
                    |ell: S| {
                        let inner = integrate_with(|y: S| self.density(y, j, ell), S::zero(), reach, &opts)?;
                        err = err + inner.error;
                        Ok(inner.value)
                    },
                    S::zero(),
                    reach,
                    &opts,
                )?;
                Ok((r.value.to_f64_lossy(), r.error.to_f64_lossy()))
            })
            .collect();
        let mut continuous = Vec::with_capacity(self.branches());
        let mut quadrature_error = 0.0;
        for r in per_branch {
            let (v, e) = r?;
            continuous.push(v);
            quadrature_error += e;
        }
        let atom = self.atom_mass()?.to_f64_lossy();
        let mut branch = continuous.clone();
        if let KernelSource::Point { branch: i, .. } = self.source {
            branch[i.index()] += atom;
        }
        let total = branch.iter().sum();
        // |W_τ| and L_τ are both half-normal; each exceeds R with
        // probability erfc(R/√(2τ)).
        let tau = self.horizon().to_f64_lossy();
        let r = (S::c(self.opts.truncation) * self.horizon().sqrt()).to_f64_lossy();
        let tail_bound = 2.0 * libm::erfc(r / (2.0 * tau).sqrt());
        Ok(KernelMasses {
            atom,
            continuous,
            branch,
            total,
            quadrature_error,
            tail_bound,
        })
    }
}

/// Per-branch total mass of a kernel.
pub fn branch_marginal<S: Scalar>(kernel: &SpiderKernel<'_, S>) -> Result<Vec<f64>> {
    Ok(kernel.masses()?.branch)
}

/// One row of a kernel slice export.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DensityRow {
    pub y: f64,
    pub j: usize,
    pub ell: f64,
    pub density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AtomRow {
    pub y: f64,
    pub j: usize,
    pub density: f64,
}

/// Evaluates the continuous density on a `(y, ℓ)` grid for every branch,
/// in parallel over grid points; rows are ordered by `(j, ℓ, y)`.
pub fn density_slice<S: Scalar>(kernel: &SpiderKernel<'_, S>, ys: &[f64], ells: &[f64]) -> Result<Vec<DensityRow>> {
    let points: Vec<(usize, f64, f64)> = (0..kernel.branches())
        .flat_map(|k| ells.iter().flat_map(move |&l| ys.iter().map(move |&y| (k, l, y))))
        .collect();
    points
        .par_iter()
        .map(|&(k, ell, y)| {
            let d = kernel.density(S::c(y), Branch::from_index(k), S::c(ell))?;
            Ok(DensityRow {
                y,
                j: k + 1,
                ell,
                density: d.to_f64_lossy(),
            })
        })
        .collect()
}

pub fn atom_slice<S: Scalar>(kernel: &SpiderKernel<'_, S>, ys: &[f64]) -> Vec<AtomRow> {
    (0..kernel.branches())
        .flat_map(|k| {
            ys.iter().map(move |&y| AtomRow {
                y,
                j: k + 1,
                density: kernel.atom(S::c(y), Branch::from_index(k)).to_f64_lossy(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coefficients::CoefficientPreset;

    fn constant(alpha: Vec<f64>) -> CoefficientSet<f64> {
        CoefficientPreset::brownian_constant(alpha).build().unwrap()
    }

    fn tight() -> KernelOptions {
        KernelOptions {
            inner_abs_tol: 1e-12,
            inner_rel_tol: 1e-11,
            ..KernelOptions::default()
        }
    }

    #[test]
    fn triple_density_support() {
        let f = TripleDensityForm::Printed;
        assert_eq!(triple_density(f, 0.5, 0.5, 1.5, 1.0), 0.0);
        assert_eq!(triple_density(f, 0.0, 0.5, 0.5, 1.0), 0.0);
        assert_eq!(triple_density(f, 0.5, 0.0, 0.5, 1.0), 0.0);
        assert!(triple_density(f, 0.5, 0.5, 0.5, 1.0) > 0.0);
    }

    #[test]
    fn triple_density_forms_differ_by_ell() {
        let (x, l, s, t): (f64, f64, f64, f64) = (0.7, 0.3, 0.4, 1.0);
        let p = triple_density(TripleDensityForm::Printed, x, l, s, t);
        let w = triple_density(TripleDensityForm::LocalTimeWeighted, x, l, s, t);
        assert!((w / p - l).abs() < 1e-14);
        // Written out directly.
        let direct = 2.0 * l / (2.0 * std::f64::consts::PI * s * s * s).sqrt() * (-l * l / (2.0 * s)).exp() * x
            / (2.0 * std::f64::consts::PI * (t - s).powi(3)).sqrt()
            * (-x * x / (2.0 * (t - s))).exp();
        assert!((w - direct).abs() < 1e-14 * direct);
    }

    #[test]
    fn non_brownian_sets_are_rejected() {
        let cs: CoefficientSet<f64> = CoefficientPreset::reference_l_dependent().build().unwrap();
        assert!(kernel_from_junction(&cs, 0.0, 0.0, 1.0, KernelOptions::default()).is_ok());
        let other: CoefficientSet<f64> = CoefficientPreset::Constant {
            sigma: vec![1.0, 1.0],
            drift: vec![0.1, 0.0],
            alpha: vec![0.5, 0.5],
        }
        .build()
        .unwrap();
        assert!(kernel_from_junction(&other, 0.0, 0.0, 1.0, KernelOptions::default()).is_err());
    }

    #[test]
    fn constant_alpha_vertex_density_matches_convolution_identity() {
        // ∫ 2 h_ℓ(u) h_y(τ-u) du = 2 h_{ℓ+y}(τ).
        let cs = constant(vec![0.3, 0.7]);
        let k = kernel_from_junction(&cs, 0.0, 0.0, 1.0, tight()).unwrap();
        for &(y, l) in &[(0.1, 0.1), (0.5, 1.2), (2.0, 0.05), (0.01, 3.0)] {
            for (j, a) in [(1, 0.3), (2, 0.7)] {
                let d = k.density(y, Branch::new(j), l).unwrap();
                let exact = a * 2.0 * first_passage_density(y + l, 1.0);
                assert!((d - exact).abs() < 1e-9 * exact.max(1e-3), "y={y} l={l}: {d} vs {exact}");
            }
        }
    }

    #[test]
    fn general_density_matches_convolution_identity() {
        let cs = constant(vec![0.5, 0.5]);
        let src = KernelSource::Point {
            s: 0.0,
            x: 0.4,
            branch: Branch::new(1),
            l: 0.0,
        };
        let k = kernel_general(&cs, src, 1.0, tight()).unwrap();
        for &(y, l) in &[(0.2, 0.3), (1.0, 0.5)] {
            let d = k.density(y, Branch::new(2), l).unwrap();
            let exact = 0.5 * 2.0 * first_passage_density(0.4 + y + l, 1.0);
            assert!((d - exact).abs() < 1e-8 * exact, "{d} vs {exact}");
        }
        assert!(k.atom(0.3, Branch::new(2)) == 0.0);
        assert!(k.atom(0.3, Branch::new(1)) > 0.0);
    }

    #[test]
    fn atom_vanishes_at_the_vertex() {
        let cs = constant(vec![0.5, 0.5]);
        let k = kernel_from_junction(&cs, 0.0, 1.0, 0.5, KernelOptions::default()).unwrap();
        assert_eq!(k.atom_mass().unwrap(), 0.0);
        assert_eq!(k.atom(0.3, Branch::new(1)), 0.0);
    }

    #[test]
    fn permutation_permutes_components() {
        let cs: CoefficientSet<f64> = CoefficientPreset::BrownianSpider {
            branches: 3,
            alpha_mode: crate::coefficients::AlphaMode::LDependent,
            alpha: None,
            alpha_near: Some(vec![0.5, 0.3, 0.2]),
            alpha_far: Some(vec![0.2, 0.3, 0.5]),
            rate: 1.0,
        }
        .build()
        .unwrap();
        let perm = [2, 0, 1];
        let pcs = cs.permuted(&perm).unwrap();
        let k = kernel_from_junction(&cs, 0.0, 0.2, 1.0, KernelOptions::default()).unwrap();
        let pk = kernel_from_junction(&pcs, 0.0, 0.2, 1.0, KernelOptions::default()).unwrap();
        for j in 0..3 {
            let a = k.density(0.4, Branch::from_index(perm[j]), 0.6).unwrap();
            let b = pk.density(0.4, Branch::from_index(j), 0.6).unwrap();
            assert_eq!(a, b);
        }
    }
}
