//! Globally adaptive Gauss–Kronrod (7/15) quadrature.
//!
//! The interval with the largest error estimate is bisected until the summed
//! estimate falls under `max(abs_tol, rel_tol·|I|)`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Result, SpiderError};
use crate::scalar::Scalar;

const XGK: [f64; 8] = [
    0.991_455_371_120_812_639_206_854_697_526_329,
    0.949_107_912_342_758_524_526_189_684_047_851,
    0.864_864_423_359_769_072_789_712_788_640_926,
    0.741_531_185_599_394_439_863_864_773_280_788,
    0.586_087_235_467_691_130_294_144_845_693_013,
    0.405_845_151_377_397_166_906_606_412_076_961,
    0.207_784_955_007_898_467_600_689_403_773_245,
    0.0,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224_963_732_008_058_970,
    0.063_092_092_629_978_553_290_700_663_189_204,
    0.104_790_010_322_250_183_839_876_322_541_518,
    0.140_653_259_715_525_918_745_189_590_510_238,
    0.169_004_726_639_267_902_826_583_426_598_550,
    0.190_350_578_064_785_409_913_256_402_421_014,
    0.204_432_940_075_298_892_414_161_999_234_649,
    0.209_482_141_084_727_828_012_999_174_891_714,
];

// Gauss weights for XGK[1], XGK[3], XGK[5], XGK[7].
const WG: [f64; 4] = [
    0.129_484_966_168_869_693_270_611_432_679_082,
    0.279_705_391_489_276_667_901_467_771_423_780,
    0.381_830_050_505_118_944_950_369_775_488_975,
    0.417_959_183_673_469_387_755_102_040_816_327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
}

impl Default for QuadOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_intervals: 4000,
        }
    }
}

impl QuadOptions {
    pub fn abs(tol: f64) -> Self {
        Self {
            abs_tol: tol,
            rel_tol: 0.0,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadResult<S> {
    pub value: S,
    pub error: S,
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy)]
struct Panel<S> {
    a: S,
    b: S,
    value: S,
    error: S,
}

impl<S: Scalar> PartialEq for Panel<S> {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}

impl<S: Scalar> Eq for Panel<S> {}

impl<S: Scalar> PartialOrd for Panel<S> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<S: Scalar> Ord for Panel<S> {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.partial_cmp(&other.error).unwrap_or(Ordering::Equal)
    }
}

fn gk15<S: Scalar, F: FnMut(S) -> Result<S>>(f: &mut F, a: S, b: S) -> Result<Panel<S>> {
    let half = (b - a) / S::c(2.0);
    let mid = a + half;
    let fc = f(mid)?;
    let mut kron = fc * S::c(WGK[7]);
    let mut gauss = fc * S::c(WG[3]);
    for j in 0..7 {
        let dx = half * S::c(XGK[j]);
        let s = f(mid - dx)? + f(mid + dx)?;
        kron = kron + s * S::c(WGK[j]);
        if j % 2 == 1 {
            gauss = gauss + s * S::c(WG[j / 2]);
        }
    }
    let value = kron * half;
    let error = ((kron - gauss) * half).abs();
    if !value.is_finite() {
        return Err(SpiderError::Quadrature {
            achieved: f64::NAN,
            tolerance: f64::NAN,
        });
    }
    Ok(Panel { a, b, value, error })
}

/// Integrates a fallible integrand over `[a, b]`.
pub fn integrate_with<S, F>(mut f: F, a: S, b: S, opts: &QuadOptions) -> Result<QuadResult<S>>
where
    S: Scalar,
    F: FnMut(S) -> Result<S>,
{
    if a == b {
        return Ok(QuadResult {
            value: S::zero(),
            error: S::zero(),
            evaluations: 0,
        });
    }
    if b < a {
        let r = integrate_with(f, b, a, opts)?;
        return Ok(QuadResult { value: -r.value, ..r });
    }
    let mut heap = BinaryHeap::new();
    let first = gk15(&mut f, a, b)?;
    let mut total = first.value;
    let mut err = first.error;
    let mut evals = 15;
    heap.push(first);
    let tol = |v: S| S::c(opts.abs_tol).max(S::c(opts.rel_tol) * v.abs());
    while err > tol(total) {
        if heap.len() >= opts.max_intervals {
            return Err(SpiderError::Quadrature {
                achieved: err.to_f64_lossy(),
                tolerance: tol(total).to_f64_lossy(),
            });
        }
        let worst = heap.pop().expect("non-empty");
        let mid = (worst.a + worst.b) / S::c(2.0);
        if !(mid > worst.a && mid < worst.b) {
            // Interval cannot be split further in this precision.
            return Err(SpiderError::Quadrature {
                achieved: err.to_f64_lossy(),
                tolerance: tol(total).to_f64_lossy(),
            });
        }
        let left = gk15(&mut f, worst.a, mid)?;
        let right = gk15(&mut f, mid, worst.b)?;
        evals += 30;
        total = total - worst.value + left.value + right.value;
        err = err - worst.error + left.error + right.error;
        heap.push(left);
        heap.push(right);
    }
    // Re-sum in a fixed order to avoid drift from the running updates.
    let mut panels = heap.into_vec();
    panels.sort_by(|p, q| p.a.partial_cmp(&q.a).unwrap_or(Ordering::Equal));
    let value = panels.iter().fold(S::zero(), |acc, p| acc + p.value);
    let error = panels.iter().fold(S::zero(), |acc, p| acc + p.error);
    Ok(QuadResult {
        value,
        error,
        evaluations: evals,
    })
}

/// Integrates an infallible integrand over `[a, b]`.
pub fn integrate<S, F>(mut f: F, a: S, b: S, opts: &QuadOptions) -> Result<QuadResult<S>>
where
    S: Scalar,
    F: FnMut(S) -> S,
{
    integrate_with(|x| Ok(f(x)), a, b, opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomials_are_exact() {
        let r = integrate(|x: f64| x.powi(6) - 3.0 * x * x + 1.0, -1.0, 2.0, &QuadOptions::default()).unwrap();
        let exact = (2f64.powi(7) + 1.0) / 7.0 - (8.0 + 1.0) + 3.0;
        assert!((r.value - exact).abs() < 1e-13);
        assert_eq!(r.evaluations, 15);
    }

    #[test]
    fn smooth_and_peaked_integrands() {
        let opts = QuadOptions::default();
        let r = integrate(|x: f64| x.exp() * x.sin(), 0.0, std::f64::consts::PI, &opts).unwrap();
        let exact = (std::f64::consts::PI.exp() + 1.0) / 2.0;
        assert!((r.value - exact).abs() < 1e-10);
        let r = integrate(|x: f64| 1.0 / (1e-4 + x * x), -1.0, 1.0, &opts).unwrap();
        let exact = 2.0 * (1.0f64 / 1e-2).atan() / 1e-2;
        assert!((r.value / exact - 1.0).abs() < 1e-10);
        let r = integrate(|x: f64| x.sqrt(), 0.0, 1.0, &opts).unwrap();
        assert!((r.value - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn reversed_and_empty_intervals() {
        let opts = QuadOptions::default();
        let r = integrate(|x: f64| x, 1.0, 0.0, &opts).unwrap();
        assert!((r.value + 0.5).abs() < 1e-15);
        assert_eq!(integrate(|x: f64| x, 1.0, 1.0, &opts).unwrap().value, 0.0);
    }

    #[test]
    fn failure_reports_achieved_tolerance() {
        let opts = QuadOptions {
            abs_tol: 1e-14,
            rel_tol: 0.0,
            max_intervals: 4,
        };
        match integrate(|x: f64| (1.0 / x).sin(), 1e-6, 1.0, &opts) {
            Err(SpiderError::Quadrature { achieved, tolerance }) => {
                assert!(achieved > tolerance);
                assert_eq!(tolerance, 1e-14);
            }
            other => panic!("expected quadrature failure, got {other:?}"),
        }
    }

    #[test]
    fn errors_from_the_integrand_propagate() {
        let r = integrate_with(
            |x: f64| if x > 0.5 { Err(crate::error::precondition("boom")) } else { Ok(x) },
            0.0,
            1.0,
            &QuadOptions::default(),
        );
        assert!(r.is_err());
    }

    #[test]
    fn single_precision() {
        let opts = QuadOptions {
            abs_tol: 1e-5,
            rel_tol: 1e-5,
            max_intervals: 100,
        };
        let r = integrate(|x: f32| x.cos(), 0.0, 1.0, &opts).unwrap();
        assert!((r.value - 1f32.sin()).abs() < 1e-5);
    }
}
