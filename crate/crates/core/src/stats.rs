//! Small statistical helpers used by the ensemble summaries and the
//! verification harness. All reductions run in index order so results do
//! not depend on thread scheduling.

use serde::{Deserialize, Serialize};

use crate::rng::inverse_normal_cdf;

/// Sample mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub se: f64,
    pub n: usize,
}

impl Estimate {
    pub fn from_samples(xs: &[f64]) -> Self {
        let mut acc = MeanVar::default();
        for &x in xs {
            acc.push(x);
        }
        acc.estimate()
    }
}

/// Welford accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MeanVar {
    n: usize,
    mean: f64,
    m2: f64,
}

impl MeanVar {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn estimate(&self) -> Estimate {
        let var = if self.n > 1 { (self.m2 / (self.n - 1) as f64).max(0.0) } else { 0.0 };
        let sd = var.sqrt();
        Estimate {
            mean: if self.n > 0 { self.mean } else { f64::NAN },
            sd,
            se: if self.n > 0 { sd / (self.n as f64).sqrt() } else { f64::NAN },
            n: self.n,
        }
    }
}

/// Standard normal CDF.
pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Two-sided critical value for `m` simultaneous z-tests at family-wise
/// level `alpha` (Bonferroni).
pub fn bonferroni_z(alpha: f64, m: usize) -> f64 {
    inverse_normal_cdf(1.0 - alpha / (2.0 * m.max(1) as f64))
}

/// Kolmogorov limiting survival function `P(K > λ)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 0.3 {
        // Series below converges slowly here and the value is 1 to double precision.
        return 1.0;
    }
    let mut sum = 0.0;
    for j in 1..=100 {
        let j = j as f64;
        let term = (-2.0 * j * j * lambda * lambda).exp();
        sum += if (j as u64) % 2 == 1 { term } else { -term };
        if term < 1e-18 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against a continuous CDF.
pub fn ks_one_sample(samples: &[f64], cdf: impl Fn(f64) -> f64) -> KsResult {
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    let sn = n.sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d),
    }
}

/// Two-sample Kolmogorov-Smirnov test.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> KsResult {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(f64::total_cmp);
    xb.sort_by(f64::total_cmp);
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = (na * nb / (na + nb)).sqrt();
    KsResult {
        statistic: d,
        p_value: kolmogorov_sf((ne + 0.12 + 0.11 / ne) * d),
    }
}

/// Least-squares slope of `y = c·x` through the origin and the centered R².
pub fn fit_through_origin(x: &[f64], y: &[f64]) -> (f64, f64) {
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let c = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let n = y.len() as f64;
    let ybar = y.iter().sum::<f64>() / n;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - c * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - ybar).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { 0.0 };
    (c, r2)
}

/// Least-squares slope of `y` against `x` (with intercept).
pub fn slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let xb = x.iter().sum::<f64>() / n;
    let yb = y.iter().sum::<f64>() / n;
    let num: f64 = x.iter().zip(y).map(|(a, b)| (a - xb) * (b - yb)).sum();
    let den: f64 = x.iter().map(|a| (a - xb).powi(2)).sum();
    num / den
}
