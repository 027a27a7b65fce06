use spider_core::coefficients::{AlphaMode, CoefficientPreset, CoefficientSet};
use spider_core::junction::Branch;
use spider_core::kernels::{
    branch_marginal, first_passage_density, kernel_from_junction, kernel_general, triple_density_mass, AlphaTime,
    KernelOptions, KernelSource, TripleDensityForm,
};
use spider_core::quadrature::QuadOptions;
use statrs::distribution::{ContinuousCDF, Normal};

fn constant(alpha: Vec<f64>) -> CoefficientSet<f64> {
    CoefficientPreset::brownian_constant(alpha).build().unwrap()
}

fn reference() -> CoefficientSet<f64> {
    CoefficientPreset::reference_l_dependent().build().unwrap()
}

fn point(x: f64, branch: usize) -> KernelSource<f64> {
    KernelSource::Point {
        s: 0.0,
        x,
        branch: Branch::new(branch),
        l: 0.0,
    }
}

#[test]
fn weighted_triple_density_has_unit_mass() {
    for t in [0.5f64, 1.0, 2.0] {
        let m = triple_density_mass(TripleDensityForm::LocalTimeWeighted, t, 0.0, &QuadOptions::default()).unwrap();
        assert!((m - 1.0).abs() < 1e-7, "t={t}: {m}");
    }
}

#[test]
fn printed_triple_density_mass_grows_logarithmically() {
    // Near ℓ = 0 the ℓ-marginal of the printed form behaves like 2/(ℓ√(2πt)).
    let opts = QuadOptions::default();
    let t: f64 = 1.0;
    let m3 = triple_density_mass(TripleDensityForm::Printed, t, 1e-3, &opts).unwrap();
    let m5 = triple_density_mass(TripleDensityForm::Printed, t, 1e-5, &opts).unwrap();
    let predicted = 2.0 / (2.0 * std::f64::consts::PI * t).sqrt() * 100f64.ln();
    assert!(((m5 - m3) / predicted - 1.0).abs() < 1e-2, "{} vs {predicted}", m5 - m3);
}

#[test]
fn vertex_kernel_normalizes_with_constant_alpha() {
    let cs = constant(vec![0.25, 0.75]);
    let k = kernel_from_junction(&cs, 0.0, 0.0, 1.0, KernelOptions::default()).unwrap();
    let m = k.masses().unwrap();
    assert!((m.total - 1.0).abs() < 1e-3, "{m:?}");
    assert!((m.branch[0] - 0.25).abs() < 1e-3);
    assert!((m.branch[1] - 0.75).abs() < 1e-3);
    assert_eq!(m.atom, 0.0);
}

#[test]
fn symmetric_two_branch_marginal_is_half() {
    let cs = constant(vec![0.5, 0.5]);
    let k = kernel_from_junction(&cs, 0.3, 0.5, 1.0, KernelOptions::default()).unwrap();
    let b = branch_marginal(&k).unwrap();
    assert!((b[0] - 0.5).abs() < 1e-3 && (b[1] - 0.5).abs() < 1e-3);
}

#[test]
fn l_dependent_vertex_marginal_matches_local_time_law() {
    // From the vertex, P(j) = ∫ α_j(ℓ) · 2φ(ℓ) dℓ with L_τ half-normal.
    let cs = reference();
    let k = kernel_from_junction(&cs, 0.0, 0.0, 1.0, KernelOptions::default()).unwrap();
    let m = k.masses().unwrap();
    let n = 20_000;
    let h = 10.0 / n as f64;
    let mut oracle = 0.0;
    for i in 0..n {
        let l = (i as f64 + 0.5) * h;
        let dens = 2.0 * (-l * l / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt();
        oracle += (0.3 + 0.3 / (1.0 + l)) * dens * h;
    }
    assert!((m.branch[0] - oracle).abs() < 1e-4, "{} vs {oracle}", m.branch[0]);
    assert!((m.total - 1.0).abs() < 1e-4);
}

#[test]
fn alpha_time_conventions_agree_for_time_independent_alpha() {
    let cs = reference();
    let a = kernel_from_junction(&cs, 0.2, 0.1, 1.0, KernelOptions::default()).unwrap();
    let b = kernel_from_junction(
        &cs,
        0.2,
        0.1,
        1.0,
        KernelOptions {
            alpha_time: AlphaTime::Start,
            ..KernelOptions::default()
        },
    )
    .unwrap();
    for &(y, l) in &[(0.3, 0.2), (1.1, 0.7)] {
        let da = a.density(y, Branch::new(1), l).unwrap();
        let db = b.density(y, Branch::new(1), l).unwrap();
        assert!((da - db).abs() < 1e-10 * da);
    }
}

#[test]
fn alpha_time_conventions_differ_for_time_dependent_alpha() {
    let cs = CoefficientSet::brownian(
        "time-ramp",
        2,
        |t: f64, _l: f64, out: &mut [f64]| {
            let a = 0.2 + 0.6 * t.min(1.0);
            out[0] = a;
            out[1] = 1.0 - a;
        },
        0.2,
        0.6,
    )
    .unwrap();
    let start = KernelOptions {
        alpha_time: AlphaTime::Start,
        ..KernelOptions::default()
    };
    let a = kernel_from_junction(&cs, 0.0, 0.0, 1.0, KernelOptions::default()).unwrap();
    let b = kernel_from_junction(&cs, 0.0, 0.0, 1.0, start).unwrap();
    let ma = a.masses().unwrap();
    let mb = b.masses().unwrap();
    // Start convention freezes α at t = 0.
    assert!((mb.branch[0] - 0.2).abs() < 1e-3);
    // Last-zero convention: E[α(G_1)] with G_1 arcsine, mean 1/2.
    assert!((ma.branch[0] - 0.5).abs() < 1e-3, "{:?}", ma.branch);
}

#[test]
fn general_kernel_masses_on_grid() {
    let n = Normal::new(0.0, 1.0).unwrap();
    let cs = reference();
    for x in [0.1, 1.0] {
        for tau in [0.5, 1.0] {
            let k = kernel_general(&cs, point(x, 2), tau, KernelOptions::default()).unwrap();
            let m = k.masses().unwrap();
            let atom_oracle = 2.0 * n.cdf(x / tau.sqrt()) - 1.0;
            assert!((m.atom - atom_oracle).abs() < 1e-6, "x={x} tau={tau}: {} vs {atom_oracle}", m.atom);
            assert!((m.total - 1.0).abs() < 1e-3, "x={x} tau={tau}: {m:?}");
            assert!(m.tail_bound < 1e-10);
        }
    }
}

#[test]
fn far_source_puts_everything_on_its_branch() {
    let cs = constant(vec![0.5, 0.5]);
    let tau: f64 = 0.5;
    let k = kernel_general(&cs, point(10.0 * tau.sqrt(), 1), tau, KernelOptions::default()).unwrap();
    let m = k.masses().unwrap();
    assert!(m.continuous.iter().sum::<f64>() <= 1e-8);
    assert!((m.branch[0] - 1.0).abs() < 1e-8);
}

#[test]
fn atom_mass_is_monotone() {
    let cs = constant(vec![0.5, 0.5]);
    let mass = |x: f64, tau: f64| {
        kernel_general(&cs, point(x, 1), tau, KernelOptions::default())
            .unwrap()
            .atom_mass()
            .unwrap()
    };
    let xs = [0.05, 0.2, 0.5, 1.0, 2.0];
    for w in xs.windows(2) {
        assert!(mass(w[1], 1.0) > mass(w[0], 1.0));
    }
    let taus = [0.1, 0.3, 1.0, 3.0];
    for w in taus.windows(2) {
        assert!(mass(0.5, w[1]) < mass(0.5, w[0]));
    }
}

#[test]
fn position_density_is_walsh_kernel_for_constant_alpha() {
    // With constant α the (y, j) marginal is 1{j=i}[φ(y-x) - φ(y+x)] + 2α_j φ(y+x).
    let cs = constant(vec![0.3, 0.7]);
    let (x, tau) = (0.4, 0.8);
    let k = kernel_general(&cs, point(x, 1), tau, KernelOptions::default()).unwrap();
    let phi = |z: f64| (-z * z / (2.0 * tau)).exp() / (2.0 * std::f64::consts::PI * tau).sqrt();
    for &y in &[0.1, 0.5, 1.5] {
        for (j, a) in [(1usize, 0.3), (2, 0.7)] {
            let d = k.position_density(y, Branch::new(j)).unwrap();
            let own = if j == 1 { phi(y - x) - phi(y + x) } else { 0.0 };
            let exact = own + 2.0 * a * phi(y + x);
            assert!((d - exact).abs() < 1e-6, "y={y} j={j}: {d} vs {exact}");
        }
    }
}

#[test]
fn chapman_kolmogorov_for_constant_alpha() {
    // Compose [0, 0.5] and [0.5, 1] in (y, j) and compare with [0, 1].
    let cs = constant(vec![0.4, 0.6]);
    let x0 = 0.3;
    let opts = KernelOptions {
        inner_abs_tol: 1e-7,
        inner_rel_tol: 1e-6,
        entry_tol: 1e-5,
        ..KernelOptions::default()
    };
    let direct = kernel_general(&cs, point(x0, 1), 1.0, opts).unwrap();
    let first = kernel_general(&cs, point(x0, 1), 0.5, opts).unwrap();
    let quad = QuadOptions {
        abs_tol: 1e-4,
        rel_tol: 1e-4,
        max_intervals: 200,
    };
    for &z in &[0.2, 0.8] {
        for k in 1..=2 {
            let target = Branch::new(k);
            let mut composed = 0.0;
            for j in 1..=2 {
                let mid = Branch::new(j);
                let r = spider_core::quadrature::integrate_with(
                    |y: f64| {
                        let p1 = first.position_density(y, mid)?;
                        let src = KernelSource::Point {
                            s: 0.5,
                            x: y,
                            branch: mid,
                            l: 0.0,
                        };
                        let second = kernel_general(&cs, src, 1.0, opts)?;
                        Ok(p1 * second.position_density(z, target)?)
                    },
                    1e-9,
                    6.0,
                    &quad,
                )
                .unwrap();
                composed += r.value;
            }
            let d = direct.position_density(z, target).unwrap();
            assert!((composed - d).abs() < 5e-3, "z={z} k={k}: {composed} vs {d}");
        }
    }
}

#[test]
fn vertex_kernel_density_vanishes_outside_support() {
    let cs = constant(vec![0.5, 0.5]);
    let k = kernel_from_junction(&cs, 0.0, 0.0, 1.0, KernelOptions::default()).unwrap();
    assert_eq!(k.density(0.0, Branch::new(1), 0.5).unwrap(), 0.0);
    assert_eq!(k.density(0.5, Branch::new(1), 0.0).unwrap(), 0.0);
    assert!((k.density(0.5, Branch::new(1), 0.5).unwrap() - first_passage_density(1.0, 1.0)).abs() < 1e-9);
}

#[test]
fn three_branch_l_dependent_masses() {
    let cs: CoefficientSet<f64> = CoefficientPreset::BrownianSpider {
        branches: 3,
        alpha_mode: AlphaMode::LDependent,
        alpha: None,
        alpha_near: None,
        alpha_far: None,
        rate: 1.0,
    }
    .build()
    .unwrap();
    let k = kernel_general(&cs, point(0.5, 3), 1.0, KernelOptions::default()).unwrap();
    let m = k.masses().unwrap();
    assert!((m.total - 1.0).abs() < 1e-3);
    assert!(m.branch.iter().all(|b| *b > 0.0));
}
