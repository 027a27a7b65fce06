use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};
use spider_core::coefficients::{validate_coefficients, CoefficientSet, ValidationWindow};
use spider_core::io::{write_atom, write_density, write_ensemble, write_json, write_pde, write_skew_paths};
use spider_core::junction::{Branch, JunctionPoint, SpiderState, TestFunction};
use spider_core::kernels::{atom_slice, density_slice, kernel_from_junction, kernel_general, KernelSource};
use spider_core::pde::{feynman_kac_compare, solve_backward, PdeSolution, TerminalData};
use spider_core::rng::path_seed;
use spider_core::simulator::{marginal_statistics, simulate_ensemble, SchemeConfig, SimulatedSource};
use spider_core::skew::{beta, simulate_skew, SkewPath};
use spider_core::stats::Estimate;
use spider_core::verify::{martingale_test, non_stickiness_curve, self_convergence};
use spider_core::SpiderError;
use thiserror::Error;

use crate::config::{Cli, Command, RunConfig};

#[derive(Debug, Error)]
pub enum Failure {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Numerical(String),
    #[error("acceptance check failed: {0}")]
    Acceptance(String),
}

impl From<SpiderError> for Failure {
    fn from(e: SpiderError) -> Self {
        match e {
            SpiderError::Precondition(_) | SpiderError::Config(_) => Failure::Validation(e.to_string()),
            _ => Failure::Numerical(e.to_string()),
        }
    }
}

type Outcome = Result<Report, Failure>;

/// What a subcommand produced: artifact file names and, for the checking
/// commands, a verdict.
struct Report {
    artifacts: Vec<String>,
    verdict: Option<(bool, String)>,
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let name = cli.command.name();
    let flags = cli.command.flags();
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::Validation(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::parse(&text).map_err(|e| Failure::Validation(format!("{}: {e}", p.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(c) = &cfg.command {
        if c != name {
            return Err(Failure::Validation(format!("config was written for '{c}', not '{name}'")));
        }
    }
    cfg.apply(flags).map_err(Failure::Validation)?;
    cfg.command = Some(name.to_string());

    let workers = cfg.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Validation("workers must be >= 1".into()));
    }
    // Fails only if a pool already exists, which is harmless.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(workers).build_global();

    std::fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Failure::Validation(format!("cannot create {}: {e}", cfg.out_dir.display())))?;
    let started = Instant::now();
    let report = match &cli.command {
        Command::Simulate(_) => simulate(&cfg),
        Command::Kernel(_) => kernel(&cfg),
        Command::Pde(_) => pde(&cfg),
        Command::Skew(_) => skew(&cfg),
        Command::Verify(_) => verify(&cfg),
        Command::CompareFk(_) => compare_fk(&cfg),
    }?;
    let wall = started.elapsed().as_secs_f64();

    let mut artifacts = report.artifacts.clone();
    artifacts.push("manifest.json".into());
    let manifest = json!({
        "command": name,
        "config": cfg,
        "seed": cfg.seed,
        "workers": workers,
        "versions": {
            "spider": env!("CARGO_PKG_VERSION"),
        },
        "wall_time_s": wall,
        "artifacts": artifacts,
        "verdict": report.verdict.as_ref().map(|v| v.0),
    });
    save_json(&cfg.out_dir, "manifest.json", &manifest)?;
    match report.verdict {
        Some((false, why)) => Err(Failure::Acceptance(why)),
        _ => Ok(()),
    }
}

fn out(cfg: &RunConfig, file: &str) -> PathBuf {
    cfg.out_dir.join(file)
}

fn save_json<T: Serialize + ?Sized>(dir: &Path, file: &str, value: &T) -> Result<(), Failure> {
    write_json(&dir.join(file), value).map_err(|e| Failure::Numerical(format!("writing {file}: {e}")))
}

fn coefficients(cfg: &RunConfig) -> Result<CoefficientSet<f64>, Failure> {
    let cs = cfg.coefficients.build::<f64>()?;
    let window = ValidationWindow {
        t_max: cfg.scheme.horizon.max(cfg.grid.horizon),
        x_max: 5.0,
        l_max: 5.0,
    };
    let report = validate_coefficients(&cs, &window, cfg.tolerances.validation_samples, cfg.seed)?;
    if !report.is_valid() {
        let lines: Vec<String> = report.violations.iter().take(5).map(|v| v.to_string()).collect();
        return Err(Failure::Validation(format!("coefficient validation failed:\n  {}", lines.join("\n  "))));
    }
    Ok(cs)
}

fn start(cfg: &RunConfig) -> Result<SpiderState<f64>, Failure> {
    let s = cfg.start;
    if s.branch == 0 {
        return Err(Failure::Validation("start.branch is 1-based".into()));
    }
    Ok(SpiderState::new(0.0, JunctionPoint::new(Branch::new(s.branch), s.x)?, s.l)?)
}

fn scheme(cfg: &RunConfig) -> Result<SchemeConfig, Failure> {
    let s = &cfg.scheme;
    let c = SchemeConfig::new(s.n_freeze, s.n_fine, s.horizon, cfg.seed)
        .with_crossing(s.crossing)
        .with_record_stride(s.record_stride);
    c.validate()?;
    Ok(c)
}

fn simulate(cfg: &RunConfig) -> Outcome {
    let cs = coefficients(cfg)?;
    let init = start(cfg)?;
    let sc = scheme(cfg)?;
    let ens = simulate_ensemble(&cs, &init, &sc, cfg.paths)?;
    if ens.paths.is_empty() {
        return Err(Failure::Numerical(format!("all {} paths failed", cfg.paths)));
    }
    write_ensemble(&out(cfg, "paths.csv"), &ens)?;
    let summary = json!({
        "coefficients": cs.label,
        "marginal": marginal_statistics(&ens, sc.horizon)?,
        "failures": ens.failures,
    });
    save_json(&cfg.out_dir, "summary.json", &summary)?;
    Ok(Report {
        artifacts: vec!["paths.csv".into(), "summary.json".into()],
        verdict: None,
    })
}

fn linspace(hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 {
        return vec![hi];
    }
    (0..n).map(|k| hi * k as f64 / (n - 1) as f64).collect()
}

fn kernel(cfg: &RunConfig) -> Outcome {
    let cs = coefficients(cfg)?;
    let s = cfg.start;
    let t = cfg.scheme.horizon;
    let opts = cfg.tolerances.kernel;
    let k = if s.x > 0.0 {
        let source = KernelSource::Point {
            s: 0.0,
            x: s.x,
            branch: Branch::new(s.branch),
            l: s.l,
        };
        kernel_general(&cs, source, t, opts)?
    } else {
        kernel_from_junction(&cs, 0.0, s.l, t, opts)?
    };
    let g = &cfg.kernel;
    let ys = linspace(g.y_max, g.ny);
    let ells: Vec<f64> = linspace(g.ell_max, g.nl).into_iter().map(|l| l + s.l).collect();
    write_density(&out(cfg, "density.csv"), &density_slice(&k, &ys, &ells)?)?;
    let mut artifacts = vec!["density.csv".to_string()];
    if s.x > 0.0 {
        write_atom(&out(cfg, "atom.csv"), &atom_slice(&k, &ys))?;
        artifacts.push("atom.csv".into());
    }
    save_json(&cfg.out_dir, "masses.json", &k.masses()?)?;
    artifacts.push("masses.json".into());
    Ok(Report {
        artifacts,
        verdict: None,
    })
}

fn solve(cfg: &RunConfig, cs: &CoefficientSet<f64>) -> Result<(TerminalData<f64>, PdeSolution<f64>), Failure> {
    let g = cfg.terminal.build(cs, cfg.grid.horizon)?;
    let sol = solve_backward(cs, &g, &cfg.grid, &cfg.tolerances.solver)?;
    Ok((g, sol))
}

fn pde(cfg: &RunConfig) -> Outcome {
    let cs = coefficients(cfg)?;
    let (_, sol) = solve(cfg, &cs)?;
    let init = start(cfg)?;
    write_pde(&out(cfg, "pde.csv"), &sol, &[0, cfg.grid.mt])?;
    let (lo, hi) = sol.min_max();
    let summary = json!({
        "u_start": sol.interpolate(0, init.branch(), init.x(), init.l)?,
        "min": lo,
        "max": hi,
        "compatibility_residual": sol.compatibility_residual,
        "warnings": sol.warnings,
    });
    save_json(&cfg.out_dir, "pde_summary.json", &summary)?;
    Ok(Report {
        artifacts: vec!["pde.csv".into(), "pde_summary.json".into()],
        verdict: None,
    })
}

fn skew(cfg: &RunConfig) -> Outcome {
    let sk = cfg.skew.build::<f64>()?;
    let sc = scheme(cfg)?;
    let paths: Vec<SkewPath<f64>> = (0..cfg.paths)
        .into_par_iter()
        .map(|k| simulate_skew(&sk, cfg.skew_y0, &sc.with_seed(path_seed(cfg.seed, k as u64))))
        .collect::<Result<_, _>>()?;
    write_skew_paths(&out(cfg, "skew_paths.csv"), &paths)?;
    let last = |p: &SkewPath<f64>| (*p.y.last().unwrap(), *p.l.last().unwrap());
    let positive: Vec<f64> = paths.iter().map(|p| (last(p).0 > 0.0) as u8 as f64).collect();
    let y: Vec<f64> = paths.iter().map(|p| last(p).0).collect();
    let l: Vec<f64> = paths.iter().map(|p| last(p).1).collect();
    let summary = json!({
        "alpha": cfg.skew.alpha,
        "beta_at_start": beta(0.0, 0.0, &sk)?,
        "p_positive": Estimate::from_samples(&positive),
        "mean_y": Estimate::from_samples(&y),
        "mean_l": Estimate::from_samples(&l),
    });
    save_json(&cfg.out_dir, "summary.json", &summary)?;
    Ok(Report {
        artifacts: vec!["skew_paths.csv".into(), "summary.json".into()],
        verdict: None,
    })
}

fn verify(cfg: &RunConfig) -> Outcome {
    let cs = coefficients(cfg)?;
    let init = start(cfg)?;
    let sc = scheme(cfg)?;
    let n = cs.branches();
    let v = &cfg.verify;
    let source = SimulatedSource {
        cs: &cs,
        init,
        cfg: sc,
        n: cfg.paths,
    };
    let bump_w = v.bump_weights.clone().unwrap_or_else(|| {
        (0..n)
            .map(|k| match k {
                0 => 1.0,
                1 => -1.0,
                _ => 0.0,
            })
            .collect()
    });
    if bump_w.len() != n {
        return Err(Failure::Validation(format!("verify.bump_weights needs {n} entries")));
    }
    let bump = TestFunction::branch_weighted_bump(bump_w);
    let fs = [TestFunction::radial(n), TestFunction::radial_squared(n), bump.clone()];
    let opts = &cfg.tolerances.martingale;
    let suite = martingale_test(&source, &cs, &fs, &v.pairs, &v.weights, opts)?;

    let constant = martingale_test(&source, &cs, &[TestFunction::constant(n, 1.0)], &v.pairs, &v.weights, opts)?;
    let constant_exact = constant.reports[0].entries.iter().all(|e| e.mean == 0.0 && e.se == 0.0);

    // The spinning measure read backwards; detection is reported, not required.
    let inner = cs.clone();
    let reversed = cs.with_alpha("reversed", move |t, l, out: &mut [f64]| {
        inner.alpha_into(t, l, out);
        out.reverse();
    });
    let control = martingale_test(&source, &reversed, &[bump], &v.pairs, &v.weights, opts)?;

    let occupation = non_stickiness_curve(&source, &v.eps)?;
    let convergence = if v.doublings > 0 {
        let steps = sc.total_steps();
        if steps % (sc.n_freeze << v.doublings) != 0 {
            return Err(Failure::Validation(format!(
                "self-convergence needs n_fine divisible by 2^{}",
                v.doublings
            )));
        }
        Some(self_convergence(&cs, &init, &sc, v.doublings, &v.self_convergence)?)
    } else {
        None
    };

    let r2_ok = occupation.r2 >= cfg.tolerances.min_r2;
    let pass = suite.pass && constant_exact && r2_ok;
    let report = json!({
        "martingale": suite,
        "constant_function_exact_zero": constant_exact,
        "negative_control_detected": !control.pass,
        "negative_control": control,
        "non_stickiness": occupation,
        "self_convergence": convergence,
        "pass": pass,
    });
    save_json(&cfg.out_dir, "verify_report.json", &report)?;
    let why = format!(
        "martingale suite {}, constant exact zero {constant_exact}, occupation R² {:.4}",
        if suite.pass { "passed" } else { "failed" },
        occupation.r2
    );
    Ok(Report {
        artifacts: vec!["verify_report.json".into()],
        verdict: Some((pass, why)),
    })
}

fn compare_fk(cfg: &RunConfig) -> Outcome {
    let cs = coefficients(cfg)?;
    let (g, sol) = solve(cfg, &cs)?;
    let init = start(cfg)?;
    let sc = scheme(cfg)?;
    let r = feynman_kac_compare(&sol, &cs, &g, &init, &sc, cfg.paths)?;
    let mut report: Value = serde_json::to_value(&r).map_err(|e| Failure::Numerical(e.to_string()))?;
    report["terminal"] = json!(g.label);
    report["mc_interval"] = json!([r.mc.mean - 3.0 * r.mc.se, r.mc.mean + 3.0 * r.mc.se]);
    report["warnings"] = json!(sol.warnings);
    save_json(&cfg.out_dir, "fk_report.json", &report)?;
    let why = format!("|u - MC| = {:.3e} exceeds {:.3e}", r.discrepancy, r.tolerance);
    Ok(Report {
        artifacts: vec!["fk_report.json".into()],
        verdict: Some((r.pass, why)),
    })
}
