use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use spider_core::coefficients::{default_alpha_pair, AlphaMode, CoefficientPreset};
use spider_core::kernels::KernelOptions;
use spider_core::pde::{PdeGrid, SolverOptions, TerminalPreset};
use spider_core::simulator::CrossingMode;
use spider_core::skew::SkewPreset;
use spider_core::verify::{MartingaleOptions, SelfConvergenceOptions, Weight};

#[derive(Debug, Parser)]
#[command(name = "spider", version, about = "Walsh spider diffusions: simulation, kernels, PDE and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate an ensemble of spider paths.
    Simulate(Flags),
    /// Evaluate the Brownian-spider transition kernel on a grid.
    Kernel(Flags),
    /// Solve the backward PDE with the local-time Kirchhoff condition.
    Pde(Flags),
    /// Simulate the two-branch skew SDE.
    Skew(Flags),
    /// Run the martingale, non-stickiness and self-convergence checks.
    Verify(Flags),
    /// Compare the PDE value with a Monte Carlo expectation.
    CompareFk(Flags),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate(_) => "simulate",
            Command::Kernel(_) => "kernel",
            Command::Pde(_) => "pde",
            Command::Skew(_) => "skew",
            Command::Verify(_) => "verify",
            Command::CompareFk(_) => "compare-fk",
        }
    }

    pub fn flags(&self) -> &Flags {
        match self {
            Command::Simulate(f)
            | Command::Kernel(f)
            | Command::Pde(f)
            | Command::Skew(f)
            | Command::Verify(f)
            | Command::CompareFk(f) => f,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PresetName {
    BrownianSpider,
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AlphaModeArg {
    Constant,
    LDependent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CrossingArg {
    GridTouch,
    BridgeCorrected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TerminalName {
    Constant,
    XMinusL,
    Radial,
    Gaussian,
    CompatibleBump,
}

/// Flags shared by every subcommand; each overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "SPIDER_OUT_DIR")]
    pub out: Option<PathBuf>,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "SPIDER_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub preset: Option<PresetName>,
    /// Number of branches of the Brownian spider.
    #[arg(long = "I")]
    pub branches: Option<usize>,
    #[arg(long, value_enum)]
    pub alpha_mode: Option<AlphaModeArg>,
    #[arg(long)]
    pub paths: Option<usize>,
    #[arg(long)]
    pub n_freeze: Option<usize>,
    #[arg(long)]
    pub n_fine: Option<usize>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, value_enum)]
    pub crossing: Option<CrossingArg>,
    #[arg(long)]
    pub record_stride: Option<usize>,
    /// Initial branch (1-based), radial position and local time.
    #[arg(long)]
    pub branch0: Option<usize>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long)]
    pub l0: Option<f64>,
    #[arg(long, value_enum)]
    pub terminal: Option<TerminalName>,
    #[arg(long)]
    pub mx: Option<usize>,
    #[arg(long)]
    pub ml: Option<usize>,
    #[arg(long)]
    pub mt: Option<usize>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub l_max: Option<f64>,
    /// Skew SDE: α at zero local time.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Skew SDE: starting point y0.
    #[arg(long, allow_hyphen_values = true)]
    pub y0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scheme {
    pub n_freeze: usize,
    pub n_fine: usize,
    pub horizon: f64,
    pub crossing: CrossingMode,
    /// Fine steps between stored nodes in `paths.csv`.
    pub record_stride: usize,
}

impl Default for Scheme {
    fn default() -> Self {
        Self {
            n_freeze: 256,
            n_fine: 4,
            horizon: 1.0,
            crossing: CrossingMode::BridgeCorrected,
            record_stride: 16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Start {
    pub branch: usize,
    pub x: f64,
    pub l: f64,
}

impl Default for Start {
    fn default() -> Self {
        Self {
            branch: 1,
            x: 0.0,
            l: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelGrid {
    pub y_max: f64,
    pub ny: usize,
    pub ell_max: f64,
    pub nl: usize,
}

impl Default for KernelGrid {
    fn default() -> Self {
        Self {
            y_max: 3.0,
            ny: 31,
            ell_max: 3.0,
            nl: 31,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySettings {
    pub pairs: Vec<(f64, f64)>,
    pub weights: Vec<Weight>,
    /// Weights of the branch-weighted bump test function.
    pub bump_weights: Option<Vec<f64>>,
    pub eps: Vec<f64>,
    /// Freezing doublings of the self-convergence study (0 skips it).
    pub doublings: usize,
    pub self_convergence: SelfConvergenceOptions,
}

impl Default for VerifySettings {
    fn default() -> Self {
        Self {
            pairs: vec![(0.25, 0.5), (0.25, 0.75), (0.5, 0.75)],
            weights: Weight::DEFAULT.to_vec(),
            bump_weights: None,
            eps: vec![0.01, 0.02, 0.04, 0.08],
            doublings: 2,
            self_convergence: SelfConvergenceOptions {
                paths: 2000,
                blocks: 5,
                block_size: 200,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    pub solver: SolverOptions,
    pub martingale: MartingaleOptions,
    pub kernel: KernelOptions,
    /// Non-stickiness fit quality required by `verify`.
    pub min_r2: f64,
    /// Coefficient validation samples.
    pub validation_samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            solver: SolverOptions::default(),
            martingale: MartingaleOptions::default(),
            kernel: KernelOptions::default(),
            min_r2: 0.99,
            validation_samples: 256,
        }
    }
}

/// Fully defaulted run configuration. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Subcommand the file was written for; must match when present.
    pub command: Option<String>,
    pub coefficients: CoefficientPreset,
    pub scheme: Scheme,
    pub start: Start,
    pub paths: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: Option<usize>,
    pub grid: PdeGrid,
    pub terminal: TerminalPreset,
    pub kernel: KernelGrid,
    pub skew: SkewPreset,
    pub skew_y0: f64,
    pub verify: VerifySettings,
    pub tolerances: Tolerances,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            coefficients: CoefficientPreset::reference_l_dependent(),
            scheme: Scheme::default(),
            start: Start::default(),
            paths: 1000,
            seed: 0,
            out_dir: PathBuf::from("spider-out"),
            workers: None,
            grid: PdeGrid {
                x_max: 8.0,
                l_max: 6.0,
                horizon: 1.0,
                mx: 200,
                ml: 100,
                mt: 100,
            },
            terminal: TerminalPreset::XMinusL,
            kernel: KernelGrid::default(),
            skew: SkewPreset::constant(0.5),
            skew_y0: 0.0,
            verify: VerifySettings::default(),
            tolerances: Tolerances::default(),
        }
    }
}

/// `κ = (1, -1, 0, ...)`.
fn default_kappa(branches: usize) -> Vec<f64> {
    (0..branches)
        .map(|k| match k {
            0 => 1.0,
            1 => -1.0,
            _ => 0.0,
        })
        .collect()
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| format!("config: {e}"))
    }

    /// Applies command-line flags on top of the file configuration.
    pub fn apply(&mut self, f: &Flags) -> Result<(), String> {
        if f.preset.is_some() || f.branches.is_some() || f.alpha_mode.is_some() {
            self.coefficients = brownian_preset(f, &self.coefficients)?;
        }
        if let Some(v) = f.out.clone() {
            self.out_dir = v;
        }
        if f.workers.is_some() {
            self.workers = f.workers;
        }
        if let Some(v) = f.seed {
            self.seed = v;
        }
        if let Some(v) = f.paths {
            self.paths = v;
        }
        if let Some(v) = f.n_freeze {
            self.scheme.n_freeze = v;
        }
        if let Some(v) = f.n_fine {
            self.scheme.n_fine = v;
        }
        if let Some(v) = f.horizon {
            self.scheme.horizon = v;
            self.grid.horizon = v;
        }
        if let Some(v) = f.crossing {
            self.scheme.crossing = match v {
                CrossingArg::GridTouch => CrossingMode::GridTouch,
                CrossingArg::BridgeCorrected => CrossingMode::BridgeCorrected,
            };
        }
        if let Some(v) = f.record_stride {
            self.scheme.record_stride = v;
        }
        if let Some(v) = f.branch0 {
            self.start.branch = v;
        }
        if let Some(v) = f.x0 {
            self.start.x = v;
        }
        if let Some(v) = f.l0 {
            self.start.l = v;
        }
        if let Some(t) = f.terminal {
            self.terminal = match t {
                TerminalName::Constant => TerminalPreset::Constant { value: 1.0 },
                TerminalName::XMinusL => TerminalPreset::XMinusL,
                TerminalName::Radial => TerminalPreset::Radial,
                TerminalName::Gaussian => TerminalPreset::Gaussian,
                TerminalName::CompatibleBump => TerminalPreset::CompatibleBump {
                    kappa: default_kappa(self.coefficients.branches()),
                },
            };
        }
        if let Some(v) = f.mx {
            self.grid.mx = v;
        }
        if let Some(v) = f.ml {
            self.grid.ml = v;
        }
        if let Some(v) = f.mt {
            self.grid.mt = v;
        }
        if let Some(v) = f.x_max {
            self.grid.x_max = v;
        }
        if let Some(v) = f.l_max {
            self.grid.l_max = v;
        }
        if let Some(v) = f.alpha {
            self.skew.alpha = v;
        }
        if let Some(v) = f.y0 {
            self.skew_y0 = v;
        }
        Ok(())
    }
}

fn brownian_preset(f: &Flags, current: &CoefficientPreset) -> Result<CoefficientPreset, String> {
    if f.preset == Some(PresetName::Reference) {
        if f.branches.is_some() || f.alpha_mode.is_some() {
            return Err("--preset reference takes no --I or --alpha-mode".into());
        }
        return Ok(CoefficientPreset::reference_l_dependent());
    }
    let (branches, mode) = match current {
        CoefficientPreset::BrownianSpider {
            branches, alpha_mode, ..
        } => (*branches, *alpha_mode),
        other if f.preset.is_none() => {
            return Err(format!(
                "--I/--alpha-mode need a brownian-spider preset, config has {}",
                serde_json::to_value(other).map(|v| v["family"].to_string()).unwrap_or_default()
            ))
        }
        _ => (2, AlphaMode::LDependent),
    };
    let branches = f.branches.unwrap_or(branches);
    let mode = match f.alpha_mode {
        Some(AlphaModeArg::Constant) => AlphaMode::Constant,
        Some(AlphaModeArg::LDependent) => AlphaMode::LDependent,
        None => mode,
    };
    let (near, far) = default_alpha_pair(branches);
    Ok(match mode {
        AlphaMode::Constant => CoefficientPreset::BrownianSpider {
            branches,
            alpha_mode: mode,
            alpha: Some(vec![1.0 / branches as f64; branches]),
            alpha_near: None,
            alpha_far: None,
            rate: 1.0,
        },
        AlphaMode::LDependent => CoefficientPreset::BrownianSpider {
            branches,
            alpha_mode: mode,
            alpha: None,
            alpha_near: Some(near),
            alpha_far: Some(far),
            rate: 1.0,
        },
    })
}
