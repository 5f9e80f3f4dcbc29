//! Command-line front end.
//!
//! Every command is first resolved into a [`RunConfig`] with all defaults
//! filled in. Executing a config writes its outputs plus a `run.json`
//! holding that config, so `bnn-ood rerun run.json` repeats the run exactly.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, IsTerminal, Write};
use std::path::{Path, PathBuf};

use clap::{Args, ColorChoice, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bnn::{hmc_sample, predictive_moments, HmcConfig, NetSpec, PriorKind, PriorSpec};
use crate::datasets::{load_csv, make_grid, save_csv, Dataset, DatasetKind, GridSpec};
use crate::diagnostics::{distance_awareness, field_compare, mc_error_study, McErrorConfig};
use crate::field::UncertaintyField;
use crate::gp::{ConditionedGp, DEFAULT_NOISE_VAR};
use crate::kernels::{Activation, KernelSpec};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_SAMPLER: i32 = 4;

#[derive(Parser, Debug)]
#[command(name = "bnn-ood", version, about = "Epistemic-uncertainty fields from GPs and Bayesian neural networks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic 2-D dataset as CSV.
    Dataset(DatasetArgs),
    /// GP posterior mean/std over a grid.
    GpField(GpFieldArgs),
    /// HMC posterior mean/std of a finite network over a grid.
    HmcField(HmcFieldArgs),
    /// Kernel and field diagnostics.
    #[command(subcommand)]
    Diag(DiagCommand),
    /// Repeat a run from its run.json.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct DatasetArgs {
    #[arg(long, value_parser = parse_kind)]
    pub kind: DatasetKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Total number of points (default 20 for mixture, 50 for rings).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value = "dataset.csv")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct GpFieldArgs {
    /// Kernel spec as JSON.
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NOISE_VAR)]
    pub noise_var: f64,
    /// "lo,hi,res" for a square grid; defaults to a preset grid covering the data.
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub grid: Option<GridArg>,
    /// Overrides the kernel's Monte-Carlo seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Raise eigenvalues of K + σ²I to this floor if factorization fails.
    #[arg(long)]
    pub clip_eigenvalues: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct HmcFieldArgs {
    #[arg(long, value_parser = ["mlp", "rbfnet"], default_value = "mlp")]
    pub arch: String,
    /// Hidden widths of an MLP, e.g. "5,5".
    #[arg(long, value_delimiter = ',', default_value = "5,5")]
    pub widths: Vec<usize>,
    /// Hidden width of an RBF network.
    #[arg(long, default_value_t = 500)]
    pub width: usize,
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
    #[arg(long, value_parser = parse_prior, default_value = "width-aware")]
    pub prior: PriorKind,
    /// Default 1 for MLPs and 200 for RBF networks.
    #[arg(long)]
    pub sigma_w: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_b: f64,
    /// Standard deviation of the RBF centre prior.
    #[arg(long, default_value_t = 10.0)]
    pub sigma_mu: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_g: f64,
    /// Use σ_w²/H for the RBF output weights.
    #[arg(long)]
    pub scale_rbf_output: bool,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = DEFAULT_NOISE_VAR)]
    pub noise_var: f64,
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true)]
    pub grid: Option<GridArg>,
    #[arg(long, default_value_t = 5)]
    pub chains: usize,
    #[arg(long, default_value_t = 5000)]
    pub steps: usize,
    #[arg(long, default_value_t = 50)]
    pub leapfrog: usize,
    /// Default 1e-3 for widths up to 50 and 1e-4 above.
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1000)]
    pub keep: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Do not write samples.csv.
    #[arg(long)]
    pub skip_samples: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum DiagCommand {
    /// Error of Monte-Carlo NNGP diagonals against the closed form.
    McError(McErrorArgs),
    /// Kernel value against input distance for all training pairs.
    Distance(DistanceArgs),
    /// Rank correlation and differences of two std fields.
    Compare(CompareArgs),
}

#[derive(Args, Debug)]
pub struct McErrorArgs {
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_w: f64,
    #[arg(long, default_value_t = 1.0)]
    pub sigma_b: f64,
    #[arg(long = "Ns", alias = "ns", value_delimiter = ',', default_value = "100,1000,10000,100000")]
    pub ns: Vec<u64>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    /// Evaluation points "lo,hi,res" (square 2-D grid).
    #[arg(long, value_parser = parse_grid, allow_hyphen_values = true, default_value = "-6,6,5")]
    pub grid: GridArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct DistanceArgs {
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Overrides the kernel's Monte-Carlo seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    pub field_a: PathBuf,
    pub field_b: PathBuf,
    /// Unused; accepted for uniformity.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    pub run_json: PathBuf,
    /// Write outputs here instead of the recorded directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Ignored; the recorded seed is used.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Square grid given on the command line as `lo,hi,res`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridArg {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

fn parse_grid(s: &str) -> std::result::Result<GridArg, String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected \"lo,hi,res\", got {s:?}"));
    }
    let lo = parts[0].parse::<f64>().map_err(|e| format!("lo: {e}"))?;
    let hi = parts[1].parse::<f64>().map_err(|e| format!("hi: {e}"))?;
    let resolution = parts[2].parse::<usize>().map_err(|e| format!("res: {e}"))?;
    if !(lo < hi) || resolution < 2 {
        return Err(format!("need lo < hi and res ≥ 2, got {s:?}"));
    }
    Ok(GridArg { lo, hi, resolution })
}

fn parse_kind(s: &str) -> std::result::Result<DatasetKind, String> {
    match s {
        "mixture" => Ok(DatasetKind::Mixture),
        "rings" => Ok(DatasetKind::Rings),
        _ => Err(format!("unknown dataset kind {s:?} (mixture or rings)")),
    }
}

fn parse_prior(s: &str) -> std::result::Result<PriorKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Fully resolved parameters of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Dataset {
        kind: DatasetKind,
        seed: u64,
        n: usize,
        out: PathBuf,
    },
    GpField {
        kernel: KernelSpec,
        data: PathBuf,
        noise_var: f64,
        grid: GridSpec,
        clip_eigenvalues: Option<f64>,
        out: PathBuf,
    },
    HmcField {
        net: NetSpec,
        prior: PriorSpec,
        data: PathBuf,
        noise_var: f64,
        grid: GridSpec,
        hmc: HmcConfig,
        write_samples: bool,
        out: PathBuf,
    },
    McError {
        study: McErrorConfig,
        grid: GridSpec,
        out: PathBuf,
    },
    Distance {
        kernel: KernelSpec,
        data: PathBuf,
        out: PathBuf,
    },
    Compare {
        field_a: PathBuf,
        field_b: PathBuf,
        seed: u64,
        out: PathBuf,
    },
}

impl RunConfig {
    /// Directory receiving the outputs and `run.json`.
    pub fn out_dir(&self) -> PathBuf {
        match self {
            RunConfig::Dataset { out, .. } => out
                .parent()
                .filter(|p| !p.as_os_str().is_empty())
                .map_or_else(|| PathBuf::from("."), Path::to_path_buf),
            RunConfig::GpField { out, .. }
            | RunConfig::HmcField { out, .. }
            | RunConfig::McError { out, .. }
            | RunConfig::Distance { out, .. }
            | RunConfig::Compare { out, .. } => out.clone(),
        }
    }

    /// Same run writing into `dir`.
    pub fn redirect(&mut self, dir: &Path) {
        match self {
            RunConfig::Dataset { out, .. } => {
                let name = out.file_name().map_or_else(|| "dataset.csv".into(), |n| n.to_owned());
                *out = dir.join(name);
            }
            RunConfig::GpField { out, .. }
            | RunConfig::HmcField { out, .. }
            | RunConfig::McError { out, .. }
            | RunConfig::Distance { out, .. }
            | RunConfig::Compare { out, .. } => *out = dir.to_path_buf(),
        }
    }
}

/// Absolute form of an input path, so a run.json stays valid from any
/// working directory.
fn absolute(p: &Path) -> Result<PathBuf> {
    Ok(std::path::absolute(p)?)
}

fn grid_for(arg: Option<&GridArg>, data: &Dataset) -> GridSpec {
    match arg {
        Some(g) => GridSpec::square(data.dim().max(1), g.lo, g.hi, g.resolution),
        None => GridSpec::covering(data),
    }
}

pub fn resolve(command: Command) -> Result<RunConfig> {
    Ok(match command {
        Command::Dataset(a) => RunConfig::Dataset {
            kind: a.kind,
            seed: a.seed,
            n: a.n.unwrap_or(a.kind.default_size()),
            out: a.out,
        },
        Command::GpField(a) => {
            let mut kernel = KernelSpec::from_json_file(&a.kernel)?;
            if let (Some(s), KernelSpec::Nngp { mc_seed, .. }) = (a.seed, &mut kernel) {
                *mc_seed = s;
            }
            let data = load_csv(&a.data)?;
            RunConfig::GpField {
                kernel,
                data: absolute(&a.data)?,
                noise_var: a.noise_var,
                grid: grid_for(a.grid.as_ref(), &data),
                clip_eigenvalues: a.clip_eigenvalues,
                out: a.out,
            }
        }
        Command::HmcField(a) => {
            let data = load_csv(&a.data)?;
            let d = data.dim();
            let (net, default_sw) = match a.arch.as_str() {
                "mlp" => (NetSpec::mlp(d, &a.widths, a.activation), 1.0),
                _ => (NetSpec::rbf_net(d, a.width, a.sigma_g), 200.0),
            };
            let prior = PriorSpec {
                kind: a.prior,
                sigma_w: a.sigma_w.unwrap_or(default_sw),
                sigma_b: a.sigma_b,
                sigma_mu: a.sigma_mu,
                scale_rbf_output: a.scale_rbf_output,
            };
            let hmc = HmcConfig {
                chains: a.chains,
                steps: a.steps,
                leapfrog_steps: a.leapfrog,
                step_size: a
                    .step_size
                    .unwrap_or_else(|| HmcConfig::default_step_size(net.max_width())),
                burn_in: a.burn_in,
                keep: a.keep,
                seed: a.seed,
            };
            RunConfig::HmcField {
                net,
                prior,
                data: absolute(&a.data)?,
                noise_var: a.noise_var,
                grid: grid_for(a.grid.as_ref(), &data),
                hmc,
                write_samples: !a.skip_samples,
                out: a.out,
            }
        }
        Command::Diag(DiagCommand::McError(a)) => RunConfig::McError {
            study: McErrorConfig {
                activation: a.activation,
                depth: a.depth,
                sigma_w: a.sigma_w,
                sigma_b: a.sigma_b,
                sample_counts: a.ns,
                reps: a.reps,
                seed: a.seed,
            },
            grid: GridSpec::square(2, a.grid.lo, a.grid.hi, a.grid.resolution),
            out: a.out,
        },
        Command::Diag(DiagCommand::Distance(a)) => {
            let mut kernel = KernelSpec::from_json_file(&a.kernel)?;
            if let (Some(s), KernelSpec::Nngp { mc_seed, .. }) = (a.seed, &mut kernel) {
                *mc_seed = s;
            }
            RunConfig::Distance {
                kernel,
                data: absolute(&a.data)?,
                out: a.out,
            }
        }
        Command::Diag(DiagCommand::Compare(a)) => RunConfig::Compare {
            field_a: absolute(&a.field_a)?,
            field_b: absolute(&a.field_b)?,
            seed: a.seed,
            out: a.out,
        },
        Command::Rerun(a) => {
            let text = std::fs::read_to_string(&a.run_json)?;
            let mut config: RunConfig = serde_json::from_str(&text)?;
            if let Some(dir) = a.out {
                config.redirect(&dir);
            }
            config
        }
    })
}

fn write_run_json(config: &RunConfig, dir: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(dir.join("run.json"))?);
    serde_json::to_writer_pretty(&mut w, config)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn write_field(field: &UncertaintyField, grid: &GridSpec, dir: &Path) -> Result<()> {
    field.write_csv(dir.join("field.csv"))?;
    if grid.dim() == 2 {
        field.write_std_pgm(dir, grid.resolution)?;
        field.write_mean_pgm(dir, grid.resolution)?;
    }
    Ok(())
}

/// Run a resolved config. Returns the summary line for standard output.
pub fn execute(config: &RunConfig) -> Result<String> {
    let dir = config.out_dir();
    std::fs::create_dir_all(&dir)?;
    let summary = match config {
        RunConfig::Dataset { kind, seed, n, out } => {
            let data = kind.generate(*seed, *n)?;
            save_csv(&data, out)?;
            format!("wrote {} points to {}", data.len(), out.display())
        }
        RunConfig::GpField {
            kernel,
            data,
            noise_var,
            grid,
            clip_eigenvalues,
            ..
        } => {
            let data = load_csv(data)?;
            let points = make_grid(grid)?;
            let gp = ConditionedGp::fit_with_clipping(kernel, &data, *noise_var, *clip_eigenvalues)?;
            let field = gp.field(&points)?;
            write_field(&field, grid, &dir)?;
            let max = field.std.max();
            format!(
                "{}: {} training points, {} grid points, max std {max}, jitter {}",
                kernel.name(),
                data.len(),
                field.len(),
                gp.jitter_applied()
            )
        }
        RunConfig::HmcField {
            net,
            prior,
            data,
            noise_var,
            grid,
            hmc,
            write_samples,
            ..
        } => {
            let data = load_csv(data)?;
            let points = make_grid(grid)?;
            let (samples, reports) = hmc_sample(net, prior, &data, *noise_var, hmc)?;
            let field = predictive_moments(net, &samples, &points)?;
            write_field(&field, grid, &dir)?;
            let mut acc = csv::Writer::from_path(dir.join("acceptance.csv"))?;
            acc.write_record(["chain", "seed", "accepted", "proposals", "acceptance_rate", "init_attempts"])?;
            for r in &reports {
                acc.write_record([
                    r.chain.to_string(),
                    r.seed.to_string(),
                    r.accepted.to_string(),
                    r.proposals.to_string(),
                    r.acceptance_rate.to_string(),
                    r.init_attempts.to_string(),
                ])?;
            }
            acc.flush()?;
            if *write_samples {
                let mut w = csv::Writer::from_writer(BufWriter::new(File::create(dir.join("samples.csv"))?));
                w.write_record(net.layout().column_names())?;
                for s in &samples {
                    w.write_record(s.values.iter().map(f64::to_string))?;
                }
                w.flush()?;
            }
            let rates: Vec<String> = reports.iter().map(|r| format!("{:.3}", r.acceptance_rate)).collect();
            format!(
                "{} samples, acceptance [{}], max std {}",
                samples.len(),
                rates.join(", "),
                field.std.max()
            )
        }
        RunConfig::McError { study, grid, .. } => {
            let points = make_grid(grid)?;
            let curve = mc_error_study(study, &points)?;
            curve.write_csv(dir.join("mc_error.csv"))?;
            let parts: Vec<String> = curve
                .sample_counts
                .iter()
                .zip(&curve.mean_abs_rel_error)
                .map(|(n, e)| format!("N={n}: {e:.3e}"))
                .collect();
            format!("mean relative error {}", parts.join(", "))
        }
        RunConfig::Distance { kernel, data, .. } => {
            let data = load_csv(data)?;
            let scatter = distance_awareness(kernel, &data.x)?;
            scatter.write_csv(dir.join("distance.csv"))?;
            let monotone = scatter.monotonicity_violation().is_none();
            format!(
                "{}: {} pairs, non-increasing in distance: {monotone}",
                kernel.name(),
                scatter.pairs.len()
            )
        }
        RunConfig::Compare { field_a, field_b, .. } => {
            let a = UncertaintyField::read_csv(field_a)?;
            let b = UncertaintyField::read_csv(field_b)?;
            let c = field_compare(&a, &b)?;
            let mut w = csv::Writer::from_path(dir.join("compare.csv"))?;
            w.write_record(["spearman_rho", "max_abs_diff", "mean_abs_diff"])?;
            w.write_record([
                c.spearman_rho.to_string(),
                c.max_abs_diff.to_string(),
                c.mean_abs_diff.to_string(),
            ])?;
            w.flush()?;
            format!(
                "rho={} max_abs_diff={} mean_abs_diff={}",
                c.spearman_rho, c.max_abs_diff, c.mean_abs_diff
            )
        }
    };
    write_run_json(config, &dir)?;
    Ok(summary)
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NotPositiveDefinite { .. } | Error::Kernel(_) => EXIT_NUMERICAL,
        Error::Divergent { .. } | Error::InitFailed { .. } => EXIT_SAMPLER,
        Error::InvalidArgument(_)
        | Error::DimensionMismatch { .. }
        | Error::Malformed { .. }
        | Error::Csv(_)
        | Error::Json(_) => EXIT_USAGE,
        Error::Io(_) => EXIT_IO,
    }
}

fn color_enabled() -> bool {
    std::env::var_os("NO_COLOR").is_none_or(|v| v.is_empty()) && std::io::stderr().is_terminal()
}

/// Parse `args`, run, print the summary, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let color = color_enabled();
    let cmd = <Cli as clap::CommandFactory>::command().color(if color {
        ColorChoice::Auto
    } else {
        ColorChoice::Never
    });
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let cli = match <Cli as clap::FromArgMatches>::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_USAGE;
        }
    };
    match resolve(cli.command).and_then(|c| execute(&c)) {
        Ok(summary) => {
            println!("{summary}");
            EXIT_OK
        }
        Err(e) => {
            if color {
                eprintln!("\x1b[1;31merror:\x1b[0m {e}");
            } else {
                eprintln!("error: {e}");
            }
            exit_code(&e)
        }
    }
}
