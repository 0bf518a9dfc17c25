mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use bounded_diffusion::pipeline::{self, ModelFile, StageError};
use bounded_diffusion::sim::{self, Ensemble, Variant};
use bounded_diffusion::validate::{self, ValidationReport};
use bounded_diffusion::{npestim, stats, Error};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::{EnsembleFormat, InputError, RunConfig};

/// Fit, simulate and validate bounded diffusion models of daily series.
///
/// Settings come from a TOML file (`--config`) with the sections
/// `[input]`, `[trend]`, `[estimation]`, `[extremes]`, `[simulation]` and
/// `[validation]` plus the top-level keys `variant` and `out`; unknown keys
/// are rejected. Run `bdiff example-config` for a complete file with the
/// defaults. Command-line flags override the file.
///
/// Exit codes: 0 success, 1 validation criteria not met, 2 usage or input
/// error, 3 numerical failure.
#[derive(Debug, Parser)]
#[command(name = "bdiff", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed of the simulation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Also write CSV data for density, curve and parameter plots.
    #[arg(long, global = true)]
    emit_plot_data: bool,
    /// Only report errors.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate trends, boundaries, drift and diffusion; writes model.json.
    Fit {
        /// Input CSV (overrides `[input] path`).
        #[arg(long)]
        input: Option<PathBuf>,
        /// model1 (no trends), model2 (mean trend) or model3 (mean and scale).
        #[arg(long)]
        variant: Option<Variant>,
    },
    /// Generate an ensemble from a fitted model.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n_paths: Option<usize>,
        #[arg(long, value_enum)]
        format: Option<FormatArg>,
    },
    /// Compare the observations with one or more ensembles.
    Validate {
        /// Ensemble file, optionally prefixed with its variant
        /// (`model2=path`); repeat for several variants.
        #[arg(long = "ensemble", required = true)]
        ensembles: Vec<String>,
        /// Observations (overrides `[input] path`).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Print the tables of a validation report.
    Report {
        /// report.json or the directory holding it.
        path: PathBuf,
    },
    /// Print a configuration file with every default value.
    ExampleConfig,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
enum FormatArg {
    Csv,
    Binary,
}

#[derive(Debug)]
struct ValidationFailed;

impl std::fmt::Display for ValidationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("validation criteria not met")
    }
}

impl std::error::Error for ValidationFailed {}

#[derive(Debug, Serialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    package_version: &'a str,
    seed: Option<u64>,
    config: &'a RunConfig,
    inputs: Vec<FileHash>,
    outputs: Vec<FileHash>,
}

fn hash_file(path: &Path) -> Result<FileHash> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(FileHash {
        path: path.display().to_string(),
        sha256: pipeline::sha256_hex(&bytes),
    })
}

fn write_manifest(
    out: &Path,
    command: &str,
    seed: Option<u64>,
    cfg: &RunConfig,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> Result<()> {
    let manifest = Manifest {
        command,
        package_version: env!("CARGO_PKG_VERSION"),
        seed,
        config: cfg,
        inputs: inputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
        outputs: outputs.iter().map(|p| hash_file(p)).collect::<Result<_>>()?,
    };
    std::fs::write(
        out.join(format!("manifest_{command}.json")),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

struct Context_ {
    cfg: RunConfig,
    emit_plot_data: bool,
    quiet: bool,
}

impl Context_ {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let out = self.cfg.out.clone();
        std::fs::create_dir_all(&out)
            .map_err(|e| InputError(format!("cannot create output directory {}: {e}", out.display())))?;
        Ok(out)
    }
}

fn cmd_fit(ctx: &mut Context_, input: Option<PathBuf>, variant: Option<Variant>) -> Result<()> {
    if let Some(p) = input {
        ctx.cfg.input.path = Some(p);
    }
    if let Some(v) = variant {
        ctx.cfg.variant = v;
    }
    let (series, input_path) = ctx.cfg.load_series()?;
    let out = ctx.out_dir()?;
    let fit_cfg = ctx.cfg.fit_config();
    let fitted = match pipeline::fit(&series, &fit_cfg) {
        Ok(f) => f,
        Err(err) => {
            let q = out.join("quarantine");
            std::fs::create_dir_all(&q)?;
            write_json(&q.join("partial.json"), &err.partial)?;
            std::fs::write(q.join("error.txt"), format!("{err}\n"))?;
            return Err(err.into());
        }
    };
    let model_path = out.join("model.json");
    fitted.model.save(&model_path)?;
    let diag_path = out.join("fit_diagnostics.json");
    write_json(&diag_path, &fitted.diagnostics)?;
    let mut outputs = vec![model_path.clone(), diag_path];
    if let Some(w) = &fitted.diagnostics.whiteness {
        let p = out.join("residual_report.json");
        write_json(&p, w)?;
        outputs.push(p);
    }
    if ctx.emit_plot_data {
        let plot = out.join("plot");
        std::fs::create_dir_all(&plot)?;
        let d = &fitted.diagnostics;
        let curves = [
            ("drift_loess.csv", &d.drift_loess),
            ("kernel_drift.csv", &d.kernel_drift),
            ("kernel_diffusion.csv", &d.kernel_diffusion),
        ];
        for (name, c) in curves {
            if let Some(c) = c {
                c.write_csv(plot.join(name))?;
                outputs.push(plot.join(name));
            }
        }
        if let Some(s) = &d.spline {
            write_json(&plot.join("spline.json"), s)?;
            let grid = s.grid();
            let curve = npestim::CurveEstimate {
                values: s.eval_many(&grid),
                n_local: vec![0; grid.len()],
                grid,
            };
            curve.write_csv(plot.join("spline_diffusion.csv"))?;
            outputs.push(plot.join("spline.json"));
            outputs.push(plot.join("spline_diffusion.csv"));
        }
        let m = &fitted.model.model;
        let lo = m.boundaries.r_lower.unwrap_or(d.z_range.0 - 1.0);
        let hi = m.boundaries.r_upper.unwrap_or(d.z_range.1 + 1.0);
        let grid = stats::linspace(lo, hi, npestim::CURVE_GRID);
        let model_curve = npestim::CurveEstimate {
            values: m.eval_diff_many(&grid),
            n_local: vec![0; grid.len()],
            grid,
        };
        model_curve.write_csv(plot.join("model_diffusion.csv"))?;
        outputs.push(plot.join("model_diffusion.csv"));
        for (name, c) in [("mean_trend.csv", &fitted.model.mean_trend), ("scale_trend.csv", &fitted.model.scale_trend)] {
            if let Some(c) = c {
                c.write_csv(plot.join(name))?;
                outputs.push(plot.join(name));
            }
        }
    }
    write_manifest(&out, "fit", None, &ctx.cfg, &[input_path], &outputs)?;
    let d = &fitted.diagnostics;
    ctx.say(format!(
        "fitted {} on {} records ({} transitions): beta = {:.4}, boundaries ({}, {})",
        ctx.cfg.variant,
        d.n_records,
        d.n_pairs,
        fitted.model.model.drift.beta,
        fmt_bound(fitted.model.model.boundaries.r_lower),
        fmt_bound(fitted.model.model.boundaries.r_upper),
    ));
    if let Some(w) = &d.whiteness {
        ctx.say(format!("residual whiteness: {}", if w.pass { "pass" } else { "FAIL" }));
    }
    for note in &d.gev_notes {
        log::warn!("{note}");
    }
    ctx.say(format!("model written to {}", model_path.display()));
    Ok(())
}

fn fmt_bound(r: Option<f64>) -> String {
    r.map_or("none".to_string(), |r| format!("{r:.4}"))
}

fn cmd_simulate(
    ctx: &mut Context_,
    seed: Option<u64>,
    model_path: PathBuf,
    n_paths: Option<usize>,
    format: Option<FormatArg>,
) -> Result<()> {
    if !model_path.exists() {
        anyhow::bail!(InputError(format!("model file {} does not exist", model_path.display())));
    }
    let model = ModelFile::load(&model_path).map_err(|e| match e {
        Error::Format(_) | Error::Json(_) | Error::Io(_) => {
            anyhow::Error::new(InputError(format!("{}: {e}", model_path.display())))
        }
        other => other.into(),
    })?;
    let sim_cfg = &mut ctx.cfg.simulation;
    if let Some(s) = seed {
        sim_cfg.seed = s;
    }
    if let Some(n) = n_paths {
        sim_cfg.n_paths = n;
    }
    if let Some(f) = format {
        sim_cfg.format = match f {
            FormatArg::Csv => EnsembleFormat::Csv,
            FormatArg::Binary => EnsembleFormat::Binary,
        };
    }
    let trends = model.trends().map_err(|e| InputError(e.to_string()))?;
    let ensemble = sim::simulate_ensemble(
        &model.model,
        &trends,
        model.variant,
        model.layout.n_records,
        &ctx.cfg.simulation.sim_config(),
    )?;
    let out = ctx.out_dir()?;
    let path = match ctx.cfg.simulation.format {
        EnsembleFormat::Csv => {
            let p = out.join(format!("ensemble_{}.csv", model.variant));
            sim::write_csv(&ensemble, &p)?;
            p
        }
        EnsembleFormat::Binary => {
            let p = out.join(format!("ensemble_{}.bin", model.variant));
            sim::write_binary(&ensemble, &p)?;
            p
        }
    };
    let seed = ctx.cfg.simulation.seed;
    write_manifest(&out, "simulate", Some(seed), &ctx.cfg, &[model_path], std::slice::from_ref(&path))?;
    let clamps: usize = ensemble.clamp_events.iter().sum();
    ctx.say(format!(
        "{} paths of {} records ({}) written to {}{}",
        ensemble.n_paths(),
        ensemble.path_length,
        model.variant,
        path.display(),
        if clamps > 0 { format!("; {clamps} boundary clamp(s)") } else { String::new() }
    ));
    Ok(())
}

fn parse_ensemble_arg(arg: &str, default: Variant) -> Result<(Variant, PathBuf)> {
    if let Some((v, p)) = arg.split_once('=') {
        if let Ok(variant) = v.parse::<Variant>() {
            return Ok((variant, PathBuf::from(p)));
        }
    }
    let path = PathBuf::from(arg);
    let guessed = Variant::ALL
        .into_iter()
        .find(|v| {
            path.file_stem()
                .and_then(|s| s.to_str())
                .is_some_and(|s| s.ends_with(v.name()))
        })
        .unwrap_or(default);
    Ok((guessed, path))
}

fn cmd_validate(ctx: &mut Context_, ensembles: Vec<String>, input: Option<PathBuf>) -> Result<()> {
    if let Some(p) = input {
        ctx.cfg.input.path = Some(p);
    }
    let (observed, input_path) = ctx.cfg.load_series()?;
    let mut loaded: Vec<(Variant, Ensemble)> = Vec::new();
    let mut inputs = vec![input_path];
    for arg in &ensembles {
        let (variant, path) = parse_ensemble_arg(arg, ctx.cfg.variant)?;
        if !path.exists() {
            anyhow::bail!(InputError(format!("ensemble file {} does not exist", path.display())));
        }
        let e = sim::read_ensemble(&path)
            .map_err(|e| InputError(format!("{}: {e}", path.display())))?;
        if loaded.iter().any(|(v, _)| *v == variant) {
            anyhow::bail!(InputError(format!("two ensembles given for {variant}")));
        }
        loaded.push((variant, e));
        inputs.push(path);
    }
    let refs: Vec<(Variant, &Ensemble)> = loaded.iter().map(|(v, e)| (*v, e)).collect();
    let report = validate::full_report(&observed, &refs, &ctx.cfg.validation)
        .map_err(|e| match e {
            Error::InvalidInput(m) => anyhow::Error::new(InputError(m)),
            other => other.into(),
        })?;
    let out = ctx.out_dir()?.join("validation");
    report.write(&out, ctx.emit_plot_data)?;
    let mut outputs = vec![out.join("report.json"), out.join("quantiles.csv"), out.join("clusters.csv")];
    if ctx.emit_plot_data {
        outputs.push(out.join("gev_params.csv"));
        if out.join("density.csv").exists() {
            outputs.push(out.join("density.csv"));
        }
    }
    write_manifest(&out, "validate", None, &ctx.cfg, &inputs, &outputs)?;
    ctx.say(report.render_text());
    if !report.pass {
        return Err(ValidationFailed.into());
    }
    Ok(())
}

fn cmd_report(ctx: &Context_, path: PathBuf) -> Result<()> {
    let file = if path.is_dir() { path.join("report.json") } else { path };
    let text = std::fs::read_to_string(&file)
        .map_err(|e| InputError(format!("cannot read {}: {e}", file.display())))?;
    let report: ValidationReport = serde_json::from_str(&text)
        .map_err(|e| InputError(format!("{} is not a validation report: {e}", file.display())))?;
    if let Some(out) = &ctx.cfg_out_override() {
        report.write(out, ctx.emit_plot_data)?;
    }
    println!("{}", report.render_text());
    if !report.pass {
        return Err(ValidationFailed.into());
    }
    Ok(())
}

impl Context_ {
    fn cfg_out_override(&self) -> Option<PathBuf> {
        self.emit_plot_data.then(|| self.cfg.out.join("validation"))
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ValidationFailed>().is_some() {
            return 1;
        }
        if cause.downcast_ref::<InputError>().is_some() {
            return 2;
        }
        if let Some(s) = cause.downcast_ref::<StageError>() {
            return if s.source.is_numerical() { 3 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 2;
        }
    }
    3
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut ctx = Context_ {
        cfg,
        emit_plot_data: cli.global.emit_plot_data,
        quiet: cli.global.quiet,
    };
    if let Some(out) = cli.global.out {
        ctx.cfg.out = out;
    }
    if let Some(seed) = cli.global.seed {
        ctx.cfg.simulation.seed = seed;
    }
    match cli.command {
        Command::Fit { input, variant } => cmd_fit(&mut ctx, input, variant),
        Command::Simulate {
            model,
            n_paths,
            format,
        } => cmd_simulate(&mut ctx, cli.global.seed, model, n_paths, format),
        Command::Validate { ensembles, input } => cmd_validate(&mut ctx, ensembles, input),
        Command::Report { path } => cmd_report(&ctx, path),
        Command::ExampleConfig => {
            print!("{}", config::example_config());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.global.quiet { "error" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if code != 1 {
                eprintln!("error: {err:#}");
            }
            ExitCode::from(code)
        }
    }
}
