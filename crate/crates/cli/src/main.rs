//! `anosov`: batch experiment driver for hyperbolic toral endomorphisms.
//!
//! Exit status is 0 when every asserted check passes, 1 when a check fails
//! and 2 when the run stops on an error (for example a periodic obstruction
//! or a failed cone certificate).

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};

use anosov_core::{Error, Result};
use config::{parse_matrix, ExperimentConfig};
use output::Output;

#[derive(Parser, Debug)]
#[command(name = "anosov", version, about = "Experiments on hyperbolic toral endomorphisms")]
struct Cli {
    /// Model file (TOML).
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    /// Output directory; defaults to `anosov-out/<subcommand>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker cap (0 = all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Experiment configuration (TOML); flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Cone-field certificate and construction checks.
    Certify(CertifyArgs),
    /// Periodic orbit census and periodic-data defect.
    Periodic(PeriodicArgs),
    /// Transfer function of log ‖Df|Eᵘ‖ − λᵘ.
    Livsic(LivsicArgs),
    /// Scaling of the conformal unstable metric over random leaf pieces.
    Conformal(ConformalArgs),
    /// Invariant density, conditional densities and entropy identities.
    Srb(SrbArgs),
    /// Conjugacy to the linear model, method agreement and regularity.
    Conjugacy(ConjugacyArgs),
    /// Closing lemma and concatenated orbit blocks.
    Specification(SpecificationArgs),
    /// Eigenvalue diagnostics of an integer matrix of any size.
    Spectrum(SpectrumArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Certify(_) => "certify",
            Command::Periodic(_) => "periodic",
            Command::Livsic(_) => "livsic",
            Command::Conformal(_) => "conformal",
            Command::Srb(_) => "srb",
            Command::Conjugacy(_) => "conjugacy",
            Command::Specification(_) => "specification",
            Command::Spectrum(_) => "spectrum",
        }
    }
}

#[derive(Args, Debug)]
struct CertifyArgs {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    half_angle: Option<f64>,
}

#[derive(Args, Debug)]
struct PeriodicArgs {
    #[arg(long)]
    max_period: Option<u32>,
    #[arg(long)]
    rigidity_tolerance: Option<f64>,
    /// Fail unless the periodic exponents match the linear model.
    #[arg(long)]
    require_rigid: bool,
}

#[derive(Args, Debug)]
struct LivsicArgs {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    residual_tolerance: Option<f64>,
    #[arg(long)]
    obstruction_tolerance: Option<f64>,
}

#[derive(Args, Debug)]
struct ConformalArgs {
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
}

#[derive(Args, Debug)]
struct SrbArgs {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    cutoff: Option<usize>,
    #[arg(long)]
    boxes: Option<usize>,
    #[arg(long)]
    invariance_tolerance: Option<f64>,
    #[arg(long)]
    birkhoff_length: Option<usize>,
    #[arg(long)]
    separated_points: Option<usize>,
}

#[derive(Args, Debug)]
struct ConjugacyArgs {
    #[arg(long)]
    grid: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    max_sweeps: Option<usize>,
    #[arg(long)]
    residual_grid: Option<usize>,
    #[arg(long)]
    residual_tolerance: Option<f64>,
    /// Skip the leaf ODE and density-ratio constructions.
    #[arg(long)]
    no_methods: bool,
}

#[derive(Args, Debug)]
struct SpecificationArgs {
    /// Comma-separated block lengths.
    #[arg(long)]
    blocks: Option<String>,
    #[arg(long)]
    gap: Option<usize>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct SpectrumArgs {
    /// Rows separated by `;`, entries by `,`, e.g. "2,1,0;1,1,0;0,0,2".
    #[arg(long)]
    matrix: Option<String>,
}

fn set<T>(dst: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *dst = v;
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if cli.model.is_some() {
        cfg.model = cli.model.clone();
    }
    if cli.out.is_some() {
        cfg.out = cli.out.clone();
    }
    set(&mut cfg.seed, cli.seed);
    set(&mut cfg.threads, cli.threads);
    match &cli.command {
        Command::Certify(a) => {
            let c = &mut cfg.certify;
            set(&mut c.grid, a.grid);
            set(&mut c.lambda, a.lambda);
            set(&mut c.unstable_half_angle, a.half_angle);
            set(&mut c.stable_half_angle, a.half_angle);
        }
        Command::Periodic(a) => {
            let c = &mut cfg.periodic;
            set(&mut c.max_period, a.max_period);
            set(&mut c.rigidity_tolerance, a.rigidity_tolerance);
            c.require_rigid |= a.require_rigid;
        }
        Command::Livsic(a) => {
            let c = &mut cfg.livsic;
            set(&mut c.grid, a.grid);
            set(&mut c.cutoff, a.cutoff);
            set(&mut c.depth, a.depth);
            set(&mut c.residual_tolerance, a.residual_tolerance);
            set(&mut c.obstruction_tolerance, a.obstruction_tolerance);
        }
        Command::Conformal(a) => {
            set(&mut cfg.conformal.pairs, a.pairs);
            if a.tolerance.is_some() {
                cfg.conformal.tolerance = a.tolerance;
            }
            set(&mut cfg.livsic.grid, a.grid);
            set(&mut cfg.livsic.cutoff, a.cutoff);
        }
        Command::Srb(a) => {
            let c = &mut cfg.srb;
            set(&mut c.grid, a.grid);
            set(&mut c.cutoff, a.cutoff);
            set(&mut c.boxes, a.boxes);
            set(&mut c.invariance_tolerance, a.invariance_tolerance);
            set(&mut c.birkhoff_length, a.birkhoff_length);
            set(&mut c.separated_points, a.separated_points);
        }
        Command::Conjugacy(a) => {
            let c = &mut cfg.conjugacy;
            set(&mut c.grid, a.grid);
            set(&mut c.tolerance, a.tolerance);
            set(&mut c.max_sweeps, a.max_sweeps);
            set(&mut c.residual_grid, a.residual_grid);
            set(&mut c.residual_tolerance, a.residual_tolerance);
            c.methods &= !a.no_methods;
        }
        Command::Specification(a) => {
            let c = &mut cfg.specification;
            if let Some(b) = &a.blocks {
                c.blocks = b
                    .split(',')
                    .map(|v| {
                        v.trim()
                            .parse::<usize>()
                            .map_err(|e| Error::Parse(format!("block length {:?}: {e}", v.trim())))
                    })
                    .collect::<Result<_>>()?;
            }
            set(&mut c.gap, a.gap);
            set(&mut c.tolerance, a.tolerance);
            set(&mut c.noise, a.noise);
        }
        Command::Spectrum(a) => {
            if let Some(m) = &a.matrix {
                cfg.spectrum.matrix = Some(parse_matrix(m)?);
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn error_json(e: &Error) -> Value {
    json!({ "code": e.code(), "message": e.to_string() })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            return ExitCode::from(2);
        }
    };
    let dir = cfg
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("anosov-out").join(name));
    let mut out = match Output::create(&dir) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            return ExitCode::from(2);
        }
    };
    let mut run = commands::Run::new(&cfg, &mut out);
    let outcome = commands::dispatch(name, &mut run);
    let (checks, results, model, section) = run.finish();

    let passed = outcome.is_ok() && checks.iter().all(|c| c.passed);
    let mut report = json!({
        "command": name,
        "seed": cfg.seed,
        "model": model,
        "config": section,
        "checks": checks,
        "passed": passed,
        "results": results,
        "files": out.files(),
    });
    if let Err(e) = &outcome {
        report["error"] = error_json(e);
    }
    for c in &checks {
        println!(
            "{} {} = {:.6e} (tolerance {:.1e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.value,
            c.tolerance
        );
    }
    if let Err(e) = out.json("report.json", &report) {
        eprintln!("error[{}]: {e}", e.code());
        return ExitCode::from(2);
    }
    println!("report: {}", out.dir().join("report.json").display());
    match outcome {
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(2)
        }
        Ok(()) if passed => ExitCode::SUCCESS,
        Ok(()) => ExitCode::from(1),
    }
}
