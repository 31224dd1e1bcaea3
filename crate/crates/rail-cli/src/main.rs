//! Benchmark runner CLI: single simulations, convergence studies, CSV output.
//!
//! Configuration precedence: command-line flags > `--config` key=value file >
//! the problem's own defaults. Exit codes: 0 success, 2 configuration error,
//! 3 numeric failure.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rail_core::driver::{
    emit_csv, output_dir, run_convergence_study, run_simulation, ReferenceSpec, RunConfig,
    SchemeId, StepSize, TruncationKind, WeightKind,
};
use rail_core::problems::{all_benchmarks, benchmark_by_name, LBFP_WEIGHT_DELTA};
use rail_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "rail",
    version,
    about = "Low-rank implicit integrator benchmark runner"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write per-step diagnostics as CSV.
    Run(RunArgs),
    /// Run a scheme over a ladder of lambda values and report observed orders.
    Converge(ConvergeArgs),
    /// List the available benchmark problems and their default parameters.
    ListProblems,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Problem id (see `list-problems`).
    #[arg(long)]
    problem: Option<String>,
    /// Time scheme: be | dirk2 | dirk3 | imex111 | imex222 | imex443.
    #[arg(long)]
    scheme: Option<String>,
    /// Grid points per dimension (even).
    #[arg(long)]
    n: Option<usize>,
    /// Time step as a multiple of dx; exclusive with --dt.
    #[arg(long)]
    lambda: Option<f64>,
    /// Absolute time step; exclusive with --lambda.
    #[arg(long)]
    dt: Option<f64>,
    /// Final time.
    #[arg(long)]
    t_final: Option<f64>,
    /// Singular value truncation tolerance.
    #[arg(long)]
    eps: Option<f64>,
    /// Initial rank (the initial condition is padded or trimmed to this).
    #[arg(long)]
    r0: Option<usize>,
    /// Truncation policy: svd | conservative.
    #[arg(long)]
    truncation: Option<String>,
    /// Weight for the conservative truncation: uniform | maxwellian[:delta].
    #[arg(long)]
    weight: Option<String>,
    /// Output CSV path; defaults to <output-dir>/<problem>-<scheme>.csv.
    /// The output directory honors $RAIL_OUTPUT_DIR.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Reference for error columns/studies: exact | fine:N:LAMBDA:SCHEME | none.
    #[arg(long)]
    reference: Option<String>,
    /// key=value configuration file; flags given here override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ConvergeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Comma-separated lambda ladder, e.g. "4,2,1,0.5".
    #[arg(long)]
    lambdas: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Converge(args) => cmd_converge(args),
        Command::ListProblems => cmd_list(),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                Error::Numerical(_) | Error::SingularPencil(_) => ExitCode::from(3),
                Error::Io { .. } => ExitCode::from(1),
            }
        }
    }
}

/// Flat key=value file; '#' starts a comment, blank lines are skipped.
fn read_config_file(path: &PathBuf) -> Result<HashMap<String, String>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "{}:{}: expected key=value, got '{line}'",
                path.display(),
                lineno + 1
            )));
        };
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn parse_field<T: std::str::FromStr>(
    map: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| Error::Config(format!("could not parse {key}='{raw}'"))),
    }
}

fn parse_truncation(s: &str) -> Result<TruncationKind> {
    match s {
        "svd" => Ok(TruncationKind::Svd),
        "conservative" => Ok(TruncationKind::Conservative),
        other => Err(Error::Config(format!(
            "unknown truncation '{other}' (expected svd|conservative)"
        ))),
    }
}

fn parse_weight(s: &str) -> Result<WeightKind> {
    if s == "uniform" {
        return Ok(WeightKind::Uniform);
    }
    if let Some(rest) = s.strip_prefix("maxwellian") {
        let delta = match rest.strip_prefix(':') {
            None if rest.is_empty() => LBFP_WEIGHT_DELTA,
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("bad maxwellian delta '{v}'")))?,
            _ => return Err(Error::Config(format!("unknown weight '{s}'"))),
        };
        return Ok(WeightKind::Maxwellian { delta });
    }
    Err(Error::Config(format!(
        "unknown weight '{s}' (expected uniform|maxwellian[:delta])"
    )))
}

fn parse_reference(s: &str) -> Result<ReferenceSpec> {
    match s {
        "exact" => Ok(ReferenceSpec::Exact),
        "none" => Ok(ReferenceSpec::NoReference),
        other => {
            let parts: Vec<&str> = other.split(':').collect();
            if parts.len() == 4 && parts[0] == "fine" {
                let n = parts[1]
                    .parse()
                    .map_err(|_| Error::Config("bad reference grid size".into()))?;
                let lambda = parts[2]
                    .parse()
                    .map_err(|_| Error::Config("bad reference lambda".into()))?;
                let scheme = SchemeId::parse(parts[3])?;
                Ok(ReferenceSpec::Fine { n, lambda, scheme })
            } else {
                Err(Error::Config(format!(
                    "unknown reference '{other}' (expected exact|fine:N:LAMBDA:SCHEME|none)"
                )))
            }
        }
    }
}

/// Merge CLI flags over the config file over the problem defaults.
fn build_config(args: &RunArgs) -> Result<RunConfig> {
    let file = match &args.config {
        Some(path) => read_config_file(path)?,
        None => HashMap::new(),
    };
    let problem = args
        .problem
        .clone()
        .or_else(|| file.get("problem").cloned())
        .ok_or_else(|| Error::Config("no problem given (use --problem or a config file)".into()))?;
    let spec = benchmark_by_name(&problem)?;

    let scheme_name = args
        .scheme
        .clone()
        .or_else(|| file.get("scheme").cloned())
        .unwrap_or_else(|| {
            if spec.has_advection {
                "imex222"
            } else {
                "dirk2"
            }
            .into()
        });
    let mut cfg = RunConfig::for_problem(&spec, SchemeId::parse(&scheme_name)?);

    if let Some(n) = args.n.or(parse_field(&file, "n")?) {
        cfg.n = n;
    }
    let lambda = args.lambda.or(parse_field(&file, "lambda")?);
    let dt = args.dt.or(parse_field(&file, "dt")?);
    match (lambda, dt) {
        (Some(_), Some(_)) => return Err(Error::Config("give exactly one of lambda / dt".into())),
        (Some(l), None) => cfg.step = StepSize::Lambda(l),
        (None, Some(d)) => cfg.step = StepSize::Dt(d),
        (None, None) => {}
    }
    if let Some(t) = args.t_final.or(parse_field(&file, "t_final")?) {
        cfg.t_final = t;
    }
    if let Some(e) = args.eps.or(parse_field(&file, "eps")?) {
        cfg.eps = e;
    }
    if let Some(r) = args.r0.or(parse_field(&file, "r0")?) {
        cfg.r0 = r;
    }
    if let Some(t) = args
        .truncation
        .as_deref()
        .or(file.get("truncation").map(|s| s.as_str()))
    {
        cfg.truncation = parse_truncation(t)?;
    }
    if let Some(w) = args
        .weight
        .as_deref()
        .or(file.get("weight").map(|s| s.as_str()))
    {
        cfg.weight = Some(parse_weight(w)?);
    }
    if let Some(r) = args
        .reference
        .as_deref()
        .or(file.get("reference").map(|s| s.as_str()))
    {
        cfg.reference = parse_reference(r)?;
    }
    cfg.output = args
        .output
        .clone()
        .or_else(|| file.get("output").map(PathBuf::from));
    Ok(cfg)
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let cfg = build_config(&args)?;
    let out = run_simulation(&cfg)?;
    let path = cfg
        .output
        .clone()
        .unwrap_or_else(|| output_dir().join(format!("{}-{}.csv", cfg.problem, cfg.scheme.name())));
    emit_csv(&out.records, &path)?;
    let last = out.records.last().expect("at least one record");
    println!(
        "{} / {}: {} steps to t = {}, final rank {}, relative mass deviation {:.3e}",
        cfg.problem,
        cfg.scheme.name(),
        last.step,
        last.time,
        last.rank,
        last.rel_mass_dev,
    );
    if let Some(err) = last.l1_error {
        println!("final L1 error vs exact solution: {err:.6e}");
    }
    if let Some(decay) = last.decay_l1 {
        println!("final ||f - f_M||_1: {decay:.6e}");
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_converge(args: ConvergeArgs) -> Result<()> {
    let cfg = build_config(&args.run)?;
    let file = match &args.run.config {
        Some(path) => read_config_file(path)?,
        None => HashMap::new(),
    };
    let ladder_text = args
        .lambdas
        .clone()
        .or_else(|| file.get("lambdas").cloned())
        .ok_or_else(|| Error::Config("no lambda ladder given (use --lambdas)".into()))?;
    let lambdas: Vec<f64> = ladder_text
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad lambda '{s}'")))
        })
        .collect::<Result<_>>()?;

    let table = run_convergence_study(&cfg, &lambdas)?;
    println!(
        "{} / {}: L1 error at t = {} vs {}",
        cfg.problem,
        cfg.scheme.name(),
        cfg.t_final,
        match cfg.reference {
            ReferenceSpec::Exact => "exact solution".to_string(),
            ReferenceSpec::Fine { n, lambda, scheme } =>
                format!("fine run (n={n}, lambda={lambda}, {})", scheme.name()),
            ReferenceSpec::NoReference => "?".to_string(),
        }
    );
    println!(
        "{:>8} {:>12} {:>14} {:>8}",
        "lambda", "dt", "l1_error", "order"
    );
    for row in &table.rows {
        match row.observed_order {
            Some(o) => println!(
                "{:>8.4} {:>12.6} {:>14.6e} {:>8.3}",
                row.lambda, row.dt, row.l1_error, o
            ),
            None => println!(
                "{:>8.4} {:>12.6} {:>14.6e} {:>8}",
                row.lambda, row.dt, row.l1_error, "-"
            ),
        }
    }
    println!("least-squares observed order: {:.3}", table.ls_slope);

    if let Some(path) = &cfg.output {
        let mut text = String::from("lambda,dt,l1_error,observed_order\n");
        for row in &table.rows {
            text.push_str(&format!(
                "{},{},{},{}\n",
                rail_core::driver::fmt_float(row.lambda),
                rail_core::driver::fmt_float(row.dt),
                rail_core::driver::fmt_float(row.l1_error),
                row.observed_order
                    .map(rail_core::driver::fmt_float)
                    .unwrap_or_default(),
            ));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_list() -> Result<()> {
    for spec in all_benchmarks() {
        let d = spec.defaults;
        println!("{:<20} {}", spec.name, spec.description);
        println!(
            "{:<20}   defaults: n={} lambda={} eps={:.0e} r0={} t_final={}; schemes: {}",
            "",
            d.n,
            d.lambda,
            d.eps,
            d.r0,
            d.t_final,
            if spec.has_advection {
                "imex111|imex222|imex443"
            } else {
                "be|dirk2|dirk3|imex*"
            },
        );
        if spec.has_exact_solution {
            println!("{:<20}   exact solution available (reference=exact)", "");
        }
    }
    Ok(())
}
