use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use opf_relax::cases::{self, BUILTIN_NAMES};
use opf_relax::conic::{write_program, SolveStatus};
use opf_relax::hierarchy::{build, Relaxation};
use opf_relax::network::NetworkCase;
use opf_relax::pipeline::{solve_case, SolveOptions};
use opf_relax::poly::build_opf_polynomials;
use opf_relax::sweep::{parse_axes, run_sweep, to_csv, to_json, AxisRange, SweepSpec};

/// Moment and mixed SDP/SOCP relaxations of small optimal power flow problems.
#[derive(Parser, Debug)]
#[command(name = "opf-relax", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve one case and compare the result with the Newton power-flow oracle.
    Solve(SolveArgs),
    /// Sweep a grid of active-power injection targets.
    Sweep(SweepArgs),
    /// List the bundled cases and their parameters.
    Cases,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Bundled case name or path to a TOML/JSON case file.
    #[arg(value_name = "CASE")]
    case_arg: Option<String>,

    #[arg(long, value_name = "PATH|NAME", conflicts_with = "case_arg")]
    case: Option<String>,

    /// sdp, moment:K or mixed:K
    #[arg(long, short, default_value = "sdp")]
    relaxation: String,

    /// Solver stopping tolerance.
    #[arg(long)]
    tol: Option<f64>,

    /// Eigenvalue ratio below which the moment matrix counts as rank one.
    #[arg(long)]
    rank_tol: Option<f64>,

    /// Write the result here instead of stdout.
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SolveArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Print a JSON document instead of the text summary.
    #[arg(long, value_enum)]
    format: Option<Format>,

    /// Print the conic program in text form and exit without solving.
    #[arg(long)]
    dump_program: bool,

    /// Print the OPF polynomials and exit without solving.
    #[arg(long)]
    dump_polynomials: bool,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,

    /// Grid such as `p2=-6:6:0.25,p3=-4:4:0.25`; defaults to that grid.
    #[arg(long)]
    sweep: Option<String>,

    /// Weight of the quadratic target-tracking term.
    #[arg(long, default_value_t = 1e3)]
    penalty: f64,

    #[arg(long, value_enum, default_value = "csv")]
    format: Format,

    /// Worker threads; 0 uses every core.
    #[arg(long, short, default_value_t = 0)]
    jobs: usize,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq)]
enum Format {
    Csv,
    Json,
}

/// Errors that exit with code 2 rather than 1.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage<T>(msg: impl Into<String>) -> Result<T> {
    Err(Usage(msg.into()).into())
}

/// Library errors caused by the input map to usage errors.
fn classify(e: opf_relax::Error) -> anyhow::Error {
    use opf_relax::Error as E;
    match e {
        E::Numerical(_) => e.into(),
        other => Usage(other.to_string()).into(),
    }
}

impl CommonArgs {
    fn load_case(&self) -> Result<NetworkCase> {
        let Some(spec) = self.case.as_ref().or(self.case_arg.as_ref()) else {
            return usage(format!("no case given (bundled: {})", BUILTIN_NAMES.join(", ")));
        };
        let case = cases::resolve(spec).map_err(classify)?;
        case.validate().map_err(classify)?;
        Ok(case)
    }

    fn relaxation(&self) -> Result<Relaxation> {
        let r: Relaxation = self.relaxation.parse().map_err(classify)?;
        r.validate().map_err(classify)?;
        Ok(r)
    }

    fn options(&self) -> Result<SolveOptions> {
        let mut opts = SolveOptions::default();
        if let Some(t) = self.tol {
            opts.solver.tolerance = t;
        }
        opts.solver.validate().map_err(classify)?;
        if let Some(r) = self.rank_tol {
            if !(r > 0.0 && r < 1.0) {
                return usage("--rank-tol must lie in (0, 1)");
            }
            opts.recover.rank_tol = r;
        }
        Ok(opts)
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_solve(args: &SolveArgs) -> Result<ExitCode> {
    let c = &args.common;
    let case = c.load_case()?;
    let relaxation = c.relaxation()?;
    let opts = c.options()?;
    if args.format == Some(Format::Csv) {
        return usage("solve writes text or json, not csv");
    }
    if args.dump_polynomials || args.dump_program {
        let mut text = String::new();
        if args.dump_polynomials {
            text += &build_opf_polynomials(&case).map_err(classify)?.dump(&case);
        }
        if args.dump_program {
            let built = build(&case, relaxation, &opts.relax).map_err(classify)?;
            text += &write_program(&built.program);
        }
        emit(c.out.as_deref(), &text)?;
        return Ok(ExitCode::SUCCESS);
    }

    let report = solve_case(&case, relaxation, &opts).map_err(classify)?;
    let text = match args.format {
        Some(Format::Json) => serde_json::to_string_pretty(&report.to_json())? + "\n",
        _ => report.summary(),
    };
    emit(c.out.as_deref(), &text)?;
    if report.conic.status == SolveStatus::Optimal {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("solver did not converge: {}", report.conic.status);
        Ok(ExitCode::from(1))
    }
}

fn cmd_sweep(args: &SweepArgs) -> Result<ExitCode> {
    let c = &args.common;
    let case = c.load_case()?;
    let relaxation = c.relaxation()?;
    let opts = c.options()?;
    let mut spec = SweepSpec::default_grid(relaxation);
    if let Some(s) = &args.sweep {
        let axes: Vec<AxisRange> = parse_axes(s).map_err(classify)?;
        spec.axes = axes;
    }
    spec.penalty = args.penalty;
    spec.solver = opts.solver;
    spec.recover = opts.recover;
    spec.jobs = args.jobs;
    spec.validate(&case).map_err(classify)?;

    let records = run_sweep(&case, &spec).map_err(classify)?;
    let text = match args.format {
        Format::Csv => to_csv(&case, &spec, &records),
        Format::Json => to_json(&case, &spec, &records) + "\n",
    };
    emit(c.out.as_deref(), &text)?;
    let converged = records.iter().filter(|r| r.converged()).count();
    let exact = records.iter().filter(|r| r.converged() && r.exact).count();
    eprintln!("{} points, {converged} converged, {exact} exact", records.len());
    if converged == 0 {
        bail!("no grid point converged");
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_cases() -> Result<ExitCode> {
    for name in BUILTIN_NAMES {
        let case = cases::builtin(name)?;
        println!("{case}");
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Solve(a) => cmd_solve(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Cases => cmd_cases(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<Usage>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
