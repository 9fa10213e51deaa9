use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use step::workloads::Strategy;
use step_cli::{CliError, Outcome, RunSpec, SweepAxis, TileChoice};

/// Analyze, simulate, sweep and validate streaming dataflow workloads.
///
/// Settings come from a JSON run spec (`--config`) or the defaults of
/// `--workload`; flags override both.
#[derive(Parser)]
#[command(name = "step", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Symbolic traffic, on-chip memory and FLOPs per node.
    Analyze(Common),
    /// Run the cycle-approximate simulator and print metrics.
    Simulate(Common),
    /// Simulate one point per axis value and print a CSV table.
    Sweep(Common),
    /// Compare symbolic and simulated off-chip bytes across a tile sweep.
    Validate(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run spec.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in workload when no config is given: swiglu, moe or gqa.
    #[arg(long, default_value = "swiglu")]
    workload: String,
    /// Emit JSON instead of text (or CSV for sweep).
    #[arg(long)]
    json: bool,
    /// Write output here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// coarse, interleaved or dynamic; comma-separated for sweep.
    #[arg(long)]
    strategy: Option<String>,
    /// `dynamic`, a size, or `BxF`; comma-separated for sweep.
    #[arg(long)]
    tile: Option<String>,
    /// Parallel regions; comma-separated for sweep.
    #[arg(long)]
    regions: Option<String>,
    /// Compare outputs with the dense reference.
    #[arg(long)]
    check_functional: bool,
}

fn list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    s.split(',').map(|x| x.trim().parse::<T>().map_err(|e| CliError::Invalid(format!("--{what} `{x}`: {e}")))).collect()
}

fn one<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    match list::<T>(s, what)?.as_slice() {
        [_] => s.trim().parse::<T>().map_err(|e| CliError::Invalid(format!("--{what}: {e}"))),
        _ => Err(CliError::Invalid(format!("--{what} takes one value outside sweep"))),
    }
}

/// Loads the spec and applies flag overrides. Sweep turns a list flag into its axis.
fn prepare(c: &Common, sweeping: bool) -> Result<(RunSpec, Option<SweepAxis>), CliError> {
    let mut spec = match &c.config {
        Some(p) => RunSpec::load(p)?,
        None => RunSpec::default_for(&c.workload)?,
    };
    if let Some(s) = c.seed {
        spec.set_seed(s);
    }
    let mut axes = Vec::new();
    if let Some(s) = &c.strategy {
        if sweeping && s.contains(',') {
            axes.push(SweepAxis::Strategy(list::<Strategy>(s, "strategy")?));
        } else {
            spec.set_strategy(one(s, "strategy")?)?;
        }
    }
    if let Some(t) = &c.tile {
        if sweeping && t.contains(',') {
            axes.push(SweepAxis::Tile(list::<TileChoice>(t, "tile")?));
        } else {
            spec.set_tile(one(t, "tile")?)?;
        }
    }
    if let Some(r) = &c.regions {
        if sweeping && r.contains(',') {
            axes.push(SweepAxis::Regions(list::<usize>(r, "regions")?));
        } else {
            spec.set_regions(one(r, "regions")?)?;
        }
    }
    if axes.len() > 1 {
        return Err(CliError::Invalid("sweep over one axis at a time".into()));
    }
    if let Some(o) = &c.out {
        spec.out = Some(o.clone());
    }
    Ok((spec, axes.pop()))
}

fn run(cli: Cli) -> Result<(Outcome, Option<PathBuf>), CliError> {
    let (out, outcome) = match &cli.cmd {
        Cmd::Analyze(c) => {
            let (spec, _) = prepare(c, false)?;
            (spec.out.clone(), step_cli::analyze(&spec, c.json)?)
        }
        Cmd::Simulate(c) => {
            let (spec, _) = prepare(c, false)?;
            (spec.out.clone(), step_cli::simulate(&spec, c.json, c.check_functional)?)
        }
        Cmd::Sweep(c) => {
            let (spec, axis) = prepare(c, true)?;
            (spec.out.clone(), step_cli::sweep(&spec, axis.as_ref(), c.json)?)
        }
        Cmd::Validate(c) => {
            let (spec, axis) = prepare(c, true)?;
            (spec.out.clone(), step_cli::validate(&spec, axis.as_ref(), c.json)?)
        }
    };
    Ok((outcome, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((o, out)) => {
            if let Some(path) = out {
                if let Err(e) = fs::write(&path, &o.text) {
                    eprintln!("error: {}: {e}", path.display());
                    return ExitCode::from(4);
                }
            } else {
                print!("{}", o.text);
            }
            if let Some(n) = &o.note {
                eprintln!("error: {n}");
            }
            ExitCode::from(o.code as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
