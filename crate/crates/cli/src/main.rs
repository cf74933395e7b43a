//! `dcmg` command-line front end.
//!
//! Exit codes: 0 success, 1 invalid scenario or input, 2 numerical blow-up.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use dcmg::analysis::{write_report, ReportOptions};
use dcmg::engine;
use dcmg::export::{export, load_run_dir, Format};
use dcmg::scenario::{bundled, set_json_path, Scenario, Severity};
use serde_json::Value;

#[derive(Parser)]
#[command(name = "dcmg", version, about = "DC microgrid replay-attack simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write its traces.
    Simulate {
        /// Scenario file, or the name of a bundled scenario.
        scenario: String,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory [default: runs/<name>_seed<seed>].
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "csv")]
        format: String,
    },
    /// Check a scenario and list every violation.
    Validate { scenario: String },
    /// Run a scenario over a grid of parameter values and seeds.
    Sweep {
        scenario: String,
        /// `json.path=v1,v2,...`; repeat for a cartesian product.
        #[arg(long = "param", required = true)]
        params: Vec<String>,
        /// Seeds per grid point, counting up from the scenario seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compute statistics, spectra and detection metrics of a run directory.
    Analyze {
        run_dir: PathBuf,
        /// Where to write the reports [default: the run directory].
        #[arg(long)]
        out: Option<PathBuf>,
        /// Analysis window `t0,t1` in seconds.
        #[arg(long, value_parser = parse_window)]
        window: Option<(f64, f64)>,
    },
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected t0,t1")?;
    let a = a.trim().parse().map_err(|e| format!("{a}: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("{b}: {e}"))?;
    Ok((a, b))
}

fn load_scenario(arg: &str) -> anyhow::Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        return Scenario::load(path).with_context(|| format!("reading {arg}"));
    }
    match bundled::by_name(arg) {
        Some(text) => Ok(Scenario::from_json(text)?),
        None => bail!("no scenario file or bundled scenario named '{arg}'"),
    }
}

/// Prints warnings and fails on errors.
fn check(sc: &Scenario) -> anyhow::Result<()> {
    let violations = sc.validate();
    for v in violations
        .iter()
        .filter(|v| v.severity == Severity::Warning)
    {
        eprintln!("{v}");
    }
    let errors = sc.errors();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(dcmg::Error::Validation(errors).into())
    }
}

fn simulate(
    arg: &str,
    seed: Option<u64>,
    out: Option<PathBuf>,
    format: &str,
) -> anyhow::Result<()> {
    let format: Format = format.parse()?;
    let mut sc = load_scenario(arg)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    check(&sc)?;
    let run = engine::run::<f64>(&sc)?;
    let dir = out.unwrap_or_else(|| PathBuf::from(format!("runs/{}_seed{}", sc.name, sc.seed)));
    export(&run, format, &dir)?;

    let s = &run.summary;
    println!(
        "{}: {} steps of {} s, seed {}",
        s.name, s.steps, s.dt, s.seed
    );
    for a in &s.alarms {
        println!(
            "alarm {} -> {} at {:.4} s (component {})",
            a.from, a.to, a.t, a.component
        );
    }
    for a in &s.attacks {
        println!(
            "attack {} -> {}: stealthy {:?}, guaranteed detection by {:?}, latency {:?}",
            a.from, a.to, a.stealthy, a.guaranteed_detection_time, a.latency
        );
    }
    if let Some(spread) = s.final_ratio_spread {
        println!("final current-sharing spread {spread:.3e}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn validate(arg: &str) -> anyhow::Result<()> {
    let sc = load_scenario(arg)?;
    let violations = sc.validate();
    for v in &violations {
        println!("{v}");
    }
    let errors = sc.errors().len();
    if errors > 0 {
        bail!("{}: {errors} error(s)", sc.name);
    }
    println!("{}: ok", sc.name);
    Ok(())
}

fn parse_param(spec: &str) -> anyhow::Result<(String, Vec<Value>)> {
    let (path, values) = spec
        .split_once('=')
        .ok_or_else(|| anyhow!("--param '{spec}' is not path=v1,v2,..."))?;
    let values: Vec<Value> = values
        .split(',')
        .map(|v| serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string())))
        .collect();
    if values.is_empty() {
        bail!("--param '{spec}' has no values");
    }
    Ok((path.to_string(), values))
}

/// Every combination of one value per parameter.
fn grid(params: &[(String, Vec<Value>)]) -> Vec<Vec<Value>> {
    params.iter().fold(vec![Vec::new()], |acc, (_, values)| {
        acc.iter()
            .flat_map(|prefix| {
                values.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(v.clone());
                    p
                })
            })
            .collect()
    })
}

fn sweep(arg: &str, params: &[String], seeds: u64, out: Option<PathBuf>) -> anyhow::Result<bool> {
    let base = load_scenario(arg)?;
    let params: Vec<(String, Vec<Value>)> = params
        .iter()
        .map(|p| parse_param(p))
        .collect::<anyhow::Result<_>>()?;
    let base_json = serde_json::to_value(&base)?;

    let mut header: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
    header.extend(["seed", "status", "alarms", "final_ratio_spread"].map(String::from));
    header.extend(
        base.attacks
            .iter()
            .map(|a| format!("latency_{}_{}", a.from, a.to)),
    );
    let mut rows = vec![header];
    let mut aborted = false;

    for point in grid(&params) {
        let mut json = base_json.clone();
        for ((path, _), v) in params.iter().zip(&point) {
            set_json_path(&mut json, path, v.clone())?;
        }
        let mut sc: Scenario =
            serde_json::from_value(json).context("swept scenario no longer parses")?;
        check(&sc).with_context(|| format!("grid point {point:?}"))?;
        for k in 0..seeds {
            sc.seed = base.seed + k;
            let mut row: Vec<String> = point.iter().map(|v| v.to_string()).collect();
            row.push(sc.seed.to_string());
            match engine::run::<f64>(&sc) {
                Ok(run) => {
                    let s = &run.summary;
                    row.push("ok".into());
                    row.push(s.alarms.len().to_string());
                    row.push(
                        s.final_ratio_spread
                            .map_or(String::new(), |v| format!("{v}")),
                    );
                    row.extend(
                        s.attacks
                            .iter()
                            .map(|a| a.latency.map_or(String::new(), |l| format!("{l}"))),
                    );
                }
                Err(e @ dcmg::Error::NumericalAbort { .. }) => {
                    eprintln!("seed {}: {e}", sc.seed);
                    aborted = true;
                    row.push("abort".into());
                }
                Err(e) => return Err(e.into()),
            }
            rows.push(row);
        }
    }

    for row in &rows {
        println!("{}", row.join(","));
    }
    if let Some(path) = out {
        let text: String = rows.iter().map(|r| r.join(",") + "\n").collect();
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(!aborted)
}

fn analyze(run_dir: &Path, out: Option<PathBuf>, window: Option<(f64, f64)>) -> anyhow::Result<()> {
    let run = load_run_dir(run_dir).with_context(|| format!("loading {}", run_dir.display()))?;
    let mut opts = ReportOptions::for_run(&run);
    if let Some(w) = window {
        opts.window = w;
    }
    let dir = out.unwrap_or_else(|| run_dir.to_path_buf());
    for f in write_report(&run, &opts, &dir)? {
        println!("wrote {}", f.display());
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<dcmg::Error>() {
        Some(dcmg::Error::NumericalAbort { .. }) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    // clap exits with 2 on usage errors, which is reserved for numerical aborts.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate {
            scenario,
            seed,
            out,
            format,
        } => simulate(&scenario, seed, out, &format),
        Command::Validate { scenario } => validate(&scenario),
        Command::Sweep {
            scenario,
            params,
            seeds,
            out,
        } => match sweep(&scenario, &params, seeds, out) {
            Ok(true) => Ok(()),
            Ok(false) => return ExitCode::from(2),
            Err(e) => Err(e),
        },
        Command::Analyze {
            run_dir,
            out,
            window,
        } => analyze(&run_dir, out, window),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
