use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use dmao_cli::compare::{compare_run_dirs, write_comparison};
use dmao_cli::io::{generate_fleet, write_fleet, FleetGen};
use dmao_cli::verify::verify_bounds_dir;
use dmao_cli::{load_instance, run_instance, CliError, CliResult, OUTPUT_ROOT_ENV};
use rayon::prelude::*;

#[derive(Parser)]
#[command(name = "dmao", version, about = "Distributed EV charging coordination under purpose-driven attacks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one or more scenario files.
    Run {
        scenarios: Vec<PathBuf>,
        /// Output root; scenario outputs go to `<root>/<scenario dir>`.
        #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "out")]
        out: PathBuf,
        /// Validate only.
        #[arg(long)]
        dry_run: bool,
        /// Scenarios run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare two run directories (each holding solution.csv and load.csv).
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Where to write comparison.csv and overlay.csv; printed only if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-check every bounds.json under a directory.
    VerifyBounds { dir: PathBuf },
    /// Write a synthetic fleet CSV.
    GenFleet {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 12)]
        buses: usize,
        #[arg(long, default_value_t = 2)]
        anchor_bus: usize,
        #[arg(long, default_value_t = 0)]
        anchor_count: usize,
        /// Output file; stdout if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a scenario file and its data without running it.
    Validate { scenario: PathBuf },
}

fn validate(path: &Path) -> CliResult<()> {
    let inst = load_instance(path)?;
    println!(
        "{}: ok ({} agents, {} slots, {} variants)",
        path.display(),
        inst.problem.agents(),
        inst.problem.horizon(),
        inst.variants.len()
    );
    Ok(())
}

fn run_one(path: &Path, out: &Path, dry_run: bool) -> CliResult<()> {
    if dry_run {
        return validate(path);
    }
    let inst = load_instance(path)?;
    let start = Instant::now();
    let summary = run_instance(&inst, out)?;
    for v in &summary.variants {
        println!(
            "{}/{}: converged={} iterations={} residual={:.3e}",
            summary.scenario, v.name, v.converged, v.iterations, v.final_residual
        );
    }
    println!(
        "{}: wrote {} in {:.1}s",
        summary.scenario,
        summary.dir.display(),
        start.elapsed().as_secs_f64()
    );
    summary.require_converged()
}

fn dispatch(cli: Cli) -> CliResult<()> {
    match cli.cmd {
        Cmd::Run {
            scenarios,
            out,
            dry_run,
            jobs,
        } => {
            if scenarios.is_empty() {
                return Err(CliError::Validation("no scenario given".into()));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(jobs.max(1))
                .build()
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let results: Vec<CliResult<()>> =
                pool.install(|| scenarios.par_iter().map(|p| run_one(p, &out, dry_run)).collect());
            // Report every failure; exit with the first one's code.
            let mut first = None;
            for (p, r) in scenarios.iter().zip(results) {
                if let Err(e) = r {
                    eprintln!("{}: {e}", p.display());
                    first.get_or_insert(e);
                }
            }
            first.map_or(Ok(()), Err)
        }
        Cmd::Compare { a, b, out } => {
            let c = compare_run_dirs(&a, &b)?;
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                    write_comparison(&dir, &c)?;
                }
                None => {
                    println!("agent,mean_rel,mean_shift,l2_rel");
                    for r in &c.agents {
                        println!(
                            "{},{},{},{}",
                            r.agent, r.deviation.mean_rel, r.deviation.mean_shift, r.deviation.l2_rel
                        );
                    }
                }
            }
            println!(
                "overall: mean_rel={:.6e} l2_rel={:.6e}",
                c.overall.mean_rel, c.overall.l2_rel
            );
            Ok(())
        }
        Cmd::VerifyBounds { dir } => {
            let results = verify_bounds_dir(&dir)?;
            if results.is_empty() {
                return Err(CliError::Validation(format!("no bounds.json under {}", dir.display())));
            }
            let mut all = true;
            for (path, failures) in &results {
                if failures.is_empty() {
                    println!("{}: all bounds hold", path.display());
                } else {
                    all = false;
                    for f in failures {
                        println!("{}: {f}", path.display());
                    }
                }
            }
            if all {
                Ok(())
            } else {
                Err(CliError::Validation("some bounds are violated".into()))
            }
        }
        Cmd::GenFleet {
            seed,
            count,
            buses,
            anchor_bus,
            anchor_count,
            out,
        } => {
            let rows = generate_fleet(&FleetGen {
                seed,
                count,
                buses,
                anchor_bus,
                anchor_count,
            })?;
            match out {
                Some(p) => {
                    let f = std::fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
                    write_fleet(&rows, f)
                }
                None => write_fleet(&rows, std::io::stdout().lock()),
            }
        }
        Cmd::Validate { scenario } => validate(&scenario),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
