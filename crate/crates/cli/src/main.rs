//! `vrextra` command-line runner.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use vrextra::harness::{self, ExperimentConfig, ProbeConfig};
use vrextra::{Error, Result};

#[derive(Parser)]
#[command(
    name = "vrextra",
    version,
    about = "Variance-reduced stochastic extragradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single replication and write its trace.
    Solve(RunArgs),
    /// Run a replicated experiment and write aggregated statistics.
    Experiment(RunArgs),
    /// Run a verification probe and write its verdict.
    Probe(RunArgs),
    /// Evaluate the theoretical constants for an inputs file.
    Constants(ConstantsArgs),
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory (overrides the configured one).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Replication count override.
    #[arg(long, value_name = "N")]
    replications: Option<u64>,
    /// Worker threads for replications.
    #[arg(long, value_name = "N")]
    threads: Option<usize>,
}

#[derive(Args)]
struct ConstantsArgs {
    /// JSON constants inputs.
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Experiment result JSON to compare against the rate bound.
    #[arg(long, value_name = "PATH")]
    summary: Option<PathBuf>,
    /// Write `constants.json` into this directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Print JSON instead of the table.
    #[arg(long)]
    json: bool,
}

fn experiment_config(args: &RunArgs) -> Result<ExperimentConfig> {
    let mut c = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        c.solver.master_seed = s;
    }
    if let Some(r) = args.replications {
        c.replications = r;
    }
    if let Some(t) = args.threads {
        c.threads = Some(t);
    }
    if let Some(o) = &args.out {
        c.outputs.dir = Some(o.clone());
    }
    c.check()?;
    Ok(c)
}

fn print_json<T: serde::Serialize>(v: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn solve(args: &RunArgs) -> Result<ExitCode> {
    let c = experiment_config(args)?;
    let trace = harness::solve(&c)?;
    if let Some(dir) = &c.outputs.dir {
        trace.save(dir, &c.outputs.stem)?;
    }
    print_json(&trace.summary())?;
    Ok(ExitCode::SUCCESS)
}

fn experiment(args: &RunArgs) -> Result<ExitCode> {
    let c = experiment_config(args)?;
    let r = harness::run_and_save(&c)?;
    let last = r.rows.last().expect("at least the initial row");
    println!("problem        {} (n={}, blocks={:?})", r.problem, r.dim, r.blocks);
    println!("replications   {}", r.replications);
    println!("iterations     {}", r.max_iterations);
    println!("config hash    {}", r.config_hash);
    println!("final mean r2  {:.6e} (stderr {:.2e})", last.mean_r2, last.stderr_r2);
    println!("oracle calls   {}", last.cum_calls);
    println!("accounting     {}", if r.accounting_ok { "ok" } else { "MISMATCH" });
    if let Some(f) = r.fit {
        println!(
            "fit [{}, {}]    slope {:.4}, intercept {:.4}",
            f.k_lo, f.k_hi, f.slope, f.intercept
        );
    }
    if let Some(e) = r.epsilon {
        match r.k_eps {
            Some(k) => println!("K_eps({e:e})    {k}"),
            None => println!("K_eps({e:e})    not reached"),
        }
    }
    match (&r.constants, &r.constants_note) {
        (Some(c), _) => println!(
            "rate bound     {} (constant {:.4e}, worst ratio {:.3})",
            c.comparison.verdict, c.comparison.bound_constant, c.comparison.worst_ratio
        ),
        (None, Some(note)) => println!("rate bound     skipped: {note}"),
        _ => {}
    }
    if r.estimated_merits {
        println!("note           merits use a sampled estimate of the mean operator");
    }
    if let Some(dir) = &c.outputs.dir {
        println!(
            "wrote          {}",
            dir.join(format!("{}.{{csv,json}}", c.outputs.stem)).display()
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn probe(args: &RunArgs) -> Result<ExitCode> {
    let mut c = ProbeConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        c.probe.set_seed(s);
    }
    if let Some(r) = args.replications {
        c.probe.set_replications(r);
    }
    if let Some(o) = &args.out {
        c.outputs.dir = Some(o.clone());
    }
    let r = harness::probe_and_save(&c)?;
    print_json(&r)?;
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn constants(args: &ConstantsArgs) -> Result<ExitCode> {
    let out = harness::constants_from_files(&args.config, args.summary.as_deref())?;
    if let Some(dir) = &args.out {
        std::fs::create_dir_all(dir)?;
        let f = std::fs::File::create(dir.join("constants.json"))?;
        serde_json::to_writer_pretty(f, &out)?;
    }
    if args.json {
        print_json(&out)?;
    } else {
        print!("{}", out.report.to_table());
        if let Some(c) = &out.comparison {
            println!(
                "\nempirical check (k >= {}): {} [{} checked, {} violations, worst ratio {:.3}]",
                c.k_min, c.verdict, c.checked, c.violations, c.worst_ratio
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn dispatch(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Solve(a) => solve(a),
        Command::Experiment(a) => experiment(a),
        Command::Probe(a) => probe(a),
        Command::Constants(a) => constants(a),
    }
}

fn describe(e: &Error, config: Option<&Path>) -> String {
    match (e, config) {
        (Error::Io(io), Some(p)) => format!("{}: {io}", p.display()),
        _ => e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            let path = match &cli.command {
                Command::Solve(a) | Command::Experiment(a) | Command::Probe(a) => Some(a.config.as_path()),
                Command::Constants(a) => Some(a.config.as_path()),
            };
            eprintln!("error: {}", describe(&e, path));
            ExitCode::from(2)
        }
    }
}
