use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gnnd_core::graph::write_dataset;
use gnnd_core::harness::{compare_runs, load_dataset, load_run, probe_mad, run_experiment, ExperimentConfig, MAD_FILE};
use gnnd_core::train::evaluate;
use gnnd_core::Error;

#[derive(Parser)]
#[command(name = "gnnd", version, about = "Graph networks with Noisy Nodes regularization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured dataset as newline-delimited JSON (gzip if the name ends in .gz).
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics, MAD profile, checkpoint and manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Run directory; defaults to the config's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a finished run on its validation split and print the metrics as CSV.
    Eval {
        run: PathBuf,
        /// Evaluate the raw parameters instead of the moving average.
        #[arg(long)]
        raw: bool,
    },
    /// Merge the metric CSVs of several runs.
    Compare {
        #[arg(required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute the per-layer MAD profile of a finished run.
    MadProfile {
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Io(_) | Error::Csv(_) | Error::Checkpoint(_) => 4,
        _ => 1,
    }
}

fn configure_threads() -> Result<(), Error> {
    let Ok(v) = std::env::var("GNND_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(vec![format!("GNND_THREADS: expected a positive integer, got {v:?}")]))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(vec![format!("GNND_THREADS: {e}")]))
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Generate { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let data = load_dataset(&cfg)?;
            write_dataset(&out, &data)?;
            eprintln!("wrote {} graphs to {}", data.len(), out.display());
        }
        Command::Train { config, seed, out } => {
            let cfg = load_config(&config, seed)?;
            let dir = out
                .or_else(|| cfg.output_dir.clone())
                .ok_or_else(|| Error::Config(vec!["output_dir: pass --out or set it in the config".into()]))?;
            let s = run_experiment(&cfg, &dir)?;
            println!(
                "steps={} best_step={} best={} early_stop={} dir={}",
                s.steps,
                s.best_step,
                s.best_metric,
                s.stopped_early,
                dir.display()
            );
        }
        Command::Eval { run, raw } => {
            let (cfg, setup) = load_run(&run)?;
            let ev = evaluate(&setup.model, &setup.state, &setup.val, &cfg.train, cfg.batch, !raw)?;
            println!("metric,value");
            for (k, v) in &ev.metrics {
                println!("{k},{v}");
            }
        }
        Command::Compare { runs, out } => {
            let table = compare_runs(&runs)?;
            match out {
                Some(p) => table.write(&p)?,
                None => {
                    println!("{}", table.header.join(","));
                    for r in &table.rows {
                        println!("{}", r.join(","));
                    }
                }
            }
        }
        Command::MadProfile { run, out } => {
            let (cfg, setup) = load_run(&run)?;
            let probe: Vec<_> = setup.val.iter().take(cfg.probe_graphs).cloned().collect();
            let report = probe_mad(&setup.model, &setup.state, &probe, &cfg.train, cfg.batch, cfg.use_ema)?;
            let path = out.unwrap_or_else(|| run.join(MAD_FILE));
            report.write_csv(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gnnd: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
