//! Command line front end: run experiments, sweep grids, replay
//! reports for bit-identical reproduction, and inspect checkpoints.
//!
//! Exit codes: 0 success, 1 configuration problem, 2 runtime failure
//! (including a replay mismatch).

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use fedblocks::checkpoint::inspect_checkpoint;
use fedblocks::error::{Error, Result};
use fedblocks::experiment::{
    replay, run_sweep_to_dir, run_to_dir, ExperimentConfig, SweepConfig, TableRow,
};
use fedblocks::server::AggregationMode;

#[derive(Parser)]
#[command(name = "fedblocks", version, about = "Block-wise federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config and write a report directory.
    Run {
        /// Experiment config, TOML. Missing keys take defaults.
        config: PathBuf,
        /// Report directory. Defaults to $FEDBLOCKS_OUT/<name> or
        /// reports/<name>.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        rounds: Option<usize>,
        /// Comma-separated run seeds, e.g. 1,2,3.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Comma-separated aggregation modes out of fm, ph, phf.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long)]
        lr: Option<f64>,
        /// Minibatch size for local SGD.
        #[arg(long)]
        batch: Option<usize>,
        /// Partition scheme: iid, iid_stratified or dirichlet.
        #[arg(long)]
        split: Option<String>,
        /// Fusion block: concat or attention.
        #[arg(long)]
        fusion: Option<String>,
        /// Client modality layout, e.g. 3-3-4.
        #[arg(long)]
        abc: Option<String>,
    },
    /// Run every combination of a sweep grid and merge the results.
    Sweep {
        /// Sweep config, TOML, with a [base] experiment and [grid]
        /// axes.
        grid: PathBuf,
        /// Defaults to $FEDBLOCKS_OUT/<name> or reports/<name>.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Re-run the resolved config stored in a report directory and
    /// byte-compare every file except run.log.
    Replay { report_dir: PathBuf },
    /// Print per-block stats for a saved model checkpoint.
    Inspect { checkpoint: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            out_dir,
            rounds,
            seeds,
            modes,
            lr,
            batch,
            split,
            fusion,
            abc,
        } => {
            let mut cfg = ExperimentConfig::from_toml_file(&config)?;
            if let Some(r) = rounds {
                cfg.rounds = r;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            if let Some(m) = modes {
                cfg.modes = parse_modes(&m)?;
            }
            if let Some(v) = lr {
                cfg.train.lr = v;
            }
            if let Some(v) = batch {
                cfg.train.batch_size = v;
            }
            if let Some(v) = split {
                cfg.federation.split = v;
            }
            if let Some(v) = fusion {
                cfg.model.fusion = v.parse().map_err(|e: Error| Error::Config {
                    path: "--fusion".into(),
                    detail: e.to_string(),
                })?;
            }
            if let Some(v) = abc {
                cfg.federation.abc = v;
            }
            cfg.validate()?;
            let dir = resolve_out_dir(out_dir, &cfg.name);
            let report = run_to_dir(&cfg, &dir)?;
            print_rows(&report.rows);
            println!("report written to {}", dir.display());
            Ok(())
        }
        Command::Sweep { grid, out_dir } => {
            let sweep = SweepConfig::from_toml_file(&grid)?;
            let dir = resolve_out_dir(out_dir, &sweep.name);
            let rows = run_sweep_to_dir(&sweep, &dir)?;
            print_rows(&rows);
            println!("sweep written to {}", dir.display());
            Ok(())
        }
        Command::Replay { report_dir } => {
            let outcome = replay(&report_dir)?;
            if outcome.is_clean() {
                println!(
                    "replay clean: {} files byte-identical",
                    outcome.files_compared
                );
                Ok(())
            } else {
                for m in &outcome.mismatches {
                    eprintln!("mismatch: {m}");
                }
                Err(Error::Data(format!(
                    "replay diverged on {} of {} files",
                    outcome.mismatches.len(),
                    outcome.files_compared
                )))
            }
        }
        Command::Inspect { checkpoint } => {
            let summary = inspect_checkpoint(&checkpoint)?;
            println!(
                "format v{}  seed {}  fusion {}  classes {}  params {}",
                summary.format_version,
                summary.seed,
                summary.spec.fusion,
                summary.spec.n_classes,
                summary.total_params
            );
            println!(
                "{:<10} {:>8} {:>8} {:>12} {:>12} {:>12}",
                "block", "tensors", "params", "l2_norm", "min", "max"
            );
            for b in &summary.blocks {
                println!(
                    "{:<10} {:>8} {:>8} {:>12.6} {:>12.6} {:>12.6}",
                    b.id, b.tensors, b.params, b.l2_norm, b.min, b.max
                );
            }
            Ok(())
        }
    }
}

fn parse_modes(names: &[String]) -> Result<Vec<AggregationMode>> {
    names
        .iter()
        .map(|s| {
            s.parse().map_err(|e: Error| Error::Config {
                path: "--modes".into(),
                detail: e.to_string(),
            })
        })
        .collect()
}

fn resolve_out_dir(flag: Option<PathBuf>, name: &str) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    let root = std::env::var_os("FEDBLOCKS_OUT")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new("reports").to_path_buf());
    root.join(name)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into())
}

fn print_rows(rows: &[TableRow]) {
    println!(
        "{:<14} {:<7} {:<16} {:<10} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
        "dataset", "config", "split", "fusion", "S_FM", "S_PH", "S_PHF", "ph_gain", "phf_gain", "pg"
    );
    for r in rows {
        println!(
            "{:<14} {:<7} {:<16} {:<10} {:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
            r.dataset,
            r.config,
            r.split,
            r.fusion,
            opt(r.s_fm),
            opt(r.s_ph),
            opt(r.s_phf),
            opt(r.ph_gain),
            opt(r.phf_gain),
            opt(r.pg),
        );
    }
}
