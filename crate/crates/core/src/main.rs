use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prefnet::harness::{self, ExperimentConfig, Preset};
use prefnet::Result;

#[derive(Parser)]
#[command(name = "prefnet", version, about = "Train and inspect preference-constrained auction networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML). Built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Training scale: desk or paper.
    #[arg(long, global = true)]
    preset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train, select the best checkpoint and write results.csv.
    Train,
    /// Evaluate a checkpoint on the test batch and append a results row.
    Evaluate { checkpoint: PathBuf },
    /// Label an allocations CSV by pairwise comparisons.
    Label { allocations: PathBuf },
    /// Allocation heatmaps over two bid coordinates.
    Plot {
        checkpoint: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// Mean allocation distance between two checkpoints and a score histogram.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Itemwise Myerson revenue row.
    Baseline,
}

fn config(common: &Common) -> Result<ExperimentConfig> {
    let preset = common.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, preset)?,
        None => ExperimentConfig::preset(preset.unwrap_or_default()),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.common)?;
    match cli.command {
        Command::Train => {
            let s = harness::cmd_train(&cfg, |r| {
                let m = &r.metrics;
                eprintln!(
                    "epoch {:>4}  pca {:.3}  regret {:.5}  payment {:.4}  lambda {:.1}  rho {:.1}",
                    r.epoch, m.pca, m.regret_mean, m.payment_mean, r.lambda_r, r.rho_r
                );
            })?;
            println!(
                "best epoch {}: pca {:.4} regret {:.5} ({:.5}) payment {:.4} ({:.4})",
                s.best.epoch, s.row.pca, s.row.regret_mean, s.row.regret_std, s.row.payment_mean, s.row.payment_std
            );
            if let Some(f) = s.flip_fraction {
                println!("label noise flipped {f:.3} of the initial exemplars");
            }
        }
        Command::Evaluate { checkpoint } => {
            let row = harness::cmd_evaluate(&cfg, &checkpoint)?;
            println!("{row:?}");
        }
        Command::Label { allocations } => {
            let set = harness::cmd_label(&cfg, &allocations)?;
            println!("labeled {} allocations, {} positive", set.len(), set.positives());
        }
        Command::Plot { checkpoint, resolution } => {
            if let Some(r) = resolution {
                cfg.plot.resolution = r;
            }
            let grid = harness::cmd_plot(&cfg, &checkpoint)?;
            println!("{0}x{0} grid, {1} items -> {2}", grid.resolution, grid.m_items, cfg.out_dir.display());
        }
        Command::Compare { a, b, samples } => {
            if let Some(n) = samples {
                cfg.compare.samples = n;
            }
            let report = harness::cmd_compare(&cfg, &a, &b)?;
            println!("mean L2 allocation distance {:.6}", report.distance);
        }
        Command::Baseline => {
            let row = harness::cmd_baseline(&cfg)?;
            println!("{}: revenue {:.4} ({:.4})", row.setting, row.payment_mean, row.payment_std);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
