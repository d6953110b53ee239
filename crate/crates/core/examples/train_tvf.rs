//! Trains PreferenceNet on 2x2 additive U[0,1] with the TVF preference.
//! A shortened run by default; pass `desk` for the full desk preset.
//!
//!     cargo run --release --example train_tvf [desk] [OUT_DIR]

use std::path::PathBuf;

use prefnet::harness::{cmd_train, ExperimentConfig, Preset};
use prefnet::Result;

fn main() -> Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let desk = args.first().is_some_and(|a| a == "desk");
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.out_dir = args
        .iter()
        .find(|a| *a != "desk")
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("prefnet_train_tvf"));
    if !desk {
        cfg.train.epochs = 8;
        cfg.train.regretnet_samples = 5_000;
        cfg.train.mlp_initial_samples = 3_000;
        cfg.train.validation_samples = 300;
        cfg.train.test_samples = 500;
    }
    let summary = cmd_train(&cfg, |r| {
        println!(
            "epoch {:>3}  pca {:.3}  regret {:.5}  payment {:.4}",
            r.epoch, r.metrics.pca, r.metrics.regret_mean, r.metrics.payment_mean
        )
    })?;
    let row = &summary.row;
    println!(
        "best epoch {}: test pca {:.3} regret {:.5} payment {:.4}; artifacts in {}",
        summary.best.epoch,
        row.pca,
        row.regret_mean,
        row.payment_mean,
        cfg.out_dir.display()
    );
    Ok(())
}
