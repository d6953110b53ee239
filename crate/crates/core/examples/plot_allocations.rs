//! Heatmaps of agent 0's allocation of each item over its own two bids,
//! with agent 1 pinned at the midpoint. Writes plot.csv and one SVG per item.

use prefnet::checkpoint;
use prefnet::harness::{cmd_plot, cmd_train, ExperimentConfig, Preset, BEST_CHECKPOINT};
use prefnet::Result;

fn main() -> Result<()> {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.out_dir = std::env::temp_dir().join("prefnet_plot");
    let ckpt = cfg.out_dir.join(BEST_CHECKPOINT);
    if checkpoint::load(&ckpt).is_err() {
        cfg.train.epochs = 6;
        cfg.train.regretnet_samples = 4_000;
        cfg.train.mlp_initial_samples = 3_000;
        cfg.train.validation_samples = 300;
        cfg.train.test_samples = 300;
        cmd_train(&cfg, |_| {})?;
    }
    cfg.plot.resolution = 11;
    let grid = cmd_plot(&cfg, &ckpt)?;
    for item in 0..grid.m_items {
        println!("item {item} (rows: b_00 ascending, columns: b_01 ascending)");
        for ix in 0..grid.resolution {
            let row: Vec<String> = (0..grid.resolution).map(|iy| format!("{:.2}", grid.at(ix, iy, item))).collect();
            println!("  {}", row.join(" "));
        }
    }
    println!("wrote {}", cfg.out_dir.display());
    Ok(())
}
