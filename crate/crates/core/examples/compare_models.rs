//! Short runs of PreferenceNet and the penalty-trained RegretNet on the
//! same setting, then the mean allocation distance between them and to an
//! untrained net.

use prefnet::checkpoint;
use prefnet::harness::{cmd_compare, cmd_train, ExperimentConfig, Preset, BEST_CHECKPOINT};
use prefnet::trainer::PreferenceMode;
use prefnet::Result;

fn short(mode: PreferenceMode, dir: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::preset(Preset::Desk);
    cfg.out_dir = std::env::temp_dir().join("prefnet_compare").join(dir);
    cfg.train.preference_mode = mode;
    cfg.train.epochs = 6;
    cfg.train.regretnet_samples = 4_000;
    cfg.train.mlp_initial_samples = 3_000;
    cfg.train.validation_samples = 300;
    cfg.train.test_samples = 300;
    cfg
}

fn main() -> Result<()> {
    let mlp = short(PreferenceMode::Mlp, "mlp");
    let penalty = short(PreferenceMode::Penalty, "penalty");
    let untrained = short(PreferenceMode::Mlp, "untrained");
    for cfg in [&mlp, &penalty] {
        let s = cmd_train(cfg, |_| {})?;
        println!("{:?}: pca {:.3} regret {:.5} payment {:.4}", cfg.train.preference_mode, s.row.pca, s.row.regret_mean, s.row.payment_mean);
    }
    let init = cfg_epoch0(&untrained)?;
    std::fs::create_dir_all(&untrained.out_dir)?;
    let u = untrained.out_dir.join(BEST_CHECKPOINT);
    checkpoint::save(&init, &u)?;

    let a = mlp.out_dir.join(BEST_CHECKPOINT);
    let b = penalty.out_dir.join(BEST_CHECKPOINT);
    let mut cmp = mlp.clone();
    cmp.compare.samples = 5_000;
    println!("mlp vs penalty       {:.4}", cmd_compare(&cmp, &a, &b)?.distance);
    println!("mlp vs untrained      {:.4}", cmd_compare(&cmp, &a, &u)?.distance);
    println!("penalty vs untrained {:.4}", cmd_compare(&cmp, &b, &u)?.distance);
    Ok(())
}

/// The freshly initialized network of a run, taken from a zero-epoch training.
fn cfg_epoch0(cfg: &ExperimentConfig) -> Result<prefnet::trainer::Checkpoint> {
    let mut cfg = cfg.clone();
    cfg.train.epochs = 0;
    cfg.train.seed = 99;
    Ok(cmd_train(&cfg, |_| {})?.best)
}
