//! Regret found by gradient-ascent misreports against an untrained
//! network, with and without random restarts.

use prefnet::auction::{sample_bids, AuctionSpec, ValuationModel};
use prefnet::networks::{Architecture, RegretNet};
use prefnet::trainer::{adversarial_regret, Adversary};
use prefnet::Result;

fn main() -> Result<()> {
    let spec = AuctionSpec::additive(2, 2);
    let model = ValuationModel::default();
    let net = RegretNet::init(spec, Architecture::default(), 9)?;
    let bids = sample_bids(&spec, &model, 500, 10)?;
    for (steps, restarts) in [(0, 0), (25, 0), (200, 0), (200, 10)] {
        let adv = Adversary {
            steps,
            rate: 0.1,
            restarts,
            seed: 11,
        };
        let rgt = adversarial_regret(&net, &bids.values, &model, &adv)?;
        println!(
            "{steps:>3} steps, {restarts:>2} restarts: mean regret {:.5}",
            rgt.sum() / rgt.numel() as f64
        );
    }
    Ok(())
}
