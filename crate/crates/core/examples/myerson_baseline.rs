//! Revenue of a second-price auction with reserve 1/2, one item, two
//! bidders with U[0,1] values. The closed form is 5/12.

use prefnet::auction::{itemwise_myerson_revenue, sample_bids, AuctionSpec, ValuationModel};
use prefnet::Result;

fn main() -> Result<()> {
    let spec = AuctionSpec::additive(2, 1);
    let model = ValuationModel::uniform(0.0, 1.0)?;
    for samples in [1_000, 10_000, 100_000, 1_000_000] {
        let bids = sample_bids(&spec, &model, samples, 1)?;
        let rev = itemwise_myerson_revenue(&bids, &[0.5])?;
        println!("{samples:>9} samples  revenue {rev:.5}  (5/12 = {:.5})", 5.0 / 12.0);
    }

    // Reserve sweep on the 2x2 additive setting.
    let spec = AuctionSpec::additive(2, 2);
    let bids = sample_bids(&spec, &model, 200_000, 2)?;
    for r in [0.0, 0.25, 0.5, 0.75] {
        println!("2x2 reserve {r:.2}: revenue {:.4}", itemwise_myerson_revenue(&bids, &[r, r])?);
    }
    Ok(())
}
