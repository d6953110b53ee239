//! Labels random 2x2 allocations by pairwise comparison under each
//! preference function, then balances the classes.

use prefnet::auction::AuctionSpec;
use prefnet::preference::{build_labels, class_balance, uniform_allocations, PreferenceFunction, DEFAULT_COMPARISONS};
use prefnet::Result;

fn main() -> Result<()> {
    let spec = AuctionSpec::additive(2, 2);
    let pool = uniform_allocations(&spec, 5_000, 3)?;
    for f in [PreferenceFunction::tvf(), PreferenceFunction::Entropy, PreferenceFunction::quota()] {
        let set = build_labels(&pool, &f, DEFAULT_COMPARISONS, 4)?;
        let balanced = class_balance(&set, 5)?;
        println!(
            "{:<8} {} of {} positive; balanced to {} ({} positive)",
            f.name(),
            set.positives(),
            set.len(),
            balanced.len(),
            balanced.positives()
        );
        let best = (0..set.len()).max_by(|&a, &b| set.scores[a].total_cmp(&set.scores[b])).unwrap();
        println!("         best scored allocation {:?} -> {:.4}", set.allocation(best), set.scores[best]);
    }
    Ok(())
}
