//! Probit label noise: flip probability as a function of the score, and
//! the fraction of labels it flips on a TVF-labeled pool.

use prefnet::auction::AuctionSpec;
use prefnet::preference::{build_labels, probit_flip, uniform_allocations, PreferenceFunction, ProbitNoise};
use prefnet::Result;

fn main() -> Result<()> {
    let spec = AuctionSpec::additive(2, 2);
    let pool = uniform_allocations(&spec, 10_000, 6)?;
    let set = build_labels(&pool, &PreferenceFunction::tvf(), 11, 7)?;
    let model = ProbitNoise::calibrated(&set.scores, 1.05, 0.15)?;
    println!("mu {:.4} sigma {:.4}", model.mu, model.sigma);
    for dx in [0.0, 0.25, 0.5, 1.0, 2.0] {
        let x = model.mu + dx * model.sigma;
        println!("  |x - mu| = {dx:.2} sigma -> q = {:.4}", model.flip_probability(x));
    }
    let noisy = probit_flip(&set.labels, &set.scores, &model, 8)?;
    let flipped = noisy.iter().zip(&set.labels).filter(|(a, b)| a != b).count();
    println!("flipped {flipped} of {} labels ({:.3})", set.len(), flipped as f64 / set.len() as f64);
    Ok(())
}
