//! Generates a labelled dataset from the builtin scenarios and compares the
//! three classifiers with and without the time feature.
//!
//! cargo run --release --example train_matcher [seed]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use semtrack::matcher::{self, Algorithm, TrainConfig};
use semtrack::simkit;

fn main() {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = simkit::generate_matcher_dataset(&simkit::builtin_scenarios(), &mut rng, simkit::DEFAULT_DATASET_SIZE)
        .expect("dataset");
    let balance = simkit::label_balance(&data);
    println!("{} samples ({} matches, {} non-matches)", data.len(), balance.positives, balance.negatives);

    println!("{:<10} {:>9} {:>9} {:>9} {:>9}", "algorithm", "acc (5)", "f1 (5)", "acc (4)", "f1 (4)");
    for algo in Algorithm::ALL {
        let fit = |features| {
            let config = TrainConfig::new(algo).with_features(features).with_seed(seed);
            matcher::train(&data, &config).expect("train").1
        };
        let (five, four) = (fit(5), fit(4));
        println!(
            "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
            algo.name(),
            five.accuracy,
            five.f1,
            four.accuracy,
            four.f1
        );
    }
}
