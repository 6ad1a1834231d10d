//! Per-round sample counts under the production constants and under the
//! desk-scale defaults, and how a round's draw splits into local batches.

use fedsilo::config::SamplingRule;
use fedsilo::data;

fn main() {
    let production = SamplingRule::production();
    for n in [0usize, 1_000_000, 6_250_000, 20_000_000, 132_500_000] {
        println!(
            "N = {n:>11}  ->  {:>6} samples per round",
            production.samples_for(n)
        );
    }

    let drawn = production.samples_for(132_500_000);
    let samples: Vec<usize> = (0..drawn).collect();
    let batches = data::split_into_local_batches(&samples, 1767, 6).unwrap();
    let sizes: Vec<usize> = batches.iter().map(|b| b.len()).collect();
    println!("{drawn} samples, batch 1767, at most 6 batches: {sizes:?}");

    let desk = SamplingRule::default();
    println!(
        "desk-scale rule (floor {}, coef {}):",
        desk.floor, desk.coef
    );
    for &n in &data::DEFAULT_SILO_SIZES {
        println!("  N = {n:>6}  ->  {:>4}", desk.samples_for(n));
    }
}
