//! Federated training on the nine default silos against a pooled-data
//! baseline given the same number of training sequences, plus own-data
//! baselines for the smallest and the three largest silos.
//!
//! ```text
//! cargo run --release --example fl_vs_central [config.json]
//! ```

use std::time::Instant;

use fedsilo::fedopt;
use fedsilo::RunConfig;

fn main() -> fedsilo::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    let silos = cfg.load_silos()?;
    let v = cfg.model.vocab_size as f64;

    let t = Instant::now();
    let fl = fedopt::run_fl(&cfg, &silos)?;
    println!(
        "FL       pooled ppl {:8.3}  ({:.1?})",
        fl.final_eval.pooled,
        t.elapsed()
    );

    let mut central_cfg = cfg.clone();
    central_cfg.central.sample_budget = Some(fedopt::fl_sample_budget(&cfg, &silos));
    let t = Instant::now();
    let cl = fedopt::run_central(&central_cfg, &silos)?;
    println!(
        "central  pooled ppl {:8.3}  ({:.1?})",
        cl.final_eval.pooled,
        t.elapsed()
    );
    println!(
        "FL / central = {:.3}, FL / V = {:.3}, central / V = {:.3}",
        fl.final_eval.pooled / cl.final_eval.pooled,
        fl.final_eval.pooled / v,
        cl.final_eval.pooled / v
    );

    for ((id, f), (_, c)) in fl.final_eval.per_silo.iter().zip(&cl.final_eval.per_silo) {
        println!("  silo {id}: FL {f:8.3}  central {c:8.3}");
    }

    let mut by_size: Vec<_> = silos.iter().map(|s| (s.n_samples(), s.silo_id)).collect();
    by_size.sort();
    let smallest = by_size[0].1;
    let largest: Vec<u32> = by_size.iter().rev().take(3).map(|&(_, id)| id).collect();
    for id in std::iter::once(smallest).chain(largest) {
        let own = fedopt::run_per_silo(&central_cfg, &silos, id)?;
        println!(
            "silo {id}: own-data pooled {:8.3} own-test {:8.3} | FL own-test {:8.3}",
            own.final_eval.pooled,
            own.final_eval.silo(id).unwrap(),
            fl.final_eval.silo(id).unwrap()
        );
    }
    Ok(())
}
