//! Federated training followed by per-silo personalisation: each silo
//! continues from an intermediate global checkpoint on its own data and
//! blends the result with the final global model.
//!
//! ```text
//! cargo run --release --example personalization [config.json]
//! ```

use fedsilo::{fedopt, personalize, RunConfig};

fn main() -> fedsilo::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => RunConfig::load(path.as_ref())?,
        None => RunConfig::default(),
    };
    let silos = cfg.load_silos()?;
    let fl = fedopt::run_fl(&cfg, &silos)?;
    let start = cfg.personalization_start();
    let (_, ckpt) = fl
        .checkpoints
        .iter()
        .find(|(r, _)| *r == start)
        .expect("start round is a checkpoint round");
    println!(
        "personalising from round {start} for {} local rounds",
        cfg.personalization_rounds()
    );
    let results = personalize::evaluate_personalization(&cfg, &silos, ckpt, &fl.final_params)?;
    print!("{}", personalize::report_csv(&results));
    Ok(())
}
