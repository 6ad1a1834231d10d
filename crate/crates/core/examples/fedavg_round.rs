//! A few federated rounds done by hand: local training on every silo,
//! weighted aggregation of the pseudo-gradients and a server step.

use fedsilo::config::WeightingScheme;
use fedsilo::fedopt::{self, LocalTask, ServerOptState};
use fedsilo::seed;
use fedsilo::{eval, RunConfig};

fn main() -> fedsilo::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.client.learning_rate = 0.5;
    cfg.client.batch_size = 16;
    let silos = cfg.load_silos()?;
    let task = LocalTask::from_config(&cfg);
    let test_sets = fedopt::final_eval_sets(&cfg, &silos)?;

    let mut theta = fedopt::initial_params(&cfg);
    let mut server = ServerOptState::new(cfg.server, theta.dim());
    println!(
        "round 0: pooled perplexity {:.3}",
        eval::evaluate(&theta, &task.shape, &test_sets)?.pooled
    );
    for round in 0..10 {
        let pgs = silos
            .iter()
            .map(|s| {
                let rng_seed = seed::derive(99, &[round as u64, u64::from(s.silo_id)]);
                fedopt::client_update(&theta, s, &cfg.client, &task, round, rng_seed)
            })
            .collect::<fedsilo::Result<Vec<_>>>()?;
        let weights = fedopt::compute_weights(&pgs, WeightingScheme::ExampleCount)?;
        let agg = fedopt::aggregate(&pgs, &weights)?;
        theta = server.step(&theta, &agg)?;
        let report = eval::evaluate(&theta, &task.shape, &test_sets)?;
        let w: Vec<String> = weights.iter().map(|w| format!("{w:.2}")).collect();
        println!(
            "round {}: pooled perplexity {:.3}, weights [{}]",
            round + 1,
            report.pooled,
            w.join(" ")
        );
    }
    Ok(())
}
