//! Compares the analytic gradient of the masked-token loss with central
//! finite differences on a few random small models.

use fedsilo::model::{self, ModelShape};
use fedsilo::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> fedsilo::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let h = 1e-5;
    for _ in 0..5 {
        let shape = ModelShape {
            vocab_size: rng.random_range(3..=10),
            embed_dim: rng.random_range(2..=5),
            context_window: 4,
        };
        let params = shape.init_params(0.5, rng.random());
        let seqs: Vec<Vec<u32>> = (0..3)
            .map(|_| {
                (0..8)
                    .map(|_| rng.random_range(0..shape.vocab_size as u32))
                    .collect()
            })
            .collect();
        let batch = model::mask_sequences(&seqs, 0.3, shape.context_window, rng.random())?;
        let (loss, grad) = model::loss_and_gradient(&params, &shape, &batch)?;

        let mut p = params.into_vec();
        let mut worst = 0.0f64;
        for i in 0..p.len() {
            let x = p[i];
            p[i] = x + h;
            let up = model::loss(&ParamVector::new(p.clone())?, &shape, &batch)?;
            p[i] = x - h;
            let down = model::loss(&ParamVector::new(p.clone())?, &shape, &batch)?;
            p[i] = x;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grad.as_slice()[i];
            worst =
                worst.max((numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4));
        }
        println!(
            "V={:2} d={} targets={:2} loss={loss:.4} max rel err={worst:.2e}",
            shape.vocab_size,
            shape.embed_dim,
            batch.size()
        );
    }
    Ok(())
}
