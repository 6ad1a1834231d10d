//! Pairwise-masked aggregation: individual shares look random, their sum
//! equals the sum of the fixed-point encoded contributions.

use fedsilo::param::{self, FixedPointParams};
use fedsilo::secure;
use fedsilo::ParamVector;

fn main() -> fedsilo::Result<()> {
    let fp = FixedPointParams::default();
    let ids = [0u32, 3, 5, 8];
    let seeds = secure::distribute_pair_seeds(&ids, 42);
    let deltas: Vec<ParamVector> = ids
        .iter()
        .map(|&i| ParamVector::new(vec![0.25 * f64::from(i), -1.5, 1e-3 * f64::from(i)]))
        .collect::<Result<_, _>>()?;

    let round = 7;
    let shares = ids
        .iter()
        .zip(&deltas)
        .map(|(&id, d)| secure::mask_contribution(d, id, &seeds, round, fp))
        .collect::<fedsilo::Result<Vec<_>>>()?;
    for s in &shares {
        println!("silo {} sends {:?}", s.silo_id, s.payload.words);
    }

    let sum = secure::secure_sum(&shares, &ids, fp)?;
    let plain = param::weighted_sum(&deltas, &[1.0; 4])?;
    println!("secure sum {:?}", sum.as_slice());
    println!("plain sum  {:?}", plain.as_slice());
    println!(
        "max difference {:.3e} (bound {:.3e})",
        sum.max_abs_diff(&plain),
        ids.len() as f64 * fp.resolution()
    );

    // A missing share leaves the masks in place and the server refuses it.
    match secure::secure_sum(&shares[..3], &ids, fp) {
        Err(e) => println!("with one share missing: {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
