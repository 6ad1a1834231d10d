//! Per-silo personalisation.
//!
//! A silo continues training a global checkpoint on its own data only, then
//! blends the result with the global model as `α·local + (1 − α)·global`.
//! `α` is picked by exhaustive search over a grid on a validation slice of
//! the silo's test split; the reported numbers come from the disjoint
//! remainder.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{ClientOptConfig, RunConfig};
use crate::data::SiloDataset;
use crate::error::{Error, Result};
use crate::eval;
use crate::fedopt::{self, LocalTask};
use crate::model::{self, MaskedBatch, ModelShape};
use crate::param::{self, ParamVector};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationResult {
    pub silo_id: u32,
    pub alpha_star: f64,
    pub global_ppl: f64,
    pub personal_ppl: f64,
    pub interp_ppl: f64,
    /// Validation loss at every grid point, in grid order.
    pub validation_losses: Vec<f64>,
}

/// Continues client-style training from `global_ckpt` for `local_rounds`
/// rounds, on this silo's data alone.
pub fn train_personal(
    global_ckpt: &ParamVector,
    silo: &SiloDataset,
    client: &ClientOptConfig,
    local_rounds: usize,
    task: &LocalTask,
    rng_seed: u64,
) -> Result<ParamVector> {
    let mut theta = global_ckpt.clone();
    for round in 0..local_rounds {
        let pg = fedopt::client_update(
            &theta,
            silo,
            client,
            task,
            round,
            seed::derive(rng_seed, &[round as u64]),
        )?;
        theta = param::vec_sub(&theta, &pg.delta)?;
    }
    Ok(theta)
}

/// Grid point with the lowest validation loss; ties go to the larger `α`.
pub fn select_alpha(
    global: &ParamVector,
    local: &ParamVector,
    shape: &ModelShape,
    validation: &MaskedBatch,
    grid: &[f64],
) -> Result<(f64, Vec<f64>)> {
    if !grid.contains(&0.0) || !grid.contains(&1.0) {
        return Err(Error::InvalidArgument(
            "alpha grid must contain 0 and 1".into(),
        ));
    }
    if validation.is_empty() {
        return Err(Error::EmptyInput("validation batch has no targets"));
    }
    let losses = grid
        .iter()
        .map(|&a| model::loss(&param::interpolate(global, local, a)?, shape, validation))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, (&a, &l)) in grid.iter().zip(&losses).enumerate() {
        let (ba, bl) = (grid[best], losses[best]);
        if l < bl || (l == bl && a > ba) {
            best = i;
        }
    }
    Ok((grid[best], losses))
}

/// Splits a silo's test split into (validation, reported test) halves by a
/// seeded shuffle.
pub fn split_validation(
    silo: &SiloDataset,
    fraction: f64,
    rng_seed: u64,
) -> (Vec<&[u32]>, Vec<&[u32]>) {
    let mut idx: Vec<usize> = (0..silo.test.len()).collect();
    idx.shuffle(&mut seed::rng(rng_seed));
    let n_val = ((fraction * idx.len() as f64).round() as usize).min(idx.len());
    let pick = |ids: &[usize]| -> Vec<&[u32]> {
        let mut ids = ids.to_vec();
        ids.sort_unstable();
        ids.into_iter().map(|i| silo.test[i].as_slice()).collect()
    };
    (pick(&idx[..n_val]), pick(&idx[n_val..]))
}

/// Personalises every silo from `start_ckpt` and compares the personal,
/// global and interpolated models on each silo's held-out test half.
/// `global` is the model interpolated against, normally the final FL model.
pub fn evaluate_personalization(
    cfg: &RunConfig,
    silos: &[SiloDataset],
    start_ckpt: &ParamVector,
    global: &ParamVector,
) -> Result<Vec<InterpolationResult>> {
    let task = LocalTask::from_config(cfg);
    let shape = task.shape;
    for p in [start_ckpt, global] {
        if p.dim() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                got: p.dim(),
            });
        }
    }
    let client = cfg.personalization_client();
    let rounds = cfg.personalization_rounds();
    let grid = &cfg.personalization.alpha_grid;
    let master = cfg.master_seed;

    let mut results = silos
        .par_iter()
        .map(|silo| {
            let id = u64::from(silo.silo_id);
            let (val, test) = split_validation(
                silo,
                cfg.personalization.validation_fraction,
                seed::derive(cfg.data.seed, &[tag::SPLIT, id]),
            );
            let mask = |seqs: &[&[u32]], salt: u64| -> Result<MaskedBatch> {
                if seqs.is_empty() {
                    return Err(Error::Config(format!(
                        "silo {} has too few test sequences to split for personalisation",
                        silo.silo_id
                    )));
                }
                Ok(eval::mask_split(
                    silo.silo_id,
                    seqs,
                    &shape,
                    cfg.data.mask_prob,
                    seed::derive(cfg.data.seed, &[tag::SPLIT, id, salt]),
                )?
                .expect("non-empty")
                .batch)
            };
            let val = mask(&val, 1)?;
            let test = mask(&test, 2)?;

            let personal = train_personal(
                start_ckpt,
                silo,
                &client,
                rounds,
                &task,
                seed::derive(master, &[tag::PERSONAL, id]),
            )?;
            let (alpha_star, validation_losses) =
                select_alpha(global, &personal, &shape, &val, grid)?;
            let interp = param::interpolate(global, &personal, alpha_star)?;
            Ok(InterpolationResult {
                silo_id: silo.silo_id,
                alpha_star,
                global_ppl: model::perplexity(global, &shape, &test)?,
                personal_ppl: model::perplexity(&personal, &shape, &test)?,
                interp_ppl: model::perplexity(&interp, &shape, &test)?,
                validation_losses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by_key(|r| r.silo_id);
    Ok(results)
}

/// `silo_id,alpha_star,global_ppl,personal_ppl,interp_ppl`
pub fn report_csv(results: &[InterpolationResult]) -> String {
    let mut out = String::from("silo_id,alpha_star,global_ppl,personal_ppl,interp_ppl\n");
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.silo_id, r.alpha_star, r.global_ppl, r.personal_ppl, r.interp_ppl
        )
        .unwrap();
    }
    out
}
