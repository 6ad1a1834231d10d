//! Perplexity evaluation over silo test splits.

use rand::seq::index;

use crate::data::SiloDataset;
use crate::error::Result;
use crate::log::{Phase, SiloRef, TrainingLog};
use crate::model::{self, MaskedBatch, ModelShape};
use crate::param::ParamVector;
use crate::seed;

/// Masked evaluation targets for one silo.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSet {
    pub silo_id: u32,
    pub batch: MaskedBatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_silo: Vec<(u32, f64)>,
    pub pooled: f64,
}

impl EvalReport {
    pub fn silo(&self, silo_id: u32) -> Option<f64> {
        self.per_silo
            .iter()
            .find(|(id, _)| *id == silo_id)
            .map(|&(_, p)| p)
    }

    pub fn log_into(&self, log: &mut TrainingLog, round: usize, phase: Phase) {
        for &(id, ppl) in &self.per_silo {
            log.push(round, phase, SiloRef::Silo(id), "perplexity", ppl);
        }
        log.push(round, phase, SiloRef::All, "perplexity", self.pooled);
    }
}

/// Masks every sequence of `sequences`; `None` when there is nothing to mask.
pub fn mask_split<S: AsRef<[u32]>>(
    silo_id: u32,
    sequences: &[S],
    shape: &ModelShape,
    mask_prob: f64,
    mask_seed: u64,
) -> Result<Option<EvalSet>> {
    if sequences.is_empty() {
        return Ok(None);
    }
    let batch = model::mask_sequences(sequences, mask_prob, shape.context_window, mask_seed)?;
    Ok(Some(EvalSet { silo_id, batch }))
}

/// Full test split of every silo, masked with a seed that depends only on
/// `eval_seed` and the silo id, so every run over the same data is scored on
/// the same targets.
pub fn full_test_sets(
    silos: &[SiloDataset],
    shape: &ModelShape,
    mask_prob: f64,
    eval_seed: u64,
) -> Result<Vec<EvalSet>> {
    let mut out = Vec::new();
    for s in silos {
        let seed_ = seed::derive(eval_seed, &[seed::tag::FINAL_EVAL, u64::from(s.silo_id)]);
        out.extend(mask_split(s.silo_id, &s.test, shape, mask_prob, seed_)?);
    }
    Ok(out)
}

/// A random `fraction` of each silo's test split, drawn without replacement.
pub fn sampled_test_sets(
    silos: &[SiloDataset],
    shape: &ModelShape,
    mask_prob: f64,
    fraction: f64,
    draw_seed: u64,
) -> Result<Vec<EvalSet>> {
    let mut out = Vec::new();
    for s in silos {
        if s.test.is_empty() {
            continue;
        }
        let k = ((fraction * s.test.len() as f64).ceil() as usize).clamp(1, s.test.len());
        let mut rng = seed::rng_for(draw_seed, &[u64::from(s.silo_id)]);
        let mut picked = index::sample(&mut rng, s.test.len(), k).into_vec();
        picked.sort_unstable();
        let seqs: Vec<&[u32]> = picked.iter().map(|&i| s.test[i].as_slice()).collect();
        let mask_seed = seed::derive(draw_seed, &[u64::from(s.silo_id), 1]);
        out.extend(mask_split(s.silo_id, &seqs, shape, mask_prob, mask_seed)?);
    }
    Ok(out)
}

/// Per-silo and pooled perplexity. The pooled value weights every masked
/// target equally.
pub fn evaluate(params: &ParamVector, shape: &ModelShape, sets: &[EvalSet]) -> Result<EvalReport> {
    let mut per_silo = Vec::with_capacity(sets.len());
    let mut total = 0.0;
    let mut count = 0usize;
    for set in sets {
        let nll = model::total_nll(params, shape, &set.batch)?;
        per_silo.push((set.silo_id, (nll / set.batch.size() as f64).exp()));
        total += nll;
        count += set.batch.size();
    }
    let pooled = if count == 0 {
        f64::NAN
    } else {
        (total / count as f64).exp()
    };
    Ok(EvalReport { per_silo, pooled })
}
