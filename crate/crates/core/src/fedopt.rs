//! Hierarchical federated optimisation.
//!
//! Each round the server broadcasts `θ⁽ʳ⁾`; every silo re-instantiates a
//! stateless SGD optimiser, takes up to `B_max` local steps on freshly drawn
//! samples and returns the pseudo-gradient `θ⁽ʳ⁾ − θᵢ⁽ʳ'ᴮ⁾`. The server
//! weights the pseudo-gradients, sums them in silo-id order, and feeds the
//! sum to a persistent optimiser as if it were a gradient. Under server SGD
//! with learning rate 1 this is exactly FedAvg.
//!
//! The module also hosts the pooled-data (central) baseline and the per-silo
//! baselines.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::config::{
    ClientOptConfig, RunConfig, SamplingRule, ServerOptConfig, ServerOptKind, WeightingScheme,
};
use crate::data::{self, SiloDataset};
use crate::error::{Error, Result};
use crate::eval::{self, EvalSet};
use crate::log::{Phase, SiloRef, TrainingLog};
use crate::model::{self, MaskedBatch, ModelShape};
use crate::param::{self, ParamVector};
use crate::secure;
use crate::seed::{self, tag};

/// What a silo needs to know about the model and objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTask {
    pub shape: ModelShape,
    pub mask_prob: f64,
    pub sampling: SamplingRule,
}

impl LocalTask {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            shape: cfg.shape(),
            mask_prob: cfg.data.mask_prob,
            sampling: cfg.sampling,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoGradient {
    pub silo_id: u32,
    pub delta: ParamVector,
    /// Sequences drawn this round; the basis of example-count weights.
    pub samples_used: usize,
    pub round: usize,
    /// Realised number of local steps `B`.
    pub batches: usize,
    /// Mean pre-step loss over the local batches, if any were taken.
    pub mean_loss: Option<f64>,
}

/// This round's masked local batches for one silo.
pub fn local_batches(
    silo: &SiloDataset,
    cfg: &ClientOptConfig,
    task: &LocalTask,
    rng_seed: u64,
) -> Result<(usize, Vec<MaskedBatch>)> {
    let count = task.sampling.samples_for(silo.n_samples());
    let samples = data::draw_round_samples(silo, count, seed::derive(rng_seed, &[0]))?;
    let batches = data::split_into_local_batches(&samples, cfg.batch_size, cfg.max_local_batches)?
        .into_iter()
        .enumerate()
        .map(|(b, seqs)| {
            model::mask_sequences(
                seqs,
                task.mask_prob,
                task.shape.context_window,
                seed::derive(rng_seed, &[1, b as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((count, batches))
}

pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector> {
    let values = params
        .as_slice()
        .iter()
        .zip(grad.as_slice())
        .map(|(x, g)| x - lr * g)
        .collect();
    ParamVector::new(values)
}

/// Local training on one silo, starting from `global`.
pub fn client_update(
    global: &ParamVector,
    silo: &SiloDataset,
    cfg: &ClientOptConfig,
    task: &LocalTask,
    round: usize,
    rng_seed: u64,
) -> Result<PseudoGradient> {
    if global.dim() != task.shape.param_count() {
        return Err(Error::DimensionMismatch {
            expected: task.shape.param_count(),
            got: global.dim(),
        });
    }
    let (samples_used, batches) = local_batches(silo, cfg, task, rng_seed)?;
    let mut theta = global.clone();
    let mut loss_sum = 0.0;
    for (b, batch) in batches.iter().enumerate() {
        let non_finite = || Error::NonFiniteLoss {
            silo_id: silo.silo_id,
            batch: b,
        };
        let (l, g) = model::loss_and_gradient(&theta, &task.shape, batch).map_err(|e| match e {
            Error::NonFinite { .. } => non_finite(),
            other => other,
        })?;
        if !l.is_finite() {
            return Err(non_finite());
        }
        loss_sum += l;
        theta = sgd_step(&theta, &g, cfg.learning_rate).map_err(|_| non_finite())?;
    }
    let delta = param::vec_sub(global, &theta)?;
    Ok(PseudoGradient {
        silo_id: silo.silo_id,
        delta,
        samples_used,
        round,
        batches: batches.len(),
        mean_loss: (!batches.is_empty()).then(|| loss_sum / batches.len() as f64),
    })
}

/// Aggregation weights, in the order of `pgs`.
pub fn compute_weights(pgs: &[PseudoGradient], scheme: WeightingScheme) -> Result<Vec<f64>> {
    if pgs.is_empty() {
        return Err(Error::NoContributions);
    }
    match scheme {
        WeightingScheme::Uniform => Ok(vec![1.0 / pgs.len() as f64; pgs.len()]),
        WeightingScheme::ExampleCount => {
            let total: usize = pgs.iter().map(|p| p.samples_used).sum();
            if total == 0 {
                return Err(Error::ZeroSampleCount);
            }
            Ok(pgs
                .iter()
                .map(|p| p.samples_used as f64 / total as f64)
                .collect())
        }
    }
}

fn silo_order(pgs: &[PseudoGradient]) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..pgs.len()).collect();
    order.sort_by_key(|&i| pgs[i].silo_id);
    if let Some(w) = order
        .windows(2)
        .find(|w| pgs[w[0]].silo_id == pgs[w[1]].silo_id)
    {
        return Err(Error::AggregationSetMismatch(format!(
            "duplicate pseudo-gradient from silo {}",
            pgs[w[0]].silo_id
        )));
    }
    Ok(order)
}

/// `Σ wᵢ·gᵢ`, summed in ascending silo id regardless of input order.
pub fn aggregate(pgs: &[PseudoGradient], weights: &[f64]) -> Result<ParamVector> {
    if weights.len() != pgs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} pseudo-gradients",
            weights.len(),
            pgs.len()
        )));
    }
    let order = silo_order(pgs)?;
    let deltas: Vec<ParamVector> = order.iter().map(|&i| pgs[i].delta.clone()).collect();
    let w: Vec<f64> = order.iter().map(|&i| weights[i]).collect();
    param::weighted_sum(&deltas, &w)
}

/// The same sum computed through masked fixed-point shares.
pub fn aggregate_secure(
    pgs: &[PseudoGradient],
    weights: &[f64],
    pair_seeds: &[secure::PairSeed],
    round: u32,
    fp: crate::param::FixedPointParams,
) -> Result<ParamVector> {
    if weights.len() != pgs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} pseudo-gradients",
            weights.len(),
            pgs.len()
        )));
    }
    silo_order(pgs)?;
    let shares = pgs
        .par_iter()
        .zip(weights)
        .map(|(pg, &w)| {
            let scaled = ParamVector::new(pg.delta.as_slice().iter().map(|x| w * x).collect())?;
            secure::mask_contribution(&scaled, pg.silo_id, pair_seeds, round, fp)
        })
        .collect::<Result<Vec<_>>>()?;
    let registered: Vec<u32> = pgs.iter().map(|p| p.silo_id).collect();
    secure::secure_sum(&shares, &registered, fp)
}

/// Persistent server-side optimiser.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerOptState {
    pub config: ServerOptConfig,
    /// Momentum buffer, or Adam's first moment.
    pub first_moment: Option<ParamVector>,
    /// Adam's second moment.
    pub second_moment: Option<ParamVector>,
    pub step_count: u64,
}

impl ServerOptState {
    pub fn new(config: ServerOptConfig, dim: usize) -> Self {
        let (m, v) = match config.kind {
            ServerOptKind::Sgd => (None, None),
            ServerOptKind::SgdMomentum => (Some(ParamVector::zeros(dim)), None),
            ServerOptKind::Adam => (Some(ParamVector::zeros(dim)), Some(ParamVector::zeros(dim))),
        };
        Self {
            config,
            first_moment: m,
            second_moment: v,
            step_count: 0,
        }
    }

    /// Applies one optimiser step treating `aggregate` as the gradient.
    pub fn step(&mut self, global: &ParamVector, aggregate: &ParamVector) -> Result<ParamVector> {
        if global.dim() != aggregate.dim() {
            return Err(Error::DimensionMismatch {
                expected: global.dim(),
                got: aggregate.dim(),
            });
        }
        if let Some(m) = &self.first_moment {
            if m.dim() != global.dim() {
                return Err(Error::DimensionMismatch {
                    expected: m.dim(),
                    got: global.dim(),
                });
            }
        }
        let c = self.config;
        let lr = c.learning_rate;
        let theta = global.as_slice();
        let a = aggregate.as_slice();
        self.step_count += 1;
        let next: Vec<f64> = match c.kind {
            ServerOptKind::Sgd => theta.iter().zip(a).map(|(x, g)| x - lr * g).collect(),
            ServerOptKind::SgdMomentum => {
                let buf: Vec<f64> = self
                    .first_moment
                    .as_ref()
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(a)
                    .map(|(m, g)| c.momentum * m + g)
                    .collect();
                let next = theta.iter().zip(&buf).map(|(x, m)| x - lr * m).collect();
                self.first_moment = Some(ParamVector::new(buf)?);
                next
            }
            ServerOptKind::Adam => {
                let t = self.step_count as i32;
                let m: Vec<f64> = self
                    .first_moment
                    .as_ref()
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(a)
                    .map(|(m, g)| c.beta1 * m + (1.0 - c.beta1) * g)
                    .collect();
                let v: Vec<f64> = self
                    .second_moment
                    .as_ref()
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(a)
                    .map(|(v, g)| c.beta2 * v + (1.0 - c.beta2) * g * g)
                    .collect();
                let bc1 = 1.0 - c.beta1.powi(t);
                let bc2 = 1.0 - c.beta2.powi(t);
                let next = theta
                    .iter()
                    .zip(m.iter().zip(&v))
                    .map(|(x, (m, v))| x - lr * (m / bc1) / ((v / bc2).sqrt() + c.epsilon))
                    .collect();
                self.first_moment = Some(ParamVector::new(m)?);
                self.second_moment = Some(ParamVector::new(v)?);
                next
            }
        };
        ParamVector::new(next)
    }
}

/// Functional form of [`ServerOptState::step`].
pub fn server_step(
    mut state: ServerOptState,
    global: &ParamVector,
    aggregate: &ParamVector,
) -> Result<(ParamVector, ServerOptState)> {
    let next = state.step(global, aggregate)?;
    Ok((next, state))
}

#[derive(Debug, Clone)]
pub struct FlOutcome {
    pub log: TrainingLog,
    pub final_params: ParamVector,
    /// `θ⁽ʳ⁾` every `checkpoint_every` rounds, plus the final model.
    pub checkpoints: Vec<(usize, ParamVector)>,
    pub final_eval: eval::EvalReport,
}

fn check_silos(silos: &[SiloDataset]) -> Result<()> {
    if silos.is_empty() {
        return Err(Error::Config("no silos".into()));
    }
    if let Some(s) = silos.iter().find(|s| s.train.is_empty()) {
        return Err(Error::EmptySilo(s.silo_id));
    }
    Ok(())
}

pub fn initial_params(cfg: &RunConfig) -> ParamVector {
    cfg.shape().init_params(
        cfg.model.init_std,
        seed::derive(cfg.master_seed, &[tag::INIT]),
    )
}

/// Full-test-split evaluation sets, shared by every run over the same data.
pub fn final_eval_sets(cfg: &RunConfig, silos: &[SiloDataset]) -> Result<Vec<EvalSet>> {
    eval::full_test_sets(silos, &cfg.shape(), cfg.data.mask_prob, cfg.data.seed)
}

/// Runs `max_iterations` federated rounds from the seeded initial model.
pub fn run_fl(cfg: &RunConfig, silos: &[SiloDataset]) -> Result<FlOutcome> {
    run_fl_from(cfg, silos, initial_params(cfg))
}

pub fn run_fl_from(cfg: &RunConfig, silos: &[SiloDataset], init: ParamVector) -> Result<FlOutcome> {
    check_silos(silos)?;
    let task = LocalTask::from_config(cfg);
    let shape = task.shape;
    if init.dim() != shape.param_count() {
        return Err(Error::DimensionMismatch {
            expected: shape.param_count(),
            got: init.dim(),
        });
    }
    let mut silos: Vec<&SiloDataset> = silos.iter().collect();
    silos.sort_by_key(|s| s.silo_id);
    let ids: Vec<u32> = silos.iter().map(|s| s.silo_id).collect();
    let owned: Vec<SiloDataset> = silos.iter().map(|s| (*s).clone()).collect();

    let master = cfg.master_seed;
    let fp = cfg.secure_agg.fixed_point();
    let pair_seeds = if cfg.secure_agg.enabled {
        secure::distribute_pair_seeds(&ids, master)
    } else {
        Vec::new()
    };
    let final_sets = final_eval_sets(cfg, &owned)?;

    let mut log = TrainingLog::new(master, cfg.to_json());
    let mut theta = init;
    let mut server = ServerOptState::new(cfg.server, shape.param_count());
    let mut checkpoints = Vec::new();

    let periodic_eval = |theta: &ParamVector, round: usize, log: &mut TrainingLog| -> Result<()> {
        let draw_seed = seed::derive(master, &[tag::EVAL, round as u64]);
        let sets = eval::sampled_test_sets(
            &owned,
            &shape,
            cfg.data.mask_prob,
            cfg.eval_fraction,
            draw_seed,
        )?;
        eval::evaluate(theta, &shape, &sets)?.log_into(log, round, Phase::Eval5);
        Ok(())
    };

    for round in 0..cfg.max_iterations {
        if round % cfg.eval_every == 0 {
            periodic_eval(&theta, round, &mut log)?;
        }
        if round % cfg.checkpoint_every == 0 {
            checkpoints.push((round, theta.clone()));
        }
        let pgs = silos
            .par_iter()
            .map(|s| {
                let client = cfg.client_for(s.silo_id);
                let client_seed =
                    seed::derive(master, &[tag::CLIENT, round as u64, u64::from(s.silo_id)]);
                client_update(&theta, s, &client, &task, round, client_seed)
            })
            .collect::<Result<Vec<_>>>()?;
        for pg in &pgs {
            let silo = SiloRef::Silo(pg.silo_id);
            if let Some(l) = pg.mean_loss {
                log.push(round, Phase::Train, silo, "loss", l);
            }
            log.push(round, Phase::Train, silo, "batches", pg.batches as f64);
            log.push(round, Phase::Train, silo, "samples", pg.samples_used as f64);
        }
        let weights = compute_weights(&pgs, cfg.weighting)?;
        let agg = if cfg.secure_agg.enabled {
            aggregate_secure(&pgs, &weights, &pair_seeds, round as u32, fp)?
        } else {
            aggregate(&pgs, &weights)?
        };
        theta = server.step(&theta, &agg)?;
    }

    let rounds = cfg.max_iterations;
    if rounds.is_multiple_of(cfg.eval_every) {
        periodic_eval(&theta, rounds, &mut log)?;
    }
    if checkpoints.last().map(|c| c.0) != Some(rounds) {
        checkpoints.push((rounds, theta.clone()));
    }
    let final_eval = eval::evaluate(&theta, &shape, &final_sets)?;
    final_eval.log_into(&mut log, rounds, Phase::FinalEval);
    Ok(FlOutcome {
        log,
        final_params: theta,
        checkpoints,
        final_eval,
    })
}

#[derive(Debug, Clone)]
pub struct CentralOutcome {
    pub log: TrainingLog,
    pub final_params: ParamVector,
    pub final_eval: eval::EvalReport,
    /// Training steps taken.
    pub batches: usize,
}

/// Order in which pooled training sequences are consumed: seeded shuffles of
/// the whole pool, one pass after another, truncated to `budget`. Entries are
/// `(silo position, sequence index)`.
pub fn central_schedule(sizes: &[usize], budget: usize, rng_seed: u64) -> Vec<(usize, usize)> {
    let pool: Vec<(usize, usize)> = sizes
        .iter()
        .enumerate()
        .flat_map(|(s, &n)| (0..n).map(move |i| (s, i)))
        .collect();
    if pool.is_empty() {
        return Vec::new();
    }
    let mut out = Vec::with_capacity(budget);
    for pass in 0.. {
        if out.len() >= budget {
            break;
        }
        let mut p = pool.clone();
        p.shuffle(&mut seed::rng(seed::derive(rng_seed, &[pass])));
        out.extend(p.into_iter().take(budget - out.len()));
    }
    out
}

/// Number of pooled sequences a baseline consumes.
pub fn central_budget(cfg: &RunConfig, pooled: usize) -> usize {
    match cfg.central.sample_budget {
        Some(b) => b.max(1),
        None => ((cfg.central.data_fraction * pooled as f64).round() as usize).max(1),
    }
}

/// Sequences a federated run draws in total, the budget a baseline needs to
/// be compared on equal terms.
pub fn fl_sample_budget(cfg: &RunConfig, silos: &[SiloDataset]) -> usize {
    let per_round: usize = silos
        .iter()
        .map(|s| cfg.sampling.samples_for(s.n_samples()))
        .sum();
    per_round * cfg.max_iterations
}

/// Pooled-data baseline: uniform, non-stratified batches over every silo's
/// training data; evaluation covers every silo.
pub fn run_central(cfg: &RunConfig, silos: &[SiloDataset]) -> Result<CentralOutcome> {
    let train: Vec<&SiloDataset> = silos.iter().collect();
    run_pooled(cfg, &train, silos)
}

/// Baseline trained on one silo's data only, with the central settings.
pub fn run_per_silo(
    cfg: &RunConfig,
    silos: &[SiloDataset],
    silo_id: u32,
) -> Result<CentralOutcome> {
    let train: Vec<&SiloDataset> = silos.iter().filter(|s| s.silo_id == silo_id).collect();
    if train.is_empty() {
        return Err(Error::Config(format!("unknown silo {silo_id}")));
    }
    run_pooled(cfg, &train, silos)
}

fn run_pooled(
    cfg: &RunConfig,
    train: &[&SiloDataset],
    eval_silos: &[SiloDataset],
) -> Result<CentralOutcome> {
    check_silos(eval_silos)?;
    if let Some(s) = train.iter().find(|s| s.train.is_empty()) {
        return Err(Error::EmptySilo(s.silo_id));
    }
    let shape = cfg.shape();
    let c = cfg.central;
    let master = cfg.master_seed;
    let sizes: Vec<usize> = train.iter().map(|s| s.n_samples()).collect();
    let budget = central_budget(cfg, sizes.iter().sum());
    let schedule = central_schedule(&sizes, budget, seed::derive(master, &[tag::CENTRAL]));

    let eval_pool: Vec<&[u32]> = eval_silos
        .iter()
        .flat_map(|s| s.test.iter().map(Vec::as_slice))
        .collect();
    let eval_k = c.eval_samples.min(eval_pool.len());
    let periodic_eval = |theta: &ParamVector, step: usize, log: &mut TrainingLog| -> Result<()> {
        if eval_k == 0 {
            return Ok(());
        }
        let mut rng = seed::rng_for(master, &[tag::EVAL, step as u64]);
        let picked = rand::seq::index::sample(&mut rng, eval_pool.len(), eval_k);
        let seqs: Vec<&[u32]> = picked.iter().map(|i| eval_pool[i]).collect();
        let set = eval::mask_split(
            u32::MAX,
            &seqs,
            &shape,
            cfg.data.mask_prob,
            seed::derive(master, &[tag::EVAL, step as u64, 1]),
        )?
        .expect("non-empty");
        let ppl = model::perplexity(theta, &shape, &set.batch)?;
        log.push(step, Phase::Eval5, SiloRef::All, "perplexity", ppl);
        Ok(())
    };

    let mut log = TrainingLog::new(master, cfg.to_json());
    let mut theta = initial_params(cfg);
    let mut opt = ServerOptState::new(c.optimizer, shape.param_count());
    let n_batches = schedule.len().div_ceil(c.batch_size);
    for (step, chunk) in schedule.chunks(c.batch_size).enumerate() {
        if step % c.eval_every_batches == 0 {
            periodic_eval(&theta, step, &mut log)?;
        }
        let seqs: Vec<&[u32]> = chunk
            .iter()
            .map(|&(s, i)| train[s].train[i].as_slice())
            .collect();
        let batch = model::mask_sequences(
            &seqs,
            cfg.data.mask_prob,
            shape.context_window,
            seed::derive(master, &[tag::CENTRAL, step as u64]),
        )?;
        let (l, g) = model::loss_and_gradient(&theta, &shape, &batch)?;
        let non_finite = || Error::NonFiniteLoss {
            silo_id: u32::MAX,
            batch: step,
        };
        if !l.is_finite() {
            return Err(non_finite());
        }
        log.push(step, Phase::Train, SiloRef::All, "loss", l);
        theta = opt.step(&theta, &g).map_err(|_| non_finite())?;
    }
    if n_batches.is_multiple_of(c.eval_every_batches) {
        periodic_eval(&theta, n_batches, &mut log)?;
    }
    let final_eval = eval::evaluate(&theta, &shape, &final_eval_sets(cfg, eval_silos)?)?;
    final_eval.log_into(&mut log, n_batches, Phase::FinalEval);
    Ok(CentralOutcome {
        log,
        final_params: theta,
        final_eval,
        batches: n_batches,
    })
}
