//! A minimal masked-token predictor.
//!
//! The model averages the embeddings of a target's unmasked neighbours, maps
//! that through a linear layer to vocabulary logits and applies a softmax.
//! The parameter vector is laid out as
//!
//! ```text
//! [ embeddings: V×d | output weights: V×d | output bias: V ]
//! ```
//!
//! with row `t` of the embedding block holding token `t`, and row `v` of the
//! output block holding the weights for logit `v`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Total number of neighbours visible around a target (half on each side).
    pub context_window: usize,
}

impl ModelShape {
    pub fn param_count(&self) -> usize {
        2 * self.vocab_size * self.embed_dim + self.vocab_size
    }

    fn output_offset(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    fn bias_offset(&self) -> usize {
        2 * self.vocab_size * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.embed_dim == 0 || self.context_window == 0 {
            return Err(Error::Config(format!(
                "model shape needs vocab_size >= 2, embed_dim >= 1, context_window >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Small Gaussian initialisation; all-zero weights are a saddle point of
    /// the embedding/projection product and never leave it.
    pub fn init_params(&self, std: f64, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        let normal = rand_distr::Normal::new(0.0, std).expect("std must be finite and >= 0");
        let mut values: Vec<f64> = (0..self.param_count())
            .map(|_| rng.sample(normal))
            .collect();
        values[self.bias_offset()..].fill(0.0);
        ParamVector::new(values).expect("normal draws are finite")
    }

    fn check(&self, params: &ParamVector) -> Result<()> {
        if params.dim() != self.param_count() {
            return Err(Error::DimensionMismatch {
                expected: self.param_count(),
                got: params.dim(),
            });
        }
        Ok(())
    }
}

/// Masked targets together with the unmasked neighbours each one may see.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedBatch {
    pub contexts: Vec<Vec<u32>>,
    pub targets: Vec<u32>,
}

impl MaskedBatch {
    pub fn size(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn extend(&mut self, other: MaskedBatch) {
        self.contexts.extend(other.contexts);
        self.targets.extend(other.targets);
    }

    fn check(&self, shape: &ModelShape) -> Result<()> {
        if self.contexts.len() != self.targets.len() {
            return Err(Error::InvalidArgument(format!(
                "{} contexts for {} targets",
                self.contexts.len(),
                self.targets.len()
            )));
        }
        let v = shape.vocab_size as u32;
        let bad = self
            .targets
            .iter()
            .chain(self.contexts.iter().flatten())
            .find(|&&t| t >= v);
        if let Some(t) = bad {
            return Err(Error::InvalidArgument(format!(
                "token id {t} outside vocabulary of size {v}"
            )));
        }
        Ok(())
    }
}

/// Selects each position as a target independently with probability
/// `mask_prob`. Every masked position is hidden from all contexts. If no
/// position is drawn, one uniformly chosen position is masked so the batch is
/// never empty.
pub fn mask_sequences<S: AsRef<[u32]>>(
    sequences: &[S],
    mask_prob: f64,
    context_window: usize,
    rng_seed: u64,
) -> Result<MaskedBatch> {
    if sequences.is_empty() {
        return Err(Error::EmptyInput("no sequences to mask"));
    }
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "mask probability {mask_prob} outside (0, 1)"
        )));
    }
    if let Some(s) = sequences.iter().find(|s| s.as_ref().len() < 2) {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} is shorter than 2",
            s.as_ref().len()
        )));
    }

    let mut rng = seed::rng(rng_seed);
    let mut selected: Vec<Vec<bool>> = sequences
        .iter()
        .map(|s| {
            (0..s.as_ref().len())
                .map(|_| rng.random_bool(mask_prob))
                .collect()
        })
        .collect();
    if !selected.iter().flatten().any(|&m| m) {
        let total: usize = sequences.iter().map(|s| s.as_ref().len()).sum();
        let mut pick = rng.random_range(0..total);
        for row in &mut selected {
            if pick < row.len() {
                row[pick] = true;
                break;
            }
            pick -= row.len();
        }
    }

    let left = context_window / 2;
    let right = context_window - left;
    let mut batch = MaskedBatch::default();
    for (seq, mask) in sequences.iter().zip(&selected) {
        let seq = seq.as_ref();
        for p in (0..seq.len()).filter(|&p| mask[p]) {
            let lo = p.saturating_sub(left);
            let hi = (p + right).min(seq.len() - 1);
            let ctx = (lo..=hi)
                .filter(|&q| q != p && !mask[q])
                .map(|q| seq[q])
                .collect();
            batch.contexts.push(ctx);
            batch.targets.push(seq[p]);
        }
    }
    Ok(batch)
}

/// Per-target forward pass: fills `h` with the context mean and `logits`.
fn forward(params: &[f64], shape: &ModelShape, ctx: &[u32], h: &mut [f64], logits: &mut [f64]) {
    let d = shape.embed_dim;
    h.fill(0.0);
    if !ctx.is_empty() {
        for &t in ctx {
            let row = &params[t as usize * d..(t as usize + 1) * d];
            for (hk, e) in h.iter_mut().zip(row) {
                *hk += e;
            }
        }
        let inv = 1.0 / ctx.len() as f64;
        h.iter_mut().for_each(|x| *x *= inv);
    }
    let w = &params[shape.output_offset()..shape.bias_offset()];
    let b = &params[shape.bias_offset()..];
    for (v, l) in logits.iter_mut().enumerate() {
        let row = &w[v * d..(v + 1) * d];
        *l = b[v] + row.iter().zip(h.iter()).map(|(a, x)| a * x).sum::<f64>();
    }
}

/// Normalises in place; returns `(max, lse - max)` so callers can form
/// `lse - logit` without cancellation.
fn softmax_in_place(logits: &mut [f64]) -> (f64, f64) {
    let (arg, max) =
        logits
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |b, (i, l)| if l > b.1 { (i, l) } else { b },
            );
    let mut rest = 0.0;
    for (i, l) in logits.iter_mut().enumerate() {
        *l = (*l - max).exp();
        if i != arg {
            rest += *l;
        }
    }
    let z = 1.0 + rest;
    logits.iter_mut().for_each(|p| *p /= z);
    (max, rest.ln_1p())
}

/// Sum of negative log-likelihoods over the batch's targets.
pub fn total_nll(params: &ParamVector, shape: &ModelShape, batch: &MaskedBatch) -> Result<f64> {
    shape.check(params)?;
    batch.check(shape)?;
    let p = params.as_slice();
    let mut h = vec![0.0; shape.embed_dim];
    let mut logits = vec![0.0; shape.vocab_size];
    let mut sum = 0.0;
    for (ctx, &t) in batch.contexts.iter().zip(&batch.targets) {
        forward(p, shape, ctx, &mut h, &mut logits);
        let target_logit = logits[t as usize];
        let (max, tail) = softmax_in_place(&mut logits);
        sum += (max - target_logit) + tail;
    }
    Ok(sum)
}

/// Mean cross-entropy of the masked targets.
pub fn loss(params: &ParamVector, shape: &ModelShape, batch: &MaskedBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch has no targets"));
    }
    Ok(total_nll(params, shape, batch)? / batch.size() as f64)
}

/// Analytic gradient of [`loss`] together with the loss itself.
pub fn loss_and_gradient(
    params: &ParamVector,
    shape: &ModelShape,
    batch: &MaskedBatch,
) -> Result<(f64, ParamVector)> {
    shape.check(params)?;
    batch.check(shape)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput("batch has no targets"));
    }
    let d = shape.embed_dim;
    let p = params.as_slice();
    let w_off = shape.output_offset();
    let b_off = shape.bias_offset();
    let scale = 1.0 / batch.size() as f64;

    let mut grad = vec![0.0; shape.param_count()];
    let mut h = vec![0.0; d];
    let mut probs = vec![0.0; shape.vocab_size];
    let mut dh = vec![0.0; d];
    let mut sum = 0.0;

    for (ctx, &t) in batch.contexts.iter().zip(&batch.targets) {
        forward(p, shape, ctx, &mut h, &mut probs);
        let target_logit = probs[t as usize];
        let (max, tail) = softmax_in_place(&mut probs);
        sum += (max - target_logit) + tail;

        // dL/dlogit = p - onehot(t)
        probs[t as usize] -= 1.0;
        dh.fill(0.0);
        for (v, &g) in probs.iter().enumerate() {
            let g = g * scale;
            grad[b_off + v] += g;
            let w_row = &p[w_off + v * d..w_off + (v + 1) * d];
            let gw_row = &mut grad[w_off + v * d..w_off + (v + 1) * d];
            for k in 0..d {
                gw_row[k] += g * h[k];
                dh[k] += g * w_row[k];
            }
        }
        if !ctx.is_empty() {
            let inv = 1.0 / ctx.len() as f64;
            for &c in ctx {
                let ge = &mut grad[c as usize * d..(c as usize + 1) * d];
                for (g, x) in ge.iter_mut().zip(&dh) {
                    *g += x * inv;
                }
            }
        }
    }
    Ok((sum * scale, ParamVector::new(grad)?))
}

pub fn gradient(
    params: &ParamVector,
    shape: &ModelShape,
    batch: &MaskedBatch,
) -> Result<ParamVector> {
    loss_and_gradient(params, shape, batch).map(|(_, g)| g)
}

/// `exp` of the mean negative log-likelihood over `eval_set`.
pub fn perplexity(params: &ParamVector, shape: &ModelShape, eval_set: &MaskedBatch) -> Result<f64> {
    loss(params, shape, eval_set).map(f64::exp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn shape(v: usize, d: usize) -> ModelShape {
        ModelShape {
            vocab_size: v,
            embed_dim: d,
            context_window: 4,
        }
    }

    fn random_instance(
        seed_: u64,
        v: usize,
        d: usize,
        n: usize,
    ) -> (ModelShape, ParamVector, MaskedBatch) {
        let s = shape(v, d);
        let params = s.init_params(0.7, seed_);
        let mut rng = seed::rng(seed_ ^ 0xABCD);
        let mut params = params.into_vec();
        let b = s.bias_offset();
        params[b..]
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-1.0..1.0));
        let seqs: Vec<Vec<u32>> = (0..n)
            .map(|_| (0..6).map(|_| rng.random_range(0..v as u32)).collect())
            .collect();
        let batch = mask_sequences(&seqs, 0.4, 4, seed_).unwrap();
        (s, ParamVector::new(params).unwrap(), batch)
    }

    /// Scalar-loop cross entropy written without the vectorised helpers.
    fn reference_loss(params: &[f64], s: &ModelShape, batch: &MaskedBatch) -> f64 {
        let (v, d) = (s.vocab_size, s.embed_dim);
        let mut total = 0.0;
        for (ctx, &t) in batch.contexts.iter().zip(&batch.targets) {
            let mut logits = vec![0.0; v];
            for (j, logit) in logits.iter_mut().enumerate() {
                let mut acc = params[2 * v * d + j];
                for k in 0..d {
                    let mut hk = 0.0;
                    for &c in ctx {
                        hk += params[c as usize * d + k];
                    }
                    if !ctx.is_empty() {
                        hk /= ctx.len() as f64;
                    }
                    acc += params[v * d + j * d + k] * hk;
                }
                *logit = acc;
            }
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            total += -(logits[t as usize].exp() / z).ln();
        }
        total / batch.size() as f64
    }

    #[test]
    fn zero_params_give_uniform_loss() {
        let s = shape(13, 3);
        let batch = mask_sequences(&[vec![1, 2, 3, 4, 5, 6, 7]], 0.5, 4, 1).unwrap();
        let zero = ParamVector::zeros(s.param_count());
        assert_eq!(loss(&zero, &s, &batch).unwrap(), (13f64).ln());
        assert!((perplexity(&zero, &s, &batch).unwrap() - 13.0).abs() < 1e-12);
    }

    #[test]
    fn saturated_margin_drives_loss_to_zero() {
        let s = shape(2, 1);
        let batch = MaskedBatch {
            contexts: vec![vec![0]],
            targets: vec![1],
        };
        let mut p = vec![0.0; s.param_count()];
        p[s.bias_offset() + 1] = 60.0;
        let p = ParamVector::new(p).unwrap();
        let l = loss(&p, &s, &batch).unwrap();
        assert!(l > 0.0 && l < 1e-25);
        assert!((perplexity(&p, &s, &batch).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_reference() {
        let (s, p, batch) = random_instance(9, 5, 3, 4);
        let fast = loss(&p, &s, &batch).unwrap();
        let slow = reference_loss(p.as_slice(), &s, &batch);
        assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
    }

    #[test]
    fn uniform_bias_gradient_closed_form() {
        let s = shape(2, 2);
        let batch = MaskedBatch {
            contexts: vec![vec![0]],
            targets: vec![1],
        };
        let g = gradient(&ParamVector::zeros(s.param_count()), &s, &batch).unwrap();
        let b = &g.as_slice()[s.bias_offset()..];
        assert_eq!(b, &[0.5, -0.5]);
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let (s, p, batch) = random_instance(21, 6, 3, 5);
        let full = gradient(&p, &s, &batch).unwrap();
        let mut acc = vec![0.0; s.param_count()];
        for (c, t) in batch.contexts.iter().zip(&batch.targets) {
            let one = MaskedBatch {
                contexts: vec![c.clone()],
                targets: vec![*t],
            };
            let g = gradient(&p, &s, &one).unwrap();
            for (a, x) in acc.iter_mut().zip(g.as_slice()) {
                *a += x / batch.size() as f64;
            }
        }
        let acc = ParamVector::new(acc).unwrap();
        assert!(full.max_abs_diff(&acc) < 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let (s, p, batch) = random_instance(4, 7, 4, 6);
        let g = gradient(&p, &s, &batch).unwrap();
        let h = 1e-5;
        let mut x = p.clone().into_vec();
        for i in 0..x.len() {
            let orig = x[i];
            x[i] = orig + h;
            let up = reference_loss(&x, &s, &batch);
            x[i] = orig - h;
            let down = reference_loss(&x, &s, &batch);
            x[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = g.as_slice()[i];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-4);
            assert!(rel < 1e-6, "coord {i}: analytic {a}, numeric {fd}");
        }
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let (s, p, batch) = random_instance(31, 8, 2, 8);
        let mut rev = batch.clone();
        rev.contexts.reverse();
        rev.targets.reverse();
        let a = loss(&p, &s, &batch).unwrap();
        let b = loss(&p, &s, &rev).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn sgd_step_decreases_batch_loss() {
        for seed_ in 0..10 {
            let (s, p, batch) = random_instance(100 + seed_, 9, 4, 6);
            let (l0, g) = loss_and_gradient(&p, &s, &batch).unwrap();
            let stepped: Vec<f64> = p
                .as_slice()
                .iter()
                .zip(g.as_slice())
                .map(|(x, gx)| x - 1e-2 * gx)
                .collect();
            let l1 = loss(&ParamVector::new(stepped).unwrap(), &s, &batch).unwrap();
            assert!(l1 < l0);
        }
    }

    #[test]
    fn perplexity_is_exp_loss() {
        let (s, p, batch) = random_instance(77, 10, 5, 5);
        let ppl = perplexity(&p, &s, &batch).unwrap();
        assert!((ppl - loss(&p, &s, &batch).unwrap().exp()).abs() < 1e-12);
        assert!(ppl >= 1.0);
    }

    #[test]
    fn masking_forces_one_target() {
        let b = mask_sequences(&[vec![4, 5, 6]], 1e-15, 4, 3).unwrap();
        assert_eq!(b.size(), 1);
        assert_eq!(b.contexts[0].len(), 2);
    }

    #[test]
    fn masking_is_deterministic() {
        let seqs = vec![vec![1, 2, 3, 4, 5], vec![6, 7, 8, 9]];
        assert_eq!(
            mask_sequences(&seqs, 0.3, 4, 42).unwrap(),
            mask_sequences(&seqs, 0.3, 4, 42).unwrap()
        );
    }

    #[test]
    fn masking_rate_concentrates() {
        let seqs: Vec<Vec<u32>> = (0..10_000)
            .map(|i| (0..10).map(|j| (i + j) % 50).collect())
            .collect();
        let b = mask_sequences(&seqs, 0.15, 4, 8).unwrap();
        let rate = b.size() as f64 / 100_000.0;
        assert!((0.14..=0.16).contains(&rate), "{rate}");
    }

    #[test]
    fn masked_neighbours_are_hidden() {
        // window 4 on a length-5 sequence: position 2 sees positions 0,1,3,4
        let seq = vec![10, 11, 12, 13, 14];
        let b = mask_sequences(&[seq], 0.5, 4, 12).unwrap();
        for (ctx, t) in b.contexts.iter().zip(&b.targets) {
            assert!(!ctx.contains(t));
            for c in ctx {
                assert!(!b.targets.contains(c));
            }
        }
    }

    #[test]
    fn masking_rejects_bad_input() {
        assert!(mask_sequences::<Vec<u32>>(&[], 0.2, 4, 0).is_err());
        assert!(mask_sequences(&[vec![1, 2]], 0.0, 4, 0).is_err());
        assert!(mask_sequences(&[vec![1, 2]], 1.0, 4, 0).is_err());
        assert!(mask_sequences(&[vec![1]], 0.5, 4, 0).is_err());
    }

    #[test]
    fn rejects_out_of_vocab_and_wrong_dim() {
        let s = shape(4, 2);
        let batch = MaskedBatch {
            contexts: vec![vec![9]],
            targets: vec![1],
        };
        assert!(loss(&ParamVector::zeros(s.param_count()), &s, &batch).is_err());
        let ok = MaskedBatch {
            contexts: vec![vec![0]],
            targets: vec![1],
        };
        assert!(matches!(
            loss(&ParamVector::zeros(3), &s, &ok),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
