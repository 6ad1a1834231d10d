//! Pairwise mask-cancelling secure summation.
//!
//! Every pair of silos `(a, b)` with `a < b` shares a 256-bit seed. For each
//! round both expand it into the same pseudorandom vector over
//! `Z / 2^modulus_bits`; `a` adds it to its fixed-point encoded update and `b`
//! subtracts it. A single share is uniformly masked, while the sum of all
//! shares equals the sum of the plain encodings exactly.
//!
//! The masks are a ChaCha20 keystream keyed by the pair seed, with the round
//! number selecting the stream. Seed distribution is simulated by a trusted
//! setup step; the threat model is an honest-but-curious server, and there
//! is no dropout recovery, so every registered silo must contribute.

use std::collections::BTreeSet;
use std::io::Read;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};
use crate::param::{fp_decode, fp_encode, FixedPointParams, FixedPointVector, ParamVector};
use crate::seed;

#[derive(Clone, PartialEq, Eq)]
pub struct PairSeed {
    pub silo_a: u32,
    pub silo_b: u32,
    pub seed: [u8; 32],
}

impl std::fmt::Debug for PairSeed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PairSeed")
            .field("silo_a", &self.silo_a)
            .field("silo_b", &self.silo_b)
            .finish_non_exhaustive()
    }
}

/// One silo's masked contribution for a round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskShare {
    pub silo_id: u32,
    pub round: u32,
    pub payload: FixedPointVector,
}

/// Trusted setup: one fresh seed per unordered pair of `silo_ids`.
pub fn distribute_pair_seeds(silo_ids: &[u32], master_seed: u64) -> Vec<PairSeed> {
    let ids: BTreeSet<u32> = silo_ids.iter().copied().collect();
    let ids: Vec<u32> = ids.into_iter().collect();
    let mut rng = ChaCha20Rng::seed_from_u64(seed::derive(master_seed, &[seed::tag::PAIR_SEEDS]));
    let mut out = Vec::new();
    for (i, &a) in ids.iter().enumerate() {
        for &b in &ids[i + 1..] {
            let mut s = [0u8; 32];
            rng.fill_bytes(&mut s);
            out.push(PairSeed {
                silo_a: a,
                silo_b: b,
                seed: s,
            });
        }
    }
    out
}

pub fn derive_mask(
    seed: &PairSeed,
    round: u32,
    dim: usize,
    params: FixedPointParams,
) -> Result<FixedPointVector> {
    params.validate()?;
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "mask dimension must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha20Rng::from_seed(seed.seed);
    rng.set_stream(u64::from(round));
    let mask = params.word_mask();
    let words = (0..dim).map(|_| rng.next_u64() & mask).collect();
    Ok(FixedPointVector { words, params })
}

/// Encodes `weighted_delta` and applies every pairwise mask involving
/// `silo_id`: `+mask` towards higher ids, `−mask` towards lower ones.
pub fn mask_contribution(
    weighted_delta: &ParamVector,
    silo_id: u32,
    pair_seeds: &[PairSeed],
    round: u32,
    params: FixedPointParams,
) -> Result<MaskShare> {
    let mut payload = fp_encode(weighted_delta, params)?;
    for ps in pair_seeds {
        if ps.silo_a == silo_id {
            payload.add_assign(&derive_mask(ps, round, payload.dim(), params)?)?;
        } else if ps.silo_b == silo_id {
            payload.sub_assign(&derive_mask(ps, round, payload.dim(), params)?)?;
        }
    }
    Ok(MaskShare {
        silo_id,
        round,
        payload,
    })
}

/// Wordwise modular sum of all shares, before decoding.
pub fn masked_sum(
    shares: &[MaskShare],
    registered: &[u32],
    params: FixedPointParams,
) -> Result<FixedPointVector> {
    let first = shares
        .first()
        .ok_or_else(|| Error::AggregationSetMismatch("no shares received".into()))?;
    let expected: BTreeSet<u32> = registered.iter().copied().collect();
    let mut seen = BTreeSet::new();
    for s in shares {
        if !seen.insert(s.silo_id) {
            return Err(Error::AggregationSetMismatch(format!(
                "duplicate share from silo {}",
                s.silo_id
            )));
        }
        if s.round != first.round {
            return Err(Error::AggregationSetMismatch(format!(
                "share from silo {} is for round {}, expected {}",
                s.silo_id, s.round, first.round
            )));
        }
        if s.payload.params != params {
            return Err(Error::AggregationSetMismatch(format!(
                "share from silo {} uses different fixed-point parameters",
                s.silo_id
            )));
        }
    }
    if seen != expected {
        let missing: Vec<_> = expected.difference(&seen).collect();
        let extra: Vec<_> = seen.difference(&expected).collect();
        return Err(Error::AggregationSetMismatch(format!(
            "missing shares from {missing:?}, unexpected shares from {extra:?}"
        )));
    }
    let mut acc = FixedPointVector::zeros(first.payload.dim(), params);
    let mut ordered: Vec<&MaskShare> = shares.iter().collect();
    ordered.sort_by_key(|s| s.silo_id);
    for s in ordered {
        acc.add_assign(&s.payload)?;
    }
    Ok(acc)
}

/// Recovers `Σ wᵢ·gᵢ` (fixed-point rounded) from the complete set of shares.
pub fn secure_sum(
    shares: &[MaskShare],
    registered: &[u32],
    params: FixedPointParams,
) -> Result<ParamVector> {
    fp_decode(&masked_sum(shares, registered, params)?)
}

const HEADER_LEN: usize = 4 + 4 + 8 + 1 + 1;

impl MaskShare {
    /// Header `silo_id: u32, round: u32, dim: u64, frac_bits: u8,
    /// modulus_bits: u8`, then `dim` words, all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = self.payload.params;
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.payload.dim());
        out.extend_from_slice(&self.silo_id.to_le_bytes());
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&(self.payload.dim() as u64).to_le_bytes());
        out.push(p.frac_bits as u8);
        out.push(p.modulus_bits as u8);
        for w in &self.payload.words {
            out.extend_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let malformed = |detail: String| Error::Format {
            what: "mask share",
            detail,
        };
        let mut header = [0u8; HEADER_LEN];
        r.read_exact(&mut header)
            .map_err(|e| malformed(format!("header: {e}")))?;
        let silo_id = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let round = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let dim = u64::from_le_bytes(header[8..16].try_into().unwrap()) as usize;
        let params = FixedPointParams {
            frac_bits: u32::from(header[16]),
            modulus_bits: u32::from(header[17]),
        };
        params.validate()?;
        let mut body = Vec::new();
        r.read_to_end(&mut body)
            .map_err(|e| malformed(e.to_string()))?;
        if body.len() != dim * 8 {
            return Err(malformed(format!(
                "header declares {dim} words but body holds {} bytes",
                body.len()
            )));
        }
        let mask = params.word_mask();
        let words: Vec<u64> = body
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if words.iter().any(|&w| w & !mask != 0) {
            return Err(malformed("word outside the ring".into()));
        }
        Ok(Self {
            silo_id,
            round,
            payload: FixedPointVector { words, params },
        })
    }
}
