//! Synthetic per-silo corpora and the per-round sampling rule.
//!
//! Each silo speaks one synthetic "language": a Zipf distribution over a
//! permuted private vocabulary region, mixed with a Zipf distribution over a
//! token pool shared by every language. Silos are homogeneous internally and
//! strongly non-i.i.d. with respect to each other.

use std::collections::HashMap;
use std::io::{BufRead, BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};

use crate::error::{Error, Result};
use crate::seed;

/// Train sizes of the nine default silos, largest first.
pub const DEFAULT_SILO_SIZES: [usize; 9] = [
    200_000, 40_000, 30_000, 10_000, 10_000, 5_000, 5_000, 2_000, 1_000,
];

/// Sampling constants of the production system.
pub const PAPER_FLOOR: usize = 500;
pub const PAPER_COEF: f64 = 0.8e-4;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LanguageProfile {
    pub language_id: u32,
    pub zipf_exponent: f64,
    /// Seeds the rank-to-token permutations of both vocabulary regions.
    pub perm_seed: u64,
    /// Probability that a token is drawn from the shared pool.
    pub shared_core_fraction: f64,
    pub shared_tokens: Range<u32>,
    pub private_tokens: Range<u32>,
}

/// Partition of a vocabulary into a shared pool followed by equal private
/// regions, one per language.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VocabLayout {
    pub vocab_size: usize,
    pub shared_vocab: usize,
    pub n_languages: usize,
}

impl VocabLayout {
    pub fn private_vocab(&self) -> usize {
        (self.vocab_size - self.shared_vocab) / self.n_languages
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_languages == 0
            || self.shared_vocab > self.vocab_size
            || self.vocab_size - self.shared_vocab < self.n_languages
        {
            return Err(Error::Config(format!(
                "vocabulary of {} with {} shared tokens cannot host {} languages",
                self.vocab_size, self.shared_vocab, self.n_languages
            )));
        }
        Ok(())
    }

    pub fn profile(
        &self,
        language_id: u32,
        zipf_exponent: f64,
        shared_core_fraction: f64,
        perm_seed: u64,
    ) -> LanguageProfile {
        let p = self.private_vocab() as u32;
        let start = self.shared_vocab as u32 + language_id * p;
        LanguageProfile {
            language_id,
            zipf_exponent,
            perm_seed,
            shared_core_fraction,
            shared_tokens: 0..self.shared_vocab as u32,
            private_tokens: start..start + p,
        }
    }
}

/// Draws tokens for one language profile.
struct TokenSampler {
    shared: Option<(Vec<u32>, Zipf<f64>)>,
    private: Option<(Vec<u32>, Zipf<f64>)>,
    shared_fraction: f64,
}

impl TokenSampler {
    fn new(profile: &LanguageProfile) -> Result<Self> {
        let region = |range: &Range<u32>, tag: u64| -> Result<Option<(Vec<u32>, Zipf<f64>)>> {
            if range.is_empty() {
                return Ok(None);
            }
            let mut perm: Vec<u32> = range.clone().collect();
            perm.shuffle(&mut seed::rng_for(profile.perm_seed, &[tag]));
            let zipf = Zipf::new(perm.len() as f64, profile.zipf_exponent)
                .map_err(|e| Error::Config(format!("zipf distribution: {e}")))?;
            Ok(Some((perm, zipf)))
        };
        let sampler = Self {
            shared: region(&profile.shared_tokens, 0)?,
            private: region(&profile.private_tokens, 1)?,
            shared_fraction: profile.shared_core_fraction,
        };
        if !(0.0..=1.0).contains(&sampler.shared_fraction) {
            return Err(Error::Config(format!(
                "shared_core_fraction {} outside [0, 1]",
                sampler.shared_fraction
            )));
        }
        let needs_shared = sampler.shared_fraction > 0.0;
        let needs_private = sampler.shared_fraction < 1.0;
        if (needs_shared && sampler.shared.is_none())
            || (needs_private && sampler.private.is_none())
        {
            return Err(Error::Config(format!(
                "language {} draws from an empty vocabulary region",
                profile.language_id
            )));
        }
        Ok(sampler)
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> u32 {
        let use_shared = match (&self.shared, &self.private) {
            (Some(_), Some(_)) => rng.random_bool(self.shared_fraction),
            (Some(_), None) => true,
            _ => false,
        };
        let (perm, zipf) = if use_shared {
            self.shared.as_ref().unwrap()
        } else {
            self.private.as_ref().unwrap()
        };
        let rank = zipf.sample(rng) as usize;
        perm[rank - 1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiloDataset {
    pub silo_id: u32,
    pub language: Option<LanguageProfile>,
    pub train: Vec<Vec<u32>>,
    pub test: Vec<Vec<u32>>,
}

impl SiloDataset {
    /// `Nᵢ`, the number of training sequences.
    pub fn n_samples(&self) -> usize {
        self.train.len()
    }
}

pub fn generate_silo(
    silo_id: u32,
    profile: &LanguageProfile,
    n_train: usize,
    n_test: usize,
    seq_len: usize,
    seed: u64,
) -> Result<SiloDataset> {
    if n_train == 0 {
        return Err(Error::InvalidArgument("n_train must be at least 1".into()));
    }
    if seq_len < 2 {
        return Err(Error::InvalidArgument("seq_len must be at least 2".into()));
    }
    let sampler = TokenSampler::new(profile)?;
    let mut rng = seed::rng(seed);
    let mut draw = |n: usize| -> Vec<Vec<u32>> {
        (0..n)
            .map(|_| (0..seq_len).map(|_| sampler.sample(&mut rng)).collect())
            .collect()
    };
    let train = draw(n_train);
    let test = draw(n_test);
    Ok(SiloDataset {
        silo_id,
        language: Some(profile.clone()),
        train,
        test,
    })
}

/// `max(floor, round(coef·Nᵢ))`.
pub fn round_sample_size(n_silo: usize, floor: usize, coef: f64) -> usize {
    floor.max((coef * n_silo as f64).round() as usize)
}

/// `count` training sequences picked uniformly with replacement.
pub fn draw_round_samples(
    dataset: &SiloDataset,
    count: usize,
    rng_seed: u64,
) -> Result<Vec<&[u32]>> {
    if dataset.train.is_empty() {
        return Err(Error::EmptySilo(dataset.silo_id));
    }
    let mut rng = seed::rng(rng_seed);
    Ok((0..count)
        .map(|_| dataset.train.choose(&mut rng).unwrap().as_slice())
        .collect())
}

/// Consecutive batches of `batch_size`, the last possibly short, keeping at
/// most `max_batches` of them.
pub fn split_into_local_batches<T>(
    samples: &[T],
    batch_size: usize,
    max_batches: usize,
) -> Result<Vec<&[T]>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument(
            "batch_size must be at least 1".into(),
        ));
    }
    Ok(samples.chunks(batch_size).take(max_batches).collect())
}

/// Multinomial naive Bayes over token counts, with add-one smoothing.
#[derive(Debug, Clone)]
pub struct UnigramClassifier {
    labels: Vec<u32>,
    log_probs: Vec<Vec<f64>>,
}

impl UnigramClassifier {
    pub fn fit(vocab_size: usize, classes: &[(u32, &[Vec<u32>])]) -> Self {
        let mut labels = Vec::new();
        let mut log_probs = Vec::new();
        for (label, seqs) in classes {
            let mut counts = vec![1.0; vocab_size];
            for &t in seqs.iter().flatten() {
                counts[t as usize] += 1.0;
            }
            let total: f64 = counts.iter().sum();
            labels.push(*label);
            log_probs.push(counts.iter().map(|c| (c / total).ln()).collect());
        }
        Self { labels, log_probs }
    }

    pub fn predict(&self, seq: &[u32]) -> u32 {
        let score = |lp: &Vec<f64>| seq.iter().map(|&t| lp[t as usize]).sum::<f64>();
        let best = self
            .log_probs
            .iter()
            .enumerate()
            .max_by(|a, b| score(a.1).total_cmp(&score(b.1)))
            .map(|(i, _)| i)
            .expect("classifier has at least one class");
        self.labels[best]
    }
}

pub fn corpus_file_name(silo_id: u32, split: &str) -> String {
    format!("silo{silo_id}_{split}.tok")
}

/// One sequence per line, tokens as space-separated decimal ids.
pub fn write_corpus<W: Write>(w: W, sequences: &[Vec<u32>]) -> std::io::Result<()> {
    let mut w = BufWriter::new(w);
    for seq in sequences {
        let mut first = true;
        for t in seq {
            if !first {
                w.write_all(b" ")?;
            }
            write!(w, "{t}")?;
            first = false;
        }
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_corpus(path: &Path) -> Result<Vec<Vec<u32>>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_ascii_whitespace()
            .map(|tok| tok.parse::<u32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Format {
                what: "corpus file",
                detail: format!("{}:{}: {e}", path.display(), lineno + 1),
            })?;
        out.push(seq);
    }
    Ok(out)
}

/// Token frequencies, most frequent first.
pub fn rank_frequencies<'a>(tokens: impl IntoIterator<Item = &'a u32>) -> Vec<usize> {
    let mut counts: HashMap<u32, usize> = HashMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let mut freqs: Vec<usize> = counts.into_values().collect();
    freqs.sort_unstable_by(|a, b| b.cmp(a));
    freqs
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn layout() -> VocabLayout {
        VocabLayout {
            vocab_size: 104,
            shared_vocab: 32,
            n_languages: 3,
        }
    }

    #[test]
    fn layout_partitions_vocabulary() {
        let l = layout();
        assert_eq!(l.private_vocab(), 24);
        let a = l.profile(0, 1.1, 0.2, 1);
        let c = l.profile(2, 1.1, 0.2, 1);
        assert_eq!(a.private_tokens, 32..56);
        assert_eq!(c.private_tokens, 80..104);
        assert!(VocabLayout {
            vocab_size: 10,
            shared_vocab: 9,
            n_languages: 3
        }
        .validate()
        .is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let p = layout().profile(1, 1.1, 0.2, 5);
        let a = generate_silo(1, &p, 50, 10, 8, 99).unwrap();
        let b = generate_silo(1, &p, 50, 10, 8, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_samples(), 50);
        assert!(a.train.iter().chain(&a.test).all(|s| s.len() == 8));
        assert_ne!(a, generate_silo(1, &p, 50, 10, 8, 100).unwrap());
    }

    #[test]
    fn languages_without_core_do_not_overlap() {
        let l = layout();
        let a = generate_silo(0, &l.profile(0, 1.1, 0.0, 1), 500, 0, 10, 1).unwrap();
        let b = generate_silo(1, &l.profile(1, 1.1, 0.0, 2), 500, 0, 10, 2).unwrap();
        let ta: HashSet<u32> = a.train.iter().flatten().copied().collect();
        let tb: HashSet<u32> = b.train.iter().flatten().copied().collect();
        assert!(ta.is_disjoint(&tb));
    }

    #[test]
    fn zipf_slope_matches_exponent() {
        let profile = LanguageProfile {
            language_id: 0,
            zipf_exponent: 1.1,
            perm_seed: 3,
            shared_core_fraction: 0.0,
            shared_tokens: 0..0,
            private_tokens: 0..1000,
        };
        let silo = generate_silo(0, &profile, 10_000, 0, 10, 17).unwrap();
        let freqs = rank_frequencies(silo.train.iter().flatten());
        let pts: Vec<(f64, f64)> = freqs
            .iter()
            .take(100)
            .enumerate()
            .map(|(r, &f)| (((r + 1) as f64).ln(), (f as f64).ln()))
            .collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 1.1).abs() <= 0.1, "slope {slope}");
    }

    #[test]
    fn sample_size_rule() {
        assert_eq!(round_sample_size(1_000_000, PAPER_FLOOR, PAPER_COEF), 500);
        assert_eq!(
            round_sample_size(132_500_000, PAPER_FLOOR, PAPER_COEF),
            10_600
        );
        assert_eq!(round_sample_size(0, PAPER_FLOOR, PAPER_COEF), 500);
        let threshold = (PAPER_FLOOR as f64 / PAPER_COEF) as usize;
        let mut prev = 0;
        for n in (0..threshold * 3).step_by(threshold / 50) {
            let s = round_sample_size(n, PAPER_FLOOR, PAPER_COEF);
            assert!(s >= prev);
            if n <= threshold {
                assert_eq!(s, PAPER_FLOOR);
            }
            prev = s;
        }
    }

    #[test]
    fn draws_with_replacement() {
        let silo = SiloDataset {
            silo_id: 0,
            language: None,
            train: vec![vec![1, 2, 3]],
            test: vec![],
        };
        let d = draw_round_samples(&silo, 3, 0).unwrap();
        assert_eq!(d, vec![&[1, 2, 3][..]; 3]);
        let empty = SiloDataset {
            train: vec![],
            ..silo
        };
        assert!(matches!(
            draw_round_samples(&empty, 3, 0),
            Err(Error::EmptySilo(0))
        ));
    }

    #[test]
    fn draws_are_uniform_and_seeded() {
        let silo = SiloDataset {
            silo_id: 0,
            language: None,
            train: (0..10).map(|i| vec![i, i]).collect(),
            test: vec![],
        };
        let a = draw_round_samples(&silo, 100_000, 5).unwrap();
        assert_eq!(a, draw_round_samples(&silo, 100_000, 5).unwrap());
        assert_ne!(
            a[..50],
            draw_round_samples(&silo, 100_000, 6).unwrap()[..50]
        );
        let mut counts = [0usize; 10];
        for s in &a {
            counts[s[0] as usize] += 1;
        }
        for c in counts {
            let f = c as f64 / 100_000.0;
            assert!((0.09..=0.11).contains(&f), "{f}");
        }
    }

    #[test]
    fn local_batches() {
        let s: Vec<u32> = (0..10_600).collect();
        assert_eq!(split_into_local_batches(&s, 1767, 6).unwrap().len(), 6);
        let s: Vec<u32> = (0..500).collect();
        assert_eq!(split_into_local_batches(&s, 500, 8).unwrap().len(), 1);
        let b = split_into_local_batches(&s, 64, 4).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(500 - b.iter().map(|x| x.len()).sum::<usize>(), 244);
        assert!(split_into_local_batches(&s, 0, 4).is_err());
        assert!(split_into_local_batches(&s, 64, 0).unwrap().is_empty());
    }

    #[test]
    fn corpus_round_trip() {
        let seqs = vec![vec![0, 15, 3], vec![7, 7]];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(corpus_file_name(3, "train"));
        write_corpus(std::fs::File::create(&path).unwrap(), &seqs).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "0 15 3\n7 7\n");
        assert_eq!(read_corpus(&path).unwrap(), seqs);
        std::fs::write(&path, "1 x 2\n").unwrap();
        assert!(read_corpus(&path).is_err());
    }
}
