//! The JSON run description.
//!
//! Every section has defaults, so `{}` plus a silo list is a complete config.
//! Unknown keys anywhere in the document are rejected.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, SiloDataset, VocabLayout, DEFAULT_SILO_SIZES};
use crate::error::{Error, Result};
use crate::model::ModelShape;
use crate::param::FixedPointParams;
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub context_window: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 248,
            embed_dim: 16,
            context_window: 4,
            init_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn shape(&self) -> ModelShape {
        ModelShape {
            vocab_size: self.vocab_size,
            embed_dim: self.embed_dim,
            context_window: self.context_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Seeds corpus generation, independently of the training seed.
    pub seed: u64,
    pub seq_len: usize,
    pub mask_prob: f64,
    pub shared_vocab: usize,
    pub zipf_exponent: f64,
    pub shared_core_fraction: f64,
    /// Where `gen-data` writes `silo<id>_<split>.tok` files.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            seed: 2024,
            seq_len: 12,
            mask_prob: 0.15,
            shared_vocab: 32,
            zipf_exponent: 1.1,
            shared_core_fraction: 0.2,
            corpus_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiloSpec {
    pub silo_id: u32,
    pub language_id: u32,
    pub n_train: usize,
    /// Defaults to a tenth of `n_train`, at least 200, so the pooled test
    /// set carries the same skew as the training data.
    #[serde(default)]
    pub n_test: Option<usize>,
    /// Per-silo cap on local batches per round; overrides the client default.
    #[serde(default)]
    pub max_batches: Option<usize>,
    /// Read the corpus from these files instead of generating it.
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub test_path: Option<PathBuf>,
}

impl SiloSpec {
    pub fn test_size(&self) -> usize {
        self.n_test.unwrap_or((self.n_train / 10).max(200))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientOptConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_local_batches: usize,
}

impl Default for ClientOptConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            batch_size: 64,
            max_local_batches: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServerOptKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerOptConfig {
    pub kind: ServerOptKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for ServerOptConfig {
    fn default() -> Self {
        Self {
            kind: ServerOptKind::SgdMomentum,
            learning_rate: 1.0,
            momentum: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightingScheme {
    #[default]
    ExampleCount,
    Uniform,
}

/// `max(floor, round(coef·Nᵢ))` samples per silo and round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingRule {
    pub floor: usize,
    pub coef: f64,
}

impl Default for SamplingRule {
    fn default() -> Self {
        Self {
            floor: 50,
            coef: 0.8e-3,
        }
    }
}

impl SamplingRule {
    pub fn production() -> Self {
        Self {
            floor: data::PAPER_FLOOR,
            coef: data::PAPER_COEF,
        }
    }

    pub fn samples_for(&self, n_silo: usize) -> usize {
        data::round_sample_size(n_silo, self.floor, self.coef)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SecureAggConfig {
    pub enabled: bool,
    pub frac_bits: u32,
    pub modulus_bits: u32,
}

impl Default for SecureAggConfig {
    fn default() -> Self {
        let fp = FixedPointParams::default();
        Self {
            enabled: false,
            frac_bits: fp.frac_bits,
            modulus_bits: fp.modulus_bits,
        }
    }
}

impl SecureAggConfig {
    pub fn fixed_point(&self) -> FixedPointParams {
        FixedPointParams {
            frac_bits: self.frac_bits,
            modulus_bits: self.modulus_bits,
        }
    }
}

/// Settings of the pooled-data baseline (and of the per-silo baselines,
/// which reuse them on a single silo).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CentralConfig {
    /// Fraction of the pooled training sequences consumed, each at most once.
    pub data_fraction: f64,
    /// Sequences consumed; overrides `data_fraction` and may exceed the pool,
    /// in which case it is reshuffled for each further pass.
    pub sample_budget: Option<usize>,
    pub optimizer: ServerOptConfig,
    pub batch_size: usize,
    pub eval_every_batches: usize,
    pub eval_samples: usize,
}

impl Default for CentralConfig {
    fn default() -> Self {
        Self {
            data_fraction: 0.104,
            sample_budget: None,
            optimizer: ServerOptConfig {
                learning_rate: 0.05,
                ..ServerOptConfig::default()
            },
            batch_size: 64,
            eval_every_batches: 64,
            eval_samples: 512,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PersonalizationConfig {
    /// Round of the global checkpoint local training starts from. Defaults to
    /// 60% of `max_iterations`.
    pub start_round: Option<usize>,
    /// Defaults to the rounds remaining after `start_round`.
    pub local_rounds: Option<usize>,
    /// Defaults to the federated client settings.
    pub client: Option<ClientOptConfig>,
    pub alpha_grid: Vec<f64>,
    /// Share of each silo's test split held out for choosing alpha.
    pub validation_fraction: f64,
}

impl Default for PersonalizationConfig {
    fn default() -> Self {
        Self {
            start_round: None,
            local_rounds: None,
            client: None,
            alpha_grid: (0..=10).map(|k| k as f64 / 10.0).collect(),
            validation_fraction: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub max_iterations: usize,
    pub master_seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub silos: Vec<SiloSpec>,
    pub client: ClientOptConfig,
    pub server: ServerOptConfig,
    pub weighting: WeightingScheme,
    pub sampling: SamplingRule,
    pub eval_every: usize,
    pub eval_fraction: f64,
    pub checkpoint_every: usize,
    pub secure_agg: SecureAggConfig,
    pub central: CentralConfig,
    pub personalization: PersonalizationConfig,
    pub output: OutputConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            master_seed: 7,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            silos: default_silos(),
            client: ClientOptConfig::default(),
            server: ServerOptConfig::default(),
            weighting: WeightingScheme::default(),
            sampling: SamplingRule::default(),
            eval_every: 5,
            eval_fraction: 0.1,
            checkpoint_every: 10,
            secure_agg: SecureAggConfig::default(),
            central: CentralConfig::default(),
            personalization: PersonalizationConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Nine silos, one language each, with the default size skew.
pub fn default_silos() -> Vec<SiloSpec> {
    DEFAULT_SILO_SIZES
        .iter()
        .enumerate()
        .map(|(i, &n)| SiloSpec {
            silo_id: i as u32,
            language_id: i as u32,
            n_train: n,
            n_test: None,
            max_batches: None,
            train_path: None,
            test_path: None,
        })
        .collect()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn shape(&self) -> ModelShape {
        self.model.shape()
    }

    pub fn layout(&self) -> VocabLayout {
        let n_languages = self
            .silos
            .iter()
            .map(|s| s.language_id + 1)
            .max()
            .unwrap_or(1) as usize;
        VocabLayout {
            vocab_size: self.model.vocab_size,
            shared_vocab: self.data.shared_vocab,
            n_languages,
        }
    }

    pub fn personalization_start(&self) -> usize {
        self.personalization
            .start_round
            .unwrap_or((self.max_iterations as f64 * 0.6).round() as usize)
    }

    pub fn personalization_rounds(&self) -> usize {
        self.personalization.local_rounds.unwrap_or(
            self.max_iterations
                .saturating_sub(self.personalization_start()),
        )
    }

    pub fn personalization_client(&self) -> ClientOptConfig {
        self.personalization.client.unwrap_or(self.client)
    }

    /// Client settings for one silo, with its batch throttle applied.
    pub fn client_for(&self, silo_id: u32) -> ClientOptConfig {
        let mut c = self.client;
        if let Some(spec) = self.silos.iter().find(|s| s.silo_id == silo_id) {
            if let Some(m) = spec.max_batches {
                c.max_local_batches = m;
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.shape().validate()?;
        if !(self.model.init_std.is_finite() && self.model.init_std >= 0.0) {
            return bad(format!(
                "model.init_std must be finite and >= 0, got {}",
                self.model.init_std
            ));
        }
        if self.silos.is_empty() {
            return bad("at least one silo is required".into());
        }
        let mut ids = HashSet::new();
        for s in &self.silos {
            if !ids.insert(s.silo_id) {
                return bad(format!("duplicate silo_id {}", s.silo_id));
            }
            if s.n_train == 0 && s.train_path.is_none() {
                return bad(format!("silo {} has n_train = 0", s.silo_id));
            }
        }
        if self.silos.iter().any(|s| s.train_path.is_none()) {
            self.layout().validate()?;
        }
        if self.data.seq_len < 2 {
            return bad("data.seq_len must be at least 2".into());
        }
        if !(self.data.mask_prob > 0.0 && self.data.mask_prob < 1.0) {
            return bad(format!(
                "data.mask_prob must lie in (0, 1), got {}",
                self.data.mask_prob
            ));
        }
        if !(0.0..=1.0).contains(&self.data.shared_core_fraction) {
            return bad("data.shared_core_fraction must lie in [0, 1]".into());
        }
        if !(self.data.zipf_exponent.is_finite() && self.data.zipf_exponent > 0.0) {
            return bad("data.zipf_exponent must be positive".into());
        }
        for c in [&self.client, &self.personalization_client()] {
            if c.batch_size == 0 || !(c.learning_rate.is_finite() && c.learning_rate >= 0.0) {
                return bad(
                    "client settings need batch_size >= 1 and a finite learning_rate >= 0".into(),
                );
            }
        }
        for (name, o) in [
            ("server", &self.server),
            ("central.optimizer", &self.central.optimizer),
        ] {
            if !(o.learning_rate.is_finite() && o.learning_rate >= 0.0) {
                return bad(format!("{name}.learning_rate must be finite and >= 0"));
            }
            if !(0.0..1.0).contains(&o.momentum)
                || !(0.0..1.0).contains(&o.beta1)
                || !(0.0..1.0).contains(&o.beta2)
                || !(o.epsilon.is_finite() && o.epsilon > 0.0)
            {
                return bad(format!(
                    "{name} momentum/beta must lie in [0, 1) and epsilon must be positive"
                ));
            }
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 {
            return bad("eval_every and checkpoint_every must be at least 1".into());
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad(format!(
                "eval_fraction must lie in (0, 1], got {}",
                self.eval_fraction
            ));
        }
        self.secure_agg.fixed_point().validate()?;
        let c = &self.central;
        if !(c.data_fraction > 0.0 && c.data_fraction.is_finite())
            || c.sample_budget == Some(0)
            || c.batch_size == 0
            || c.eval_every_batches == 0
            || c.eval_samples == 0
        {
            return bad("central settings out of range".into());
        }
        if self.personalization_start() > self.max_iterations {
            return bad(format!(
                "personalization.start_round {} exceeds max_iterations {}",
                self.personalization_start(),
                self.max_iterations
            ));
        }
        let grid = &self.personalization.alpha_grid;
        if grid.first() != Some(&0.0)
            || grid.last() != Some(&1.0)
            || grid
                .windows(2)
                .any(|w| w[0].partial_cmp(&w[1]) != Some(std::cmp::Ordering::Less))
        {
            return bad(
                "personalization.alpha_grid must be strictly increasing from 0 to 1".into(),
            );
        }
        let vf = self.personalization.validation_fraction;
        if !(vf > 0.0 && vf < 1.0) {
            return bad("personalization.validation_fraction must lie in (0, 1)".into());
        }
        Ok(())
    }

    /// Builds every silo's corpus, reading files where paths are given and
    /// generating deterministically from `data.seed` otherwise.
    pub fn load_silos(&self) -> Result<Vec<SiloDataset>> {
        let layout = self.layout();
        let mut out = Vec::with_capacity(self.silos.len());
        for spec in &self.silos {
            let silo = match (&spec.train_path, &spec.test_path) {
                (Some(train), test) => {
                    let train = data::read_corpus(train)?;
                    let test = match test {
                        Some(p) => data::read_corpus(p)?,
                        None => Vec::new(),
                    };
                    SiloDataset {
                        silo_id: spec.silo_id,
                        language: None,
                        train,
                        test,
                    }
                }
                (None, Some(_)) => {
                    return Err(Error::Config(format!(
                        "silo {} gives test_path without train_path",
                        spec.silo_id
                    )))
                }
                (None, None) => {
                    let profile = layout.profile(
                        spec.language_id,
                        self.data.zipf_exponent,
                        self.data.shared_core_fraction,
                        seed::derive(self.data.seed, &[u64::from(spec.language_id)]),
                    );
                    data::generate_silo(
                        spec.silo_id,
                        &profile,
                        spec.n_train,
                        spec.test_size(),
                        self.data.seq_len,
                        seed::derive(self.data.seed, &[seed::tag::DATA, u64::from(spec.silo_id)]),
                    )?
                }
            };
            if silo.train.is_empty() {
                return Err(Error::EmptySilo(spec.silo_id));
            }
            let v = self.model.vocab_size as u32;
            let seqs = silo.train.iter().chain(&silo.test);
            if let Some(bad) = seqs.clone().find(|s| s.len() < 2) {
                return Err(Error::Config(format!(
                    "silo {} holds a sequence of length {}",
                    spec.silo_id,
                    bad.len()
                )));
            }
            if let Some(t) = seqs.flatten().find(|&&t| t >= v) {
                return Err(Error::Config(format!(
                    "silo {} holds token {t} outside the vocabulary of {v}",
                    spec.silo_id
                )));
            }
            out.push(silo);
        }
        Ok(out)
    }
}
