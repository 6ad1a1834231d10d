//! Operations behind the `fedsilo` binary.
//!
//! Every command is deterministic given its config and seed. Outputs are
//! staged in temporary files next to their destination and only moved into
//! place once the whole command has succeeded, so a failing command leaves
//! nothing behind.

use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::config::RunConfig;
use crate::data::{self, SiloDataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::fedopt::{self, CentralOutcome, FlOutcome};
use crate::param::ParamVector;
use crate::personalize::{self, InterpolationResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

/// Files written together: all land, or none do.
#[derive(Default)]
struct Staged {
    files: Vec<(NamedTempFile, PathBuf)>,
}

impl Staged {
    fn add(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        use std::io::Write;
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
            _ => PathBuf::from("."),
        };
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut tmp = NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
        tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
        self.files.push((tmp, path.to_path_buf()));
        Ok(())
    }

    fn commit(self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::with_capacity(self.files.len());
        for (tmp, path) in self.files {
            tmp.persist(&path).map_err(|e| Error::io(&path, e.error))?;
            out.push(path);
        }
        Ok(out)
    }
}

pub fn load_config(path: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.master_seed = s;
    }
    Ok(cfg)
}

pub fn checkpoint_dir(cfg: &RunConfig) -> PathBuf {
    cfg.output
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("checkpoints"))
}

pub fn checkpoint_path(dir: &Path, round: usize) -> PathBuf {
    dir.join(format!("round_{round:05}.pv"))
}

/// Writes every silo's generated corpus as `silo<id>_{train,test}.tok`.
pub fn gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg
        .data
        .corpus_dir
        .clone()
        .unwrap_or_else(|| PathBuf::from("corpus"));
    let silos = cfg.load_silos()?;
    let mut staged = Staged::default();
    for s in &silos {
        for (split, seqs) in [("train", &s.train), ("test", &s.test)] {
            let mut buf = Vec::new();
            data::write_corpus(&mut buf, seqs).expect("write to Vec cannot fail");
            staged.add(&dir.join(data::corpus_file_name(s.silo_id, split)), &buf)?;
        }
    }
    staged.commit()
}

/// Federated training; writes the log to `out` and checkpoints to the
/// configured checkpoint directory.
pub fn train_fl(cfg: &RunConfig, out: &Path) -> Result<FlOutcome> {
    let silos = cfg.load_silos()?;
    let outcome = fedopt::run_fl(cfg, &silos)?;
    let mut staged = Staged::default();
    staged.add(out, outcome.log.to_csv().as_bytes())?;
    let dir = checkpoint_dir(cfg);
    for (round, params) in &outcome.checkpoints {
        staged.add(&checkpoint_path(&dir, *round), &params.to_bytes())?;
    }
    staged.commit()?;
    Ok(outcome)
}

pub fn train_central(cfg: &RunConfig, out: &Path) -> Result<CentralOutcome> {
    let silos = cfg.load_silos()?;
    let outcome = fedopt::run_central(cfg, &silos)?;
    let mut staged = Staged::default();
    staged.add(out, outcome.log.to_csv().as_bytes())?;
    staged.commit()?;
    Ok(outcome)
}

pub fn train_silo(cfg: &RunConfig, silo_id: u32, out: &Path) -> Result<CentralOutcome> {
    let silos = cfg.load_silos()?;
    let outcome = fedopt::run_per_silo(cfg, &silos, silo_id)?;
    let mut staged = Staged::default();
    staged.add(out, outcome.log.to_csv().as_bytes())?;
    staged.commit()?;
    Ok(outcome)
}

/// Personalises every silo from the checkpoint at `ckpt_round` (default: the
/// configured start round) and interpolates against the final checkpoint.
pub fn personalize(
    cfg: &RunConfig,
    ckpt_round: Option<usize>,
    out: &Path,
) -> Result<Vec<InterpolationResult>> {
    let dir = checkpoint_dir(cfg);
    let start = ckpt_round.unwrap_or_else(|| cfg.personalization_start());
    let start_ckpt = ParamVector::load(&checkpoint_path(&dir, start))?;
    let global = ParamVector::load(&checkpoint_path(&dir, cfg.max_iterations))?;
    let silos = cfg.load_silos()?;
    let results = personalize::evaluate_personalization(cfg, &silos, &start_ckpt, &global)?;
    let mut staged = Staged::default();
    staged.add(out, personalize::report_csv(&results).as_bytes())?;
    staged.commit()?;
    Ok(results)
}

/// Per-silo perplexity table (`silo_id,perplexity`, last row `all`).
pub fn evaluate(cfg: &RunConfig, ckpt: &Path, split: Split) -> Result<String> {
    let params = ParamVector::load(ckpt)?;
    let silos = cfg.load_silos()?;
    let report = evaluate_params(cfg, &silos, &params, split)?;
    let mut out = String::from("silo_id,perplexity\n");
    for (id, ppl) in &report.per_silo {
        out.push_str(&format!("{id},{ppl}\n"));
    }
    out.push_str(&format!("all,{}\n", report.pooled));
    Ok(out)
}

pub fn evaluate_params(
    cfg: &RunConfig,
    silos: &[SiloDataset],
    params: &ParamVector,
    split: Split,
) -> Result<eval::EvalReport> {
    let shape = cfg.shape();
    let sets = match split {
        Split::Test => fedopt::final_eval_sets(cfg, silos)?,
        Split::Train => {
            let as_test: Vec<SiloDataset> = silos
                .iter()
                .map(|s| SiloDataset {
                    test: s.train.clone(),
                    train: Vec::new(),
                    ..s.clone()
                })
                .collect();
            eval::full_test_sets(&as_test, &shape, cfg.data.mask_prob, cfg.data.seed ^ 1)?
        }
    };
    eval::evaluate(params, &shape, &sets)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_parsing() {
        assert_eq!("test".parse::<Split>().unwrap(), Split::Test);
        assert_eq!("train".parse::<Split>().unwrap(), Split::Train);
        assert!("dev".parse::<Split>().is_err());
    }

    #[test]
    fn staged_files_land_together() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        let b = dir.path().join("sub/b.txt");
        let mut s = Staged::default();
        s.add(&a, b"1").unwrap();
        s.add(&b, b"2").unwrap();
        assert!(!a.exists());
        s.commit().unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), b"1");
        assert_eq!(std::fs::read(&b).unwrap(), b"2");
    }

    #[test]
    fn dropped_stage_leaves_nothing() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut s = Staged::default();
            s.add(&dir.path().join("x"), b"1").unwrap();
        }
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
