//! CSV training logs.
//!
//! A log starts with `#`-prefixed provenance lines holding the seed and the
//! fully resolved config, followed by the table
//! `round,phase,silo_id,metric,value,seed`.

use std::fmt::{self, Write as _};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    /// Periodic validation on a random slice of the test splits.
    Eval5,
    FinalEval,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Train => "train",
            Phase::Eval5 => "eval5",
            Phase::FinalEval => "final_eval",
        })
    }
}

/// A single silo, or every silo at once.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiloRef {
    Silo(u32),
    All,
}

impl fmt::Display for SiloRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SiloRef::Silo(id) => write!(f, "{id}"),
            SiloRef::All => f.write_str("all"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub round: usize,
    pub phase: Phase,
    pub silo: SiloRef,
    pub metric: &'static str,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingLog {
    pub seed: u64,
    pub config_json: String,
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub fn new(seed: u64, config_json: String) -> Self {
        Self {
            seed,
            config_json,
            rows: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        round: usize,
        phase: Phase,
        silo: SiloRef,
        metric: &'static str,
        value: f64,
    ) {
        self.rows.push(LogRow {
            round,
            phase,
            silo,
            metric,
            value,
        });
    }

    pub fn rows_where<'a>(
        &'a self,
        phase: Phase,
        metric: &'a str,
    ) -> impl Iterator<Item = &'a LogRow> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.phase == phase && r.metric == metric)
    }

    /// The last logged value of `metric` for `silo` in `phase`.
    pub fn last(&self, phase: Phase, silo: SiloRef, metric: &str) -> Option<f64> {
        self.rows_where(phase, metric)
            .filter(|r| r.silo == silo)
            .last()
            .map(|r| r.value)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        writeln!(out, "# seed: {}", self.seed).unwrap();
        writeln!(out, "# config: {}", self.config_json).unwrap();
        out.push_str("round,phase,silo_id,metric,value,seed\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.round, r.phase, r.silo, r.metric, r.value, self.seed
            )
            .unwrap();
        }
        out
    }
}
