//! Online baseline predictors simulated over traces, and H2P screening.

mod perceptron;
mod screen;
mod tage;

pub use perceptron::{PerceptronConfig, PerceptronPredictor};
pub use screen::{screen_h2ps, H2pScreenConfig};
pub use tage::{Provider, TageLite, TageLiteConfig, TagePrediction};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::Trace;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BaselineError {
    #[error("update for ip {got:#x} without a matching predict (pending: {pending:?})")]
    UnmatchedUpdate { got: u64, pending: Option<u64> },
    #[error("invalid predictor config: {0}")]
    Config(String),
    #[error("trace has no instruction_count; cannot scale the misprediction floor")]
    MissingInstructionCount,
}

/// A direction predictor driven one branch at a time: `predict` then
/// `update` with the resolved direction.
pub trait BranchPredictor: Send {
    fn predict(&mut self, ip: u64) -> bool;
    fn update(&mut self, ip: u64, taken: bool) -> Result<(), BaselineError>;
    fn name(&self) -> &'static str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaselineConfig {
    Tage(TageLiteConfig),
    Perceptron(PerceptronConfig),
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig::Tage(TageLiteConfig::default())
    }
}

impl BaselineConfig {
    pub fn build(&self) -> Result<Box<dyn BranchPredictor>, BaselineError> {
        Ok(match self {
            BaselineConfig::Tage(c) => Box::new(TageLite::new(c.clone())?),
            BaselineConfig::Perceptron(c) => Box::new(PerceptronPredictor::new(c.clone())?),
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchStats {
    pub predictions: u64,
    pub mispredictions: u64,
}

impl BranchStats {
    pub fn accuracy(&self) -> f64 {
        if self.predictions == 0 {
            return 0.0;
        }
        1.0 - self.mispredictions as f64 / self.predictions as f64
    }

    pub fn record(&mut self, correct: bool) {
        self.predictions += 1;
        self.mispredictions += u64::from(!correct);
    }
}

/// Per-static-branch statistics keyed by ip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimStats {
    pub per_ip: BTreeMap<u64, BranchStats>,
}

impl SimStats {
    pub fn get(&self, ip: u64) -> BranchStats {
        self.per_ip.get(&ip).copied().unwrap_or_default()
    }

    pub fn total_predictions(&self) -> u64 {
        self.per_ip.values().map(|s| s.predictions).sum()
    }

    pub fn total_mispredictions(&self) -> u64 {
        self.per_ip.values().map(|s| s.mispredictions).sum()
    }

    /// `ip,predictions,mispredictions,accuracy` with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ip,predictions,mispredictions,accuracy\n");
        for (ip, s) in &self.per_ip {
            let _ = writeln!(
                out,
                "{ip:#x},{},{},{}",
                s.predictions,
                s.mispredictions,
                s.accuracy()
            );
        }
        out
    }
}

/// One predict + update per record, in trace order.
pub fn simulate_baseline(
    trace: &Trace,
    predictor: &mut dyn BranchPredictor,
) -> Result<SimStats, BaselineError> {
    let mut stats = SimStats::default();
    for r in &trace.records {
        let guess = predictor.predict(r.ip);
        predictor.update(r.ip, r.taken)?;
        stats
            .per_ip
            .entry(r.ip)
            .or_default()
            .record(guess == r.taken);
    }
    Ok(stats)
}

/// Saturating counter helpers shared by the predictors.
#[inline]
pub(crate) fn sat_inc(v: u8, max: u8) -> u8 {
    if v < max {
        v + 1
    } else {
        v
    }
}

#[inline]
pub(crate) fn sat_dec(v: u8) -> u8 {
    v.saturating_sub(1)
}
