//! End-to-end experiments: workloads → baseline → screening → helper
//! training → held-out evaluation, plus cross-workload folds and reports.

mod report;
mod run;

pub use report::{
    emit_report, format_summary, report_from_json, report_to_json, rows_to_csv, EvalReport,
    FoldRow, H2pSummary, LatencyReference, ModeSummary, MpkiRow, ReportFormat, SkipEntry,
    WorkloadInfo,
};
pub use run::{
    eligible_h2ps, prepare_workloads, run_crossval, run_fold, simulate_with_helpers, train_helper,
    FoldResult, HelperModel, TrainedHelper, Workload,
};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{BaselineConfig, BaselineError, H2pScreenConfig, SimStats};
use crate::cnn::{CnnError, Mode, ModelIoError, TrainConfig};
use crate::deploy::DeployError;
use crate::encoder::{EncoderConfig, EncoderError};
use crate::trace::{SynthConfig, TraceError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("config parse error: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Cnn(#[from] CnnError),
    #[error(transparent)]
    Model(#[from] ModelIoError),
    #[error(transparent)]
    Deploy(#[from] DeployError),
    #[error("report parse error: {0}")]
    Report(#[from] serde_json::Error),
    #[error("trace has no instruction_count")]
    MissingInstructionCount,
    #[error("instruction_count must be positive")]
    ZeroInstructions,
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Source of one workload's trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    /// Trace file, binary or text.
    Trace { path: PathBuf },
    /// Synthetic Listing-1 workload.
    Synth(SynthConfig),
    /// Synthetic workload whose correlated branch spreads over
    /// `position_spread` history positions.
    Varposition {
        position_spread: u32,
        synth: SynthConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub workloads: Vec<WorkloadSpec>,
    pub baseline: BaselineConfig,
    pub screen: H2pScreenConfig,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub modes: Vec<Mode>,
    /// Helpers are trained only for H2Ps screened in at least this many
    /// workloads.
    pub min_workloads_per_h2p: usize,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            workloads: Vec::new(),
            baseline: BaselineConfig::default(),
            screen: H2pScreenConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            modes: vec![Mode::Fp, Mode::Tp],
            min_workloads_per_h2p: 3,
            output_dir: PathBuf::from("out"),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate_fields()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text)?;
        // relative trace paths are resolved against the config file
        if let Some(dir) = path.parent() {
            for w in &mut cfg.workloads {
                if let WorkloadSpec::Trace { path } = w {
                    if path.is_relative() {
                        *path = dir.join(&*path);
                    }
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Checks that hold for every subcommand.
    pub fn validate_fields(&self) -> Result<(), HarnessError> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.screen.validate()?;
        if self.modes.is_empty() {
            return Err(HarnessError::Config("modes must not be empty".into()));
        }
        let mut modes = self.modes.clone();
        modes.sort();
        modes.dedup();
        if modes.len() != self.modes.len() {
            return Err(HarnessError::Config("modes must not repeat".into()));
        }
        Ok(())
    }

    /// Additional checks for cross-validation.
    pub fn validate(&self) -> Result<(), HarnessError> {
        self.validate_fields()?;
        if self.workloads.len() < 2 {
            return Err(HarnessError::Config(format!(
                "cross-validation needs at least 2 workloads, got {}",
                self.workloads.len()
            )));
        }
        if self.min_workloads_per_h2p < 2 {
            return Err(HarnessError::Config(
                "min_workloads_per_h2p must be at least 2".into(),
            ));
        }
        Ok(())
    }
}

/// Mispredictions per thousand instructions over all branches.
pub fn compute_mpki(stats: &SimStats, instruction_count: Option<u64>) -> Result<f64, HarnessError> {
    let n = instruction_count.ok_or(HarnessError::MissingInstructionCount)?;
    if n == 0 {
        return Err(HarnessError::ZeroInstructions);
    }
    Ok(stats.total_mispredictions() as f64 * 1000.0 / n as f64)
}
