use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::run::FoldResult;
use super::{ExperimentConfig, HarnessError};
use crate::cnn::Mode;
use crate::deploy::storage_bytes;

pub const REPORT_FORMAT: &str = "h2p-report";
pub const REPORT_VERSION: u32 = 1;

/// One (fold, H2P, mode) evaluation, averaged over held-out workloads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FoldRow {
    pub fold: usize,
    pub train_workload: String,
    pub h2p: u64,
    pub mode: Mode,
    pub heldout_evaluated: usize,
    pub baseline_mispredictions: u64,
    pub helper_mispredictions: u64,
    pub train_accuracy: f64,
    /// Mean over held-out workloads of `(base - helper) / base`.
    pub mean_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipEntry {
    pub fold: usize,
    pub h2p: u64,
    pub mode: Mode,
    pub workload: String,
    pub reason: String,
}

/// Whole-trace misprediction totals of one held-out run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MpkiRow {
    pub fold: usize,
    pub mode: Mode,
    pub workload: String,
    pub instructions: u64,
    pub baseline_mispredictions: u64,
    pub helper_mispredictions: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadInfo {
    pub name: String,
    pub records: u64,
    pub instruction_count: Option<u64>,
    pub h2ps: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct H2pSummary {
    pub h2p: u64,
    pub mode: Mode,
    pub folds_evaluated: usize,
    /// Mean of the per-fold reductions.
    pub mean_reduction: f64,
    pub winner: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeSummary {
    pub mode: Mode,
    pub h2ps_evaluated: usize,
    pub winners: usize,
    pub pct_winners: f64,
    /// Mean reduction (percent) over winning H2Ps only.
    pub mean_reduction_winners_pct: Option<f64>,
    /// Mean reduction (percent) over every evaluated H2P.
    pub mean_reduction_all_pct: Option<f64>,
    pub mpki_baseline: Option<f64>,
    pub mpki_with_helpers: Option<f64>,
    /// Deployed size of one helper; full-precision helpers have none.
    pub storage_bytes_per_helper: Option<u64>,
}

/// Published circuit-depth figures, carried as constants.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyReference {
    pub source: String,
    pub cnn_helper_serial_computations: u32,
    pub tage_sc_l_8kb_serial_computations: u32,
    pub tage_sc_l_64kb_serial_computations: u32,
    pub tage_sc_l_serial_table_lookups: u32,
    pub cnn_helper_serial_table_lookups: u32,
    pub popcount_stages: [u32; 2],
}

impl Default for LatencyReference {
    fn default() -> Self {
        Self {
            source: "published-reference".into(),
            cnn_helper_serial_computations: 6,
            tage_sc_l_8kb_serial_computations: 34,
            tage_sc_l_64kb_serial_computations: 32,
            tage_sc_l_serial_table_lookups: 2,
            cnn_helper_serial_table_lookups: 0,
            popcount_stages: [13, 15],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub modes: Vec<Mode>,
    pub min_workloads_per_h2p: usize,
    pub workloads: Vec<WorkloadInfo>,
    pub eligible_h2ps: Vec<u64>,
    pub folds: usize,
    pub rows: Vec<FoldRow>,
    pub skipped: Vec<SkipEntry>,
    pub mpki: Vec<MpkiRow>,
    pub per_h2p: Vec<H2pSummary>,
    pub summary: Vec<ModeSummary>,
    pub latency_reference: LatencyReference,
}

impl EvalReport {
    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

pub(crate) fn build_report(
    cfg: &ExperimentConfig,
    workloads: Vec<WorkloadInfo>,
    eligible_h2ps: Vec<u64>,
    folds: Vec<FoldResult>,
) -> EvalReport {
    let n_folds = folds.len();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut mpki = Vec::new();
    for f in folds {
        rows.extend(f.rows);
        skipped.extend(f.skipped);
        mpki.extend(f.mpki);
    }
    let (per_h2p, summary) = aggregate(cfg, &rows, &mpki);
    EvalReport {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        seed: cfg.seed,
        modes: cfg.modes.clone(),
        min_workloads_per_h2p: cfg.min_workloads_per_h2p,
        workloads,
        eligible_h2ps,
        folds: n_folds,
        rows,
        skipped,
        mpki,
        per_h2p,
        summary,
        latency_reference: LatencyReference::default(),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn aggregate(
    cfg: &ExperimentConfig,
    rows: &[FoldRow],
    mpki: &[MpkiRow],
) -> (Vec<H2pSummary>, Vec<ModeSummary>) {
    let mut by_key: BTreeMap<(Mode, u64), Vec<f64>> = BTreeMap::new();
    for r in rows {
        by_key
            .entry((r.mode, r.h2p))
            .or_default()
            .push(r.mean_reduction);
    }
    let per_h2p: Vec<H2pSummary> = by_key
        .iter()
        .map(|(&(mode, h2p), v)| {
            let m = mean(v);
            H2pSummary {
                h2p,
                mode,
                folds_evaluated: v.len(),
                mean_reduction: m,
                winner: m > 0.0,
            }
        })
        .collect();
    let summary = cfg
        .modes
        .iter()
        .map(|&mode| {
            let all: Vec<f64> = per_h2p
                .iter()
                .filter(|s| s.mode == mode)
                .map(|s| s.mean_reduction)
                .collect();
            let wins: Vec<f64> = all.iter().copied().filter(|&r| r > 0.0).collect();
            let runs: Vec<&MpkiRow> = mpki.iter().filter(|r| r.mode == mode).collect();
            let instructions: u64 = runs.iter().map(|r| r.instructions).sum();
            let mpki_of = |f: &dyn Fn(&MpkiRow) -> u64| {
                (instructions > 0).then(|| {
                    runs.iter().map(|r| f(r)).sum::<u64>() as f64 * 1000.0 / instructions as f64
                })
            };
            ModeSummary {
                mode,
                h2ps_evaluated: all.len(),
                winners: wins.len(),
                pct_winners: if all.is_empty() {
                    0.0
                } else {
                    100.0 * wins.len() as f64 / all.len() as f64
                },
                mean_reduction_winners_pct: (!wins.is_empty()).then(|| 100.0 * mean(&wins)),
                mean_reduction_all_pct: (!all.is_empty()).then(|| 100.0 * mean(&all)),
                mpki_baseline: mpki_of(&|r| r.baseline_mispredictions),
                mpki_with_helpers: mpki_of(&|r| r.helper_mispredictions),
                storage_bytes_per_helper: match mode {
                    Mode::Fp => None,
                    Mode::Tp => {
                        storage_bytes(cfg.encoder.p, cfg.train.filters, cfg.encoder.history_len)
                            .ok()
                    }
                },
            }
        })
        .collect();
    (per_h2p, summary)
}

pub fn report_to_json(report: &EvalReport) -> String {
    serde_json::to_string_pretty(report).expect("report serializes")
}

pub fn report_from_json(text: &str) -> Result<EvalReport, HarnessError> {
    let r: EvalReport = serde_json::from_str(text)?;
    if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
        return Err(HarnessError::Config(format!(
            "unsupported report {:?} version {}",
            r.format, r.version
        )));
    }
    Ok(r)
}

/// Per-fold CSV, one row per evaluated (fold, H2P, mode).
pub fn rows_to_csv(rows: &[FoldRow]) -> String {
    let mut out = String::from(
        "fold,train_workload,h2p,mode,heldout_evaluated,baseline_mispredictions,helper_mispredictions,train_accuracy,mean_reduction\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:#x},{},{},{},{},{},{}",
            r.fold,
            r.train_workload,
            r.h2p,
            mode_key(r.mode),
            r.heldout_evaluated,
            r.baseline_mispredictions,
            r.helper_mispredictions,
            r.train_accuracy,
            r.mean_reduction
        );
    }
    out
}

fn skipped_to_csv(skipped: &[SkipEntry]) -> String {
    let mut out = String::from("fold,h2p,mode,workload,reason\n");
    for s in skipped {
        let _ = writeln!(
            out,
            "{},{:#x},{},{},{}",
            s.fold,
            s.h2p,
            mode_key(s.mode),
            s.workload,
            s.reason
        );
    }
    out
}

fn mpki_to_csv(rows: &[MpkiRow]) -> String {
    let mut out = String::from(
        "fold,mode,workload,instructions,baseline_mispredictions,helper_mispredictions\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.fold,
            mode_key(r.mode),
            r.workload,
            r.instructions,
            r.baseline_mispredictions,
            r.helper_mispredictions
        );
    }
    out
}

fn mode_key(mode: Mode) -> &'static str {
    match mode {
        Mode::Fp => "fp",
        Mode::Tp => "tp",
    }
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.digits$}"))
}

/// Human-readable per-mode table.
pub fn format_summary(report: &EvalReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{} folds, {} eligible H2Ps, {} evaluated rows, {} skipped",
        report.folds,
        report.eligible_h2ps.len(),
        report.rows.len(),
        report.skipped.len()
    );
    let _ = writeln!(
        out,
        "{:<5} {:>5} {:>10} {:>22} {:>18} {:>10} {:>10} {:>14}",
        "mode",
        "H2Ps",
        "% Winners",
        "Red. per winning H2P",
        "Red. per H2P (all)",
        "MPKI base",
        "MPKI help",
        "bytes/helper"
    );
    for s in &report.summary {
        let _ = writeln!(
            out,
            "{:<5} {:>5} {:>10.1} {:>22} {:>18} {:>10} {:>10} {:>14}",
            s.mode.label(),
            s.h2ps_evaluated,
            s.pct_winners,
            opt(s.mean_reduction_winners_pct, 1),
            opt(s.mean_reduction_all_pct, 1),
            opt(s.mpki_baseline, 3),
            opt(s.mpki_with_helpers, 3),
            s.storage_bytes_per_helper
                .map_or_else(|| "-".into(), |b| b.to_string())
        );
    }
    let l = &report.latency_reference;
    let _ = writeln!(
        out,
        "serial computations ({}): CNN helper {}, TAGE-SC-L 8KB {}, 64KB {}; popcount stages {}/{}",
        l.source,
        l.cnn_helper_serial_computations,
        l.tage_sc_l_8kb_serial_computations,
        l.tage_sc_l_64kb_serial_computations,
        l.popcount_stages[0],
        l.popcount_stages[1]
    );
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    /// `report.json`
    Json,
    /// `folds.csv`, `skipped.csv`, `mpki.csv`
    Csv,
    /// `summary.txt`
    Summary,
}

/// Writes the requested formats into `dir`, returning the written paths.
pub fn emit_report(
    report: &EvalReport,
    dir: &Path,
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>, HarnessError> {
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), HarnessError> {
        let path = dir.join(name);
        fs::write(&path, body).map_err(|e| HarnessError::io(&path, e))?;
        written.push(path);
        Ok(())
    };
    for f in formats {
        match f {
            ReportFormat::Json => put("report.json", report_to_json(report))?,
            ReportFormat::Csv => {
                put("folds.csv", rows_to_csv(&report.rows))?;
                put("skipped.csv", skipped_to_csv(&report.skipped))?;
                put("mpki.csv", mpki_to_csv(&report.mpki))?;
            }
            ReportFormat::Summary => put("summary.txt", format_summary(report))?,
        }
    }
    Ok(written)
}
