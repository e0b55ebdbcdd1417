use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;

use super::report::{build_report, FoldRow, MpkiRow, SkipEntry, WorkloadInfo};
use super::{EvalReport, ExperimentConfig, HarnessError, WorkloadSpec};
use crate::baseline::{screen_h2ps, simulate_baseline, BaselineConfig, SimStats};
use crate::cnn::{
    evaluate, forward_fp, init_params, train, CnnParams, Mode, TernaryCnnParams, TrainConfig,
};
use crate::deploy::{DeployedHelper, FifoBuffer};
use crate::encoder::{collect_training_set, EncoderConfig, HistoryWindow};
use crate::trace::{generate_listing1_trace, generate_varposition_trace, read_trace, Trace};

/// A loaded workload with its baseline run and screened H2Ps.
#[derive(Debug, Clone)]
pub struct Workload {
    pub name: String,
    pub trace: Trace,
    pub baseline: SimStats,
    pub h2ps: Vec<u64>,
}

fn load_trace(spec: &WorkloadSpec, encoder: &EncoderConfig) -> Result<Trace, HarnessError> {
    Ok(match spec {
        WorkloadSpec::Trace { path } => read_trace(path)?,
        WorkloadSpec::Synth(s) => generate_listing1_trace(s)?,
        WorkloadSpec::Varposition {
            position_spread,
            synth,
        } => generate_varposition_trace(synth, *position_spread, encoder.history_len)?.trace,
    })
}

/// Loads, simulates and screens every workload of `cfg`.
pub fn prepare_workloads(cfg: &ExperimentConfig) -> Result<Vec<Workload>, HarnessError> {
    let loaded: Vec<Result<Workload, HarnessError>> = cfg
        .workloads
        .par_iter()
        .enumerate()
        .map(|(k, spec)| {
            let trace = load_trace(spec, &cfg.encoder)?;
            let mut predictor = cfg.baseline.build()?;
            let baseline = simulate_baseline(&trace, predictor.as_mut())?;
            let h2ps = screen_h2ps(&baseline, trace.meta.instruction_count, &cfg.screen)?;
            let id = &trace.meta.workload_id;
            let name = if id.is_empty() {
                format!("w{k}")
            } else {
                format!("w{k}:{id}")
            };
            Ok(Workload {
                name,
                trace,
                baseline,
                h2ps,
            })
        })
        .collect();
    loaded.into_iter().collect()
}

/// H2Ps screened in at least `min_workloads` workloads, in ip order.
pub fn eligible_h2ps(workloads: &[Workload], min_workloads: usize) -> Vec<u64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for w in workloads {
        for &ip in &w.h2ps {
            *counts.entry(ip).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .filter(|&(_, c)| c >= min_workloads)
        .map(|(ip, _)| ip)
        .collect()
}

/// A helper in the form it runs next to the baseline.
#[derive(Debug, Clone)]
pub enum HelperModel {
    Fp(CnnParams),
    Tp(DeployedHelper),
}

impl HelperModel {
    pub fn from_params(params: &CnnParams) -> Result<Self, HarnessError> {
        Ok(match params.mode {
            Mode::Fp => HelperModel::Fp(params.clone()),
            Mode::Tp => HelperModel::Tp(DeployedHelper::from_ternary(
                &TernaryCnnParams::from_params(params)?,
            )?),
        })
    }

    pub fn mode(&self) -> Mode {
        match self {
            HelperModel::Fp(_) => Mode::Fp,
            HelperModel::Tp(_) => Mode::Tp,
        }
    }

    pub fn p(&self) -> u8 {
        match self {
            HelperModel::Fp(p) => p.p,
            HelperModel::Tp(h) => h.p(),
        }
    }

    pub fn history_len(&self) -> usize {
        match self {
            HelperModel::Fp(p) => p.history_len,
            HelperModel::Tp(h) => h.history_len(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedHelper {
    pub ip: u64,
    pub params: CnnParams,
    pub model: HelperModel,
    pub train_accuracy: f64,
}

fn job_seed(base: u64, parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 31;
    }
    x
}

/// Trains one helper for `ip` on `trace`.
pub fn train_helper(
    trace: &Trace,
    ip: u64,
    mode: Mode,
    encoder: &EncoderConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainedHelper, HarnessError> {
    let data = collect_training_set(trace, ip, encoder, train_cfg.sample_budget, seed)?;
    let cfg = TrainConfig {
        mode,
        seed,
        ..train_cfg.clone()
    };
    let init = init_params(
        encoder.p,
        cfg.filters,
        encoder.history_len,
        mode,
        cfg.q,
        job_seed(seed, &[1]),
    );
    let outcome = train(init, &data, &cfg)?;
    let params = outcome.params;
    let train_accuracy = evaluate(&params, &data)?.accuracy;
    let model = HelperModel::from_params(&params)?;
    Ok(TrainedHelper {
        ip,
        params,
        model,
        train_accuracy,
    })
}

enum Installed<'a> {
    Fp(&'a CnnParams),
    Tp(&'a DeployedHelper, FifoBuffer),
}

impl Installed<'_> {
    fn is_fp(&self) -> bool {
        matches!(self, Installed::Fp(_))
    }
}

/// Replays `trace` through a fresh baseline with `helpers` installed: at a
/// helper's ip the helper's prediction replaces the baseline's, the baseline
/// still trains on every outcome, and every helper observes every branch.
pub fn simulate_with_helpers(
    trace: &Trace,
    baseline: &BaselineConfig,
    encoder: &EncoderConfig,
    helpers: &[(u64, &HelperModel)],
) -> Result<SimStats, HarnessError> {
    let mut installed: BTreeMap<u64, Installed> = BTreeMap::new();
    for &(ip, model) in helpers {
        if model.p() != encoder.p || model.history_len() != encoder.history_len {
            return Err(HarnessError::Config(format!(
                "helper for {ip:#x} does not match the encoder"
            )));
        }
        let entry = match model {
            HelperModel::Tp(d) => Installed::Tp(d, d.new_buffer()),
            HelperModel::Fp(p) => Installed::Fp(p),
        };
        if installed.insert(ip, entry).is_some() {
            return Err(HarnessError::Config(format!("two helpers for {ip:#x}")));
        }
    }
    let needs_window = installed.values().any(Installed::is_fp);
    let mut window = HistoryWindow::from_config(encoder);
    let mut predictor = baseline.build()?;
    let mut stats = SimStats::default();
    for r in &trace.records {
        let base = predictor.predict(r.ip);
        let guess = match installed.get(&r.ip) {
            None => base,
            Some(Installed::Fp(params)) => {
                forward_fp(params, window.slots().collect::<Vec<_>>().as_slice())?.taken
            }
            Some(Installed::Tp(helper, buffer)) => helper.predict(buffer)?.taken,
        };
        predictor.update(r.ip, r.taken)?;
        stats
            .per_ip
            .entry(r.ip)
            .or_default()
            .record(guess == r.taken);
        if needs_window {
            window.push(*r);
        }
        for h in installed.values_mut() {
            if let Installed::Tp(helper, buffer) = h {
                helper.update(buffer, r.ip, r.taken)?;
            }
        }
    }
    Ok(stats)
}

/// Results of training on one workload and evaluating on the others.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_workload: String,
    pub rows: Vec<FoldRow>,
    pub skipped: Vec<SkipEntry>,
    pub mpki: Vec<MpkiRow>,
}

/// Trains one helper per (H2P, mode) on `workloads[train_idx]` and evaluates
/// all helpers of a mode together on every held-out workload.
pub fn run_fold(
    cfg: &ExperimentConfig,
    workloads: &[Workload],
    fold: usize,
    train_idx: usize,
    heldout: &[usize],
    h2ps: &[u64],
) -> Result<FoldResult, HarnessError> {
    if heldout.contains(&train_idx) {
        return Err(HarnessError::Config(
            "training workload is also held out".into(),
        ));
    }
    let train_w = &workloads[train_idx];
    let screened: BTreeSet<u64> = train_w.h2ps.iter().copied().collect();
    let mut skipped = Vec::new();

    let jobs: Vec<(u64, Mode)> = h2ps
        .iter()
        .flat_map(|&ip| cfg.modes.iter().map(move |&m| (ip, m)))
        .collect();
    let trained: Vec<Result<Option<TrainedHelper>, HarnessError>> = jobs
        .par_iter()
        .map(|&(ip, mode)| {
            if !screened.contains(&ip) {
                return Ok(None);
            }
            let seed = job_seed(cfg.seed, &[fold as u64, ip, mode as u64]);
            train_helper(&train_w.trace, ip, mode, &cfg.encoder, &cfg.train, seed).map(Some)
        })
        .collect();
    let mut helpers: BTreeMap<(Mode, u64), TrainedHelper> = BTreeMap::new();
    for (&(ip, mode), r) in jobs.iter().zip(trained) {
        match r? {
            Some(h) => {
                helpers.insert((mode, ip), h);
            }
            None => skipped.push(SkipEntry {
                fold,
                h2p: ip,
                mode,
                workload: train_w.name.clone(),
                reason: "not an H2P in the training workload".into(),
            }),
        }
    }

    let sims: Vec<(Mode, usize)> = cfg
        .modes
        .iter()
        .flat_map(|&m| heldout.iter().map(move |&w| (m, w)))
        .collect();
    let results: Vec<Result<SimStats, HarnessError>> = sims
        .par_iter()
        .map(|&(mode, w)| {
            let set: Vec<(u64, &HelperModel)> = helpers
                .iter()
                .filter(|((m, _), _)| *m == mode)
                .map(|(&(_, ip), h)| (ip, &h.model))
                .collect();
            simulate_with_helpers(&workloads[w].trace, &cfg.baseline, &cfg.encoder, &set)
        })
        .collect();
    let mut after: BTreeMap<(Mode, usize), SimStats> = BTreeMap::new();
    for (&key, r) in sims.iter().zip(results) {
        after.insert(key, r?);
    }

    let mut mpki = Vec::new();
    for &(mode, w) in &sims {
        let wl = &workloads[w];
        let stats = &after[&(mode, w)];
        mpki.push(MpkiRow {
            fold,
            mode,
            workload: wl.name.clone(),
            instructions: wl
                .trace
                .meta
                .instruction_count
                .ok_or(HarnessError::MissingInstructionCount)?,
            baseline_mispredictions: wl.baseline.total_mispredictions(),
            helper_mispredictions: stats.total_mispredictions(),
        });
    }

    let mut rows = Vec::new();
    for ((mode, ip), h) in &helpers {
        let mut reductions = Vec::new();
        let (mut base_sum, mut helper_sum) = (0u64, 0u64);
        for &w in heldout {
            let wl = &workloads[w];
            let base = wl.baseline.get(*ip);
            let skip = |reason: &str| SkipEntry {
                fold,
                h2p: *ip,
                mode: *mode,
                workload: wl.name.clone(),
                reason: reason.into(),
            };
            if base.predictions == 0 {
                skipped.push(skip("H2P absent from held-out workload"));
                continue;
            }
            if base.mispredictions == 0 {
                skipped.push(skip("no baseline mispredictions in held-out workload"));
                continue;
            }
            let helped = after[&(*mode, w)].get(*ip);
            base_sum += base.mispredictions;
            helper_sum += helped.mispredictions;
            reductions.push(
                (base.mispredictions as f64 - helped.mispredictions as f64)
                    / base.mispredictions as f64,
            );
        }
        if reductions.is_empty() {
            skipped.push(SkipEntry {
                fold,
                h2p: *ip,
                mode: *mode,
                workload: train_w.name.clone(),
                reason: "no held-out workload could be evaluated".into(),
            });
            continue;
        }
        let mean = reductions.iter().sum::<f64>() / reductions.len() as f64;
        rows.push(FoldRow {
            fold,
            train_workload: train_w.name.clone(),
            h2p: *ip,
            mode: *mode,
            heldout_evaluated: reductions.len(),
            baseline_mispredictions: base_sum,
            helper_mispredictions: helper_sum,
            train_accuracy: h.train_accuracy,
            mean_reduction: mean,
        });
    }
    rows.sort_by_key(|r| (r.h2p, r.mode));
    Ok(FoldResult {
        fold,
        train_workload: train_w.name.clone(),
        rows,
        skipped,
        mpki,
    })
}

/// One fold per workload, each training on that workload and evaluating on
/// all others.
pub fn run_crossval(cfg: &ExperimentConfig) -> Result<EvalReport, HarnessError> {
    cfg.validate()?;
    let workloads = prepare_workloads(cfg)?;
    let h2ps = eligible_h2ps(&workloads, cfg.min_workloads_per_h2p);
    if h2ps.is_empty() {
        log::warn!(
            "no H2P appears in {} or more workloads",
            cfg.min_workloads_per_h2p
        );
    }
    let n = workloads.len();
    let folds: Vec<Result<FoldResult, HarnessError>> = (0..n)
        .into_par_iter()
        .map(|k| {
            let heldout: Vec<usize> = (0..n).filter(|&w| w != k).collect();
            run_fold(cfg, &workloads, k, k, &heldout, &h2ps)
        })
        .collect();
    let folds = folds.into_iter().collect::<Result<Vec<_>, _>>()?;
    let infos = workloads
        .iter()
        .map(|w| WorkloadInfo {
            name: w.name.clone(),
            records: w.trace.len() as u64,
            instruction_count: w.trace.meta.instruction_count,
            h2ps: w.h2ps.clone(),
        })
        .collect();
    Ok(build_report(cfg, infos, h2ps, folds))
}
