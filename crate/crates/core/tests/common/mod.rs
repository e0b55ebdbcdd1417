//! Independent reference implementations used as test oracles. Nothing here
//! calls into the code under test beyond plain data types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use h2p_core::cnn::{init_params, CnnParams, Mode};
use h2p_core::encoder::{Sample, PAD};
use h2p_core::harness::EvalReport;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub mod strategies;

pub const EPS: f64 = 1e-5;

/// Mean sigmoid cross-entropy of a training-mode forward pass (batch
/// statistics, biased variance), full precision.
pub fn oracle_loss(params: &CnnParams, batch: &[&Sample]) -> f64 {
    let (m, len) = (params.m, params.history_len);
    let n = batch.len();
    let mut y = vec![0.0; n * len * m];
    for (b, s) in batch.iter().enumerate() {
        for t in 0..len {
            for j in 0..m {
                let w = if s.slots[t] == PAD {
                    0.0
                } else {
                    params.w1[s.slots[t] as usize * m + j]
                };
                y[(b * len + t) * m + j] = w + params.b1[j];
            }
        }
    }
    let count = (n * len) as f64;
    let mut a = vec![0.0; y.len()];
    for j in 0..m {
        let mean = (0..n * len).map(|k| y[k * m + j]).sum::<f64>() / count;
        let var = (0..n * len)
            .map(|k| (y[k * m + j] - mean).powi(2))
            .sum::<f64>()
            / count;
        for k in 0..n * len {
            a[k * m + j] =
                params.gamma1[j] * (y[k * m + j] - mean) / (var + EPS).sqrt() + params.beta1[j];
        }
    }
    let z: Vec<f64> = (0..n)
        .map(|b| {
            (0..len * m)
                .map(|k| params.w2[k] * a[b * len * m + k])
                .sum()
        })
        .collect();
    let mean = z.iter().sum::<f64>() / n as f64;
    let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let mut loss = 0.0;
    for (b, s) in batch.iter().enumerate() {
        let o = params.gamma2 * (z[b] - mean) / (var + EPS).sqrt() + params.beta2;
        let label = if s.taken { 1.0 } else { 0.0 };
        loss += (1.0 + o.exp()).ln() - label * o;
    }
    loss / n as f64
}

/// Frozen-statistics ternary code of table entry `(i, j)`, written out from
/// the scalar definition.
pub fn oracle_table_code(params: &CnnParams, i: usize, j: usize) -> i8 {
    let raw = params.w1[i * params.m + j] + params.b1[j];
    let sigma = (params.running_var1[j] + EPS).sqrt();
    let normalized = params.gamma1[j] * (raw - params.running_mean1[j]) / sigma + params.beta1[j];
    let clipped = normalized.clamp(-1.0, 1.0);
    if clipped >= params.q {
        1
    } else if clipped <= -params.q {
        -1
    } else {
        0
    }
}

pub fn oracle_dot(a: &[i8], b: &[i8]) -> i64 {
    a.iter().zip(b).map(|(&x, &y)| x as i64 * y as i64).sum()
}

/// Unpacked FIFO: `rows[0]` is the most recent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShadowFifo {
    pub rows: Vec<Vec<i8>>,
}

impl ShadowFifo {
    pub fn new(m: usize, len: usize) -> Self {
        Self {
            rows: vec![vec![0; m]; len],
        }
    }

    pub fn push(&mut self, row: Vec<i8>) {
        self.rows.pop();
        self.rows.insert(0, row);
    }

    pub fn flat(&self) -> Vec<i8> {
        self.rows.concat()
    }
}

/// Parameters with every field randomized away from its initial value.
pub fn random_params(rng: &mut ChaCha8Rng, p: u8, m: usize, len: usize, mode: Mode) -> CnnParams {
    let mut params = init_params(p, m, len, mode, 0.8, rng.random());
    let mut r = |lo: f64, hi: f64| rng.random_range(lo..hi);
    params.w1.iter_mut().for_each(|w| *w = r(-1.0, 1.0));
    params.w2.iter_mut().for_each(|w| *w = r(-1.0, 1.0));
    for j in 0..m {
        params.b1[j] = r(-0.5, 0.5);
        params.gamma1[j] = r(0.3, 2.0);
        params.beta1[j] = r(-0.5, 0.5);
        params.running_mean1[j] = r(-0.5, 0.5);
        params.running_var1[j] = r(0.1, 2.0);
    }
    params.gamma2 = r(0.3, 2.0);
    params.beta2 = r(-0.5, 0.5);
    params.running_mean2 = r(-1.0, 1.0);
    params.running_var2 = r(0.5, 3.0);
    params
}

pub fn random_window(rng: &mut ChaCha8Rng, p: u8, len: usize) -> Vec<u32> {
    let pads = rng.random_range(0..=len / 2);
    (0..len)
        .map(|t| {
            if t < pads {
                PAD
            } else {
                rng.random_range(0..1u32 << p)
            }
        })
        .collect()
}

/// Recomputes per-H2P means, winners and the per-mode summary from folds.csv.
pub fn check_csv_reconciles(report: &EvalReport, csv: &str) {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (ci, cm, cr) = (col("h2p"), col("mode"), col("mean_reduction"));
    let mut by: BTreeMap<(String, u64), Vec<f64>> = BTreeMap::new();
    let mut n = 0;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        let ip = u64::from_str_radix(f[ci].trim_start_matches("0x"), 16).unwrap();
        by.entry((f[cm].to_string(), ip))
            .or_default()
            .push(f[cr].parse().unwrap());
        n += 1;
    }
    assert_eq!(n, report.rows.len());
    for s in &report.summary {
        let key = if s.mode == Mode::Fp { "fp" } else { "tp" };
        let means: Vec<f64> = by
            .iter()
            .filter(|((m, _), _)| m == key)
            .map(|(_, v)| v.iter().sum::<f64>() / v.len() as f64)
            .collect();
        let wins: Vec<f64> = means.iter().copied().filter(|&m| m > 0.0).collect();
        assert_eq!(s.h2ps_evaluated, means.len());
        assert_eq!(s.winners, wins.len());
        if !means.is_empty() {
            assert!((s.pct_winners - 100.0 * wins.len() as f64 / means.len() as f64).abs() < 1e-9);
            let all = 100.0 * means.iter().sum::<f64>() / means.len() as f64;
            assert!((s.mean_reduction_all_pct.unwrap() - all).abs() < 1e-9);
        }
        if !wins.is_empty() {
            let w = 100.0 * wins.iter().sum::<f64>() / wins.len() as f64;
            assert!((s.mean_reduction_winners_pct.unwrap() - w).abs() < 1e-9);
        }
        for h in report.per_h2p.iter().filter(|h| h.mode == s.mode) {
            let v = &by[&(key.to_string(), h.h2p)];
            assert_eq!(h.folds_evaluated, v.len());
            assert!((h.mean_reduction - v.iter().sum::<f64>() / v.len() as f64).abs() < 1e-12);
            assert_eq!(h.winner, h.mean_reduction > 0.0);
        }
    }
}
