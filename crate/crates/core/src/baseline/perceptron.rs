//! Global-history perceptron predictor.
//!
//! Each static branch hashes to a row of `history_length + 1` weights (bias
//! first). The output is `bias + Σ w_i·h_i` with `h_i ∈ {-1, +1}` for
//! observed outcomes and `0` for positions before program start; taken iff
//! the output is `>= 0`. Training happens on a misprediction or when
//! `|output| <= θ`, `θ = ⌊1.93·h + 14⌋`.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{BaselineError, BranchPredictor};

const THETA_COEFF: f64 = 1.93;
const THETA_BIAS: f64 = 14.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptronConfig {
    pub history_length: usize,
    pub weight_bits: u32,
    /// Rows in the weight table.
    pub num_entries: usize,
}

impl Default for PerceptronConfig {
    fn default() -> Self {
        Self {
            history_length: 200,
            weight_bits: 8,
            num_entries: 1024,
        }
    }
}

impl PerceptronConfig {
    pub fn theta(&self) -> i32 {
        (THETA_COEFF * self.history_length as f64 + THETA_BIAS).floor() as i32
    }

    pub fn weight_limit(&self) -> i32 {
        (1 << (self.weight_bits - 1)) - 1
    }
}

#[derive(Debug, Clone)]
pub struct PerceptronPredictor {
    cfg: PerceptronConfig,
    weights: Vec<i32>,
    /// Oldest first; the most recent outcome is at the back.
    history: VecDeque<i8>,
    theta: i32,
    pending: Option<(u64, i32)>,
}

impl PerceptronPredictor {
    pub fn new(cfg: PerceptronConfig) -> Result<Self, BaselineError> {
        if cfg.history_length == 0 || cfg.num_entries == 0 {
            return Err(BaselineError::Config(
                "perceptron needs history and entries".into(),
            ));
        }
        if !(2..=16).contains(&cfg.weight_bits) {
            return Err(BaselineError::Config(
                "weight_bits must lie in [2, 16]".into(),
            ));
        }
        Ok(Self {
            weights: vec![0; cfg.num_entries * (cfg.history_length + 1)],
            history: VecDeque::from(vec![0; cfg.history_length]),
            theta: cfg.theta(),
            pending: None,
            cfg,
        })
    }

    pub fn config(&self) -> &PerceptronConfig {
        &self.cfg
    }

    pub fn theta(&self) -> i32 {
        self.theta
    }

    fn row(&self, ip: u64) -> usize {
        ((ip ^ (ip >> 16)) % self.cfg.num_entries as u64) as usize
    }

    pub fn weights_for(&self, ip: u64) -> &[i32] {
        let w = self.cfg.history_length + 1;
        let r = self.row(ip);
        &self.weights[r * w..(r + 1) * w]
    }

    /// Raw output for `ip` against an explicit history (oldest first, entries
    /// in `{-1, 0, +1}`).
    pub fn output(&self, ip: u64, history: &[i8]) -> i32 {
        debug_assert_eq!(history.len(), self.cfg.history_length);
        let w = self.weights_for(ip);
        w[0] + w[1..]
            .iter()
            .zip(history)
            .map(|(&wi, &h)| wi * h as i32)
            .sum::<i32>()
    }

    pub fn perceptron_predict(&self, ip: u64, history: &[i8]) -> (bool, i32) {
        let y = self.output(ip, history);
        (y >= 0, y)
    }

    pub fn perceptron_update(&mut self, ip: u64, history: &[i8], output: i32, taken: bool) {
        if (output >= 0) == taken && output.abs() > self.theta {
            return;
        }
        let t = if taken { 1 } else { -1 };
        let lim = self.cfg.weight_limit();
        let width = self.cfg.history_length + 1;
        let r = self.row(ip);
        let row = &mut self.weights[r * width..(r + 1) * width];
        row[0] = (row[0] + t).clamp(-lim, lim);
        for (wi, &h) in row[1..].iter_mut().zip(history) {
            *wi = (*wi + t * h as i32).clamp(-lim, lim);
        }
    }

    fn history_slice(&mut self) -> &[i8] {
        self.history.make_contiguous();
        self.history.as_slices().0
    }

    pub fn all_weights(&self) -> &[i32] {
        &self.weights
    }
}

impl BranchPredictor for PerceptronPredictor {
    fn predict(&mut self, ip: u64) -> bool {
        let h = self.history_slice().to_vec();
        let (taken, y) = self.perceptron_predict(ip, &h);
        self.pending = Some((ip, y));
        taken
    }

    fn update(&mut self, ip: u64, taken: bool) -> Result<(), BaselineError> {
        let y = match self.pending.take() {
            Some((p, y)) if p == ip => y,
            other => {
                let pending = other.map(|(p, _)| p);
                self.pending = other;
                return Err(BaselineError::UnmatchedUpdate { got: ip, pending });
            }
        };
        let h = self.history_slice().to_vec();
        self.perceptron_update(ip, &h, y, taken);
        self.history.pop_front();
        self.history.push_back(if taken { 1 } else { -1 });
        Ok(())
    }

    fn name(&self) -> &'static str {
        "perceptron"
    }
}
