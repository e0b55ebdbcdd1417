//! Two-layer CNN helper: a width-1 convolution over 1-hot history columns
//! followed by a single linear filter across positions, each with a
//! normalization step.
//!
//! Layer 1 at position `t` for filter `j` is `W1[x_t, j] + b1[j]` (the 1-hot
//! column selects one row of `W1`; a pad column selects nothing), normalized
//! per filter. Layer 2 is `Σ_{t,j} W2[t, j]·a[t, j]`, normalized as a scalar;
//! the helper predicts taken iff the normalized output is `> 0`.
//!
//! In ternary mode Layer-1 activations are clipped to `[-1, 1]` and quantized
//! to `{-1, 0, +1}`, `W2` is quantized the same way, and pad positions
//! contribute a zero code.

mod io;
mod train;

pub use io::{load_params, params_from_json, params_to_json, save_params, ModelIoError};
pub use train::{
    batch_loss_and_grads, init_params, population_statistics, train, Adam, BatchOutput, Grads,
    PopulationStats, TrainConfig, TrainOutcome,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_index, EncoderConfig, Sample, PAD};

/// Variance floor of every normalization step.
pub const NORM_EPS: f64 = 1e-5;
/// Weight of the previous running statistic at each update.
pub const RUNNING_MOMENTUM: f64 = 0.9;

#[derive(Debug, Error)]
pub enum CnnError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFiniteLoss {
        loss: f64,
        epoch: usize,
        batch: usize,
    },
    #[error("non-finite parameter in {0}")]
    NonFiniteParam(&'static str),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("operation requires a {expected:?} model, got {got:?}")]
    WrongMode { expected: Mode, got: Mode },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Full-precision CNN.
    Fp,
    /// Ternary (2-bit) CNN.
    Tp,
}

impl Mode {
    pub fn label(&self) -> &'static str {
        match self {
            Mode::Fp => "FP-CNN",
            Mode::Tp => "TP-CNN",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "fp" | "fp-cnn" => Ok(Mode::Fp),
            "tp" | "tp-cnn" | "ternary" => Ok(Mode::Tp),
            other => Err(format!("unknown mode `{other}` (expected fp or tp)")),
        }
    }
}

/// Trained (or initial) CNN parameters. Matrices are row-major:
/// `w1[index * m + filter]`, `w2[position * m + filter]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnParams {
    pub p: u8,
    pub m: usize,
    pub history_len: usize,
    pub mode: Mode,
    pub q: f64,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub running_mean1: Vec<f64>,
    pub running_var1: Vec<f64>,
    pub w2: Vec<f64>,
    pub gamma2: f64,
    pub beta2: f64,
    pub running_mean2: f64,
    pub running_var2: f64,
}

impl CnnParams {
    pub fn num_indices(&self) -> usize {
        1usize << self.p
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            p: self.p,
            history_len: self.history_len,
        }
    }

    pub fn check_shapes(&self) -> Result<(), CnnError> {
        let n = self.num_indices();
        let m = self.m;
        let checks = [
            ("w1", self.w1.len(), n * m),
            ("b1", self.b1.len(), m),
            ("gamma1", self.gamma1.len(), m),
            ("beta1", self.beta1.len(), m),
            ("running_mean1", self.running_mean1.len(), m),
            ("running_var1", self.running_var1.len(), m),
            ("w2", self.w2.len(), self.history_len * m),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(CnnError::Dimension(format!(
                    "{name} has {got} entries, expected {want}"
                )));
            }
        }
        if m == 0 || self.history_len == 0 || !(2..=16).contains(&self.p) {
            return Err(CnnError::Dimension(format!(
                "p={}, m={}, history_len={} out of range",
                self.p, m, self.history_len
            )));
        }
        Ok(())
    }

    pub fn check_finite(&self) -> Result<(), CnnError> {
        let groups: [(&'static str, &[f64]); 7] = [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("gamma1", &self.gamma1),
            ("beta1", &self.beta1),
            ("running_mean1", &self.running_mean1),
            ("running_var1", &self.running_var1),
            ("w2", &self.w2),
        ];
        for (name, g) in groups {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(CnnError::NonFiniteParam(name));
            }
        }
        let scalars = [
            ("gamma2", self.gamma2),
            ("beta2", self.beta2),
            ("running_mean2", self.running_mean2),
            ("running_var2", self.running_var2),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(CnnError::NonFiniteParam(name));
            }
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(CnnError::Config(format!(
                "q must lie in (0, 1), got {}",
                self.q
            )));
        }
        Ok(())
    }

    /// Frozen Layer-1 normalization of filter `j`: `(y - μ)(γ/σ) + β`.
    #[inline]
    pub fn normalize1(&self, j: usize, y: f64) -> f64 {
        let sigma = (self.running_var1[j] + NORM_EPS).sqrt();
        (y - self.running_mean1[j]) * (self.gamma1[j] / sigma) + self.beta1[j]
    }

    /// Frozen Layer-2 normalization.
    #[inline]
    pub fn normalize2(&self, z: f64) -> f64 {
        (z - self.running_mean2) * (self.gamma2 / self.sigma2()) + self.beta2
    }

    pub fn sigma1(&self, j: usize) -> f64 {
        (self.running_var1[j] + NORM_EPS).sqrt()
    }

    pub fn sigma2(&self) -> f64 {
        (self.running_var2 + NORM_EPS).sqrt()
    }

    /// Pre-normalization Layer-1 score for an encoded slot.
    #[inline]
    pub fn layer1_score(&self, slot: u32, j: usize) -> f64 {
        if slot == PAD {
            self.b1[j]
        } else {
            self.w1[slot as usize * self.m + j] + self.b1[j]
        }
    }

    /// Ternary Layer-1 code for a real (non-pad) index.
    pub fn layer1_code(&self, index: usize, j: usize) -> i8 {
        quantize_ternary(
            self.normalize1(j, self.w1[index * self.m + j] + self.b1[j]),
            self.q,
        )
    }

    pub fn layer2_codes(&self) -> Vec<i8> {
        self.w2
            .iter()
            .map(|&w| quantize_ternary(w, self.q))
            .collect()
    }

    fn check_window(&self, slots: &[u32]) -> Result<(), CnnError> {
        if slots.len() != self.history_len {
            return Err(CnnError::Dimension(format!(
                "window has {} positions, model expects {}",
                slots.len(),
                self.history_len
            )));
        }
        let n = self.num_indices() as u32;
        if let Some(bad) = slots.iter().find(|&&s| s != PAD && s >= n) {
            return Err(CnnError::Dimension(format!("index {bad} outside [0, {n})")));
        }
        Ok(())
    }
}

/// `-1` for `value <= -q`, `+1` for `value >= q`, else `0`. Values are
/// clipped to `[-1, 1]` first; ties at `±q` round away from zero.
#[inline]
pub fn quantize_ternary(value: f64, q: f64) -> i8 {
    let v = value.clamp(-1.0, 1.0);
    if v >= q {
        1
    } else if v <= -q {
        -1
    } else {
        0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FpForward {
    /// Pre-normalization Layer-1 scores, `[position * m + filter]`.
    pub layer1_pre: Vec<f64>,
    /// Layer-2 inner product before normalization.
    pub logit: f64,
    /// Normalized Layer-2 output.
    pub output: f64,
    pub taken: bool,
}

/// Full-precision inference with frozen statistics, using 1-hot index
/// lookup for Layer 1.
pub fn forward_fp(params: &CnnParams, slots: &[u32]) -> Result<FpForward, CnnError> {
    params.check_window(slots)?;
    let m = params.m;
    let mut layer1_pre = Vec::with_capacity(slots.len() * m);
    let mut logit = 0.0;
    for (t, &slot) in slots.iter().enumerate() {
        for j in 0..m {
            let s = params.layer1_score(slot, j);
            layer1_pre.push(s);
            logit += params.w2[t * m + j] * params.normalize1(j, s);
        }
    }
    let output = params.normalize2(logit);
    Ok(FpForward {
        layer1_pre,
        logit,
        output,
        taken: output > 0.0,
    })
}

/// Ternary parameters with their derived codes.
#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCnnParams {
    pub params: CnnParams,
    /// Layer-1 codes after normalize-then-quantize, `[index * m + filter]`.
    pub table_codes: Vec<i8>,
    /// Quantized `W2`, `[position * m + filter]`.
    pub l2_codes: Vec<i8>,
}

impl TernaryCnnParams {
    pub fn from_params(params: &CnnParams) -> Result<Self, CnnError> {
        if params.mode != Mode::Tp {
            return Err(CnnError::WrongMode {
                expected: Mode::Tp,
                got: params.mode,
            });
        }
        params.check_shapes()?;
        params.check_finite()?;
        let m = params.m;
        let table_codes = (0..params.num_indices() * m)
            .map(|k| params.layer1_code(k / m, k % m))
            .collect();
        Ok(Self {
            params: params.clone(),
            table_codes,
            l2_codes: params.layer2_codes(),
        })
    }

    pub fn m(&self) -> usize {
        self.params.m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TernaryForward {
    pub taken: bool,
    /// Integer ternary inner product.
    pub p: i64,
    pub output: f64,
}

/// Reference (unpacked) execution of the deployed ternary semantics.
pub fn forward_ternary_reference(
    tp: &TernaryCnnParams,
    slots: &[u32],
) -> Result<TernaryForward, CnnError> {
    tp.params.check_window(slots)?;
    let m = tp.m();
    let mut p = 0i64;
    for (t, &slot) in slots.iter().enumerate() {
        if slot == PAD {
            continue;
        }
        for j in 0..m {
            p += (tp.table_codes[slot as usize * m + j] * tp.l2_codes[t * m + j]) as i64;
        }
    }
    let output = tp.params.normalize2(p as f64);
    Ok(TernaryForward {
        taken: output > 0.0,
        p,
        output,
    })
}

/// Any model able to predict from a history window.
#[derive(Debug, Clone)]
pub enum Helper {
    Fp(CnnParams),
    Tp(TernaryCnnParams),
}

impl Helper {
    pub fn from_params(params: &CnnParams) -> Result<Self, CnnError> {
        params.check_shapes()?;
        Ok(match params.mode {
            Mode::Fp => Helper::Fp(params.clone()),
            Mode::Tp => Helper::Tp(TernaryCnnParams::from_params(params)?),
        })
    }

    pub fn predict(&self, slots: &[u32]) -> Result<bool, CnnError> {
        match self {
            Helper::Fp(p) => Ok(forward_fp(p, slots)?.taken),
            Helper::Tp(t) => Ok(forward_ternary_reference(t, slots)?.taken),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub mispredictions: usize,
    pub total: usize,
}

/// Accuracy with frozen statistics; touches no state.
pub fn evaluate(params: &CnnParams, dataset: &[Sample]) -> Result<EvalResult, CnnError> {
    if dataset.is_empty() {
        return Err(CnnError::EmptyDataset);
    }
    let helper = Helper::from_params(params)?;
    let mut mispredictions = 0;
    for s in dataset {
        if helper.predict(&s.slots)? != s.taken {
            mispredictions += 1;
        }
    }
    let total = dataset.len();
    Ok(EvalResult {
        accuracy: 1.0 - mispredictions as f64 / total as f64,
        mispredictions,
        total,
    })
}

/// Index the Layer-1 table would be read at for a record.
pub fn table_index(ip: u64, taken: bool, p: u8) -> usize {
    encode_index(ip, taken, p) as usize
}
