//! Mini-batch training with batch-statistic normalization, sigmoid
//! cross-entropy and Adam.
//!
//! Ternary mode uses the straight-through estimator: the gradient of
//! `quantize(clip(x))` is taken as 1 for `|x| <= 1` and 0 outside, and the
//! quantized `W2` passes its gradient to the shadow weights unchanged. Shadow
//! `W1` and `W2` are clipped to `[-1, 1]` after every step.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{quantize_ternary, CnnError, CnnParams, Mode, NORM_EPS, RUNNING_MOMENTUM};
use crate::encoder::{Sample, PAD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub sample_budget: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    /// Ternary quantization half-width.
    pub q: f64,
    pub mode: Mode,
    /// Number of Layer-1 filters.
    pub filters: usize,
    pub seed: u64,
    /// Learning rate used in ternary mode; shadow weights have to travel to
    /// `±q` before a quantized weight turns on.
    pub ternary_learning_rate: f64,
    /// Replace the running statistics with full-training-set statistics
    /// after the last epoch.
    pub recalibrate_statistics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            sample_budget: 5000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            q: 0.8,
            mode: Mode::Fp,
            filters: 32,
            seed: 0,
            ternary_learning_rate: 1e-2,
            recalibrate_statistics: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), CnnError> {
        if !(self.q > 0.0 && self.q < 1.0) {
            return Err(CnnError::Config(format!(
                "q must lie in (0, 1), got {}",
                self.q
            )));
        }
        if self.batch_size == 0 || self.filters == 0 {
            return Err(CnnError::Config(
                "batch_size and filters must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.ternary_learning_rate > 0.0) {
            return Err(CnnError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Fresh parameters: weights uniform in `[-0.05, 0.05]`, `b1 = 0`, `γ = 1`,
/// `β = 0`, running means 0 and running variances 1.
pub fn init_params(
    p: u8,
    m: usize,
    history_len: usize,
    mode: Mode,
    q: f64,
    seed: u64,
) -> CnnParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 1usize << p;
    let mut uniform =
        |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-0.05..=0.05)).collect() };
    let w1 = uniform(n * m);
    let w2 = uniform(history_len * m);
    CnnParams {
        p,
        m,
        history_len,
        mode,
        q,
        w1,
        b1: vec![0.0; m],
        gamma1: vec![1.0; m],
        beta1: vec![0.0; m],
        running_mean1: vec![0.0; m],
        running_var1: vec![1.0; m],
        w2,
        gamma2: 1.0,
        beta2: 0.0,
        running_mean2: 0.0,
        running_var2: 1.0,
    }
}

/// Gradients of the mean batch loss, shaped like the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub gamma1: Vec<f64>,
    pub beta1: Vec<f64>,
    pub w2: Vec<f64>,
    pub gamma2: f64,
    pub beta2: f64,
}

impl Grads {
    fn zeros(params: &CnnParams) -> Self {
        Self {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.m],
            gamma1: vec![0.0; params.m],
            beta1: vec![0.0; params.m],
            w2: vec![0.0; params.w2.len()],
            gamma2: 0.0,
            beta2: 0.0,
        }
    }

    pub fn groups(&self) -> [(&'static str, &[f64]); 7] {
        [
            ("w1", &self.w1),
            ("b1", &self.b1),
            ("gamma1", &self.gamma1),
            ("beta1", &self.beta1),
            ("w2", &self.w2),
            ("gamma2", std::slice::from_ref(&self.gamma2)),
            ("beta2", std::slice::from_ref(&self.beta2)),
        ]
    }
}

impl CnnParams {
    /// Trainable parameter groups, in the same order as [`Grads::groups`].
    pub fn trainable_mut(&mut self) -> [(&'static str, &mut [f64]); 7] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("gamma1", &mut self.gamma1),
            ("beta1", &mut self.beta1),
            ("w2", &mut self.w2),
            ("gamma2", std::slice::from_mut(&mut self.gamma2)),
            ("beta2", std::slice::from_mut(&mut self.beta2)),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BatchOutput {
    pub loss: f64,
    pub correct: usize,
    pub grads: Option<Grads>,
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: f64,
    pub var2: f64,
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Training-mode forward pass (batch statistics) and, optionally, the
/// analytic gradient of the mean sigmoid cross-entropy.
pub fn batch_loss_and_grads(
    params: &CnnParams,
    batch: &[&Sample],
    want_grads: bool,
) -> Result<BatchOutput, CnnError> {
    if batch.is_empty() {
        return Err(CnnError::EmptyDataset);
    }
    let (len, m) = (params.history_len, params.m);
    let bsz = batch.len();
    for s in batch {
        if s.slots.len() != len {
            return Err(CnnError::Dimension(format!(
                "sample has {} positions, expected {len}",
                s.slots.len()
            )));
        }
    }
    let ternary = params.mode == Mode::Tp;
    let q = params.q;
    let w2eff: Vec<f64> = if ternary {
        params
            .w2
            .iter()
            .map(|&w| quantize_ternary(w, q) as f64)
            .collect()
    } else {
        params.w2.clone()
    };

    // Layer 1, pre-normalization, laid out [(b * len + t) * m + j].
    let mut h1 = vec![0.0; bsz * len * m];
    for (bi, s) in batch.iter().enumerate() {
        for (t, &slot) in s.slots.iter().enumerate() {
            let base = (bi * len + t) * m;
            for j in 0..m {
                h1[base + j] = params.layer1_score(slot, j);
            }
        }
    }
    let n1 = (bsz * len) as f64;
    let mut mean1 = vec![0.0; m];
    for row in h1.chunks_exact(m) {
        for j in 0..m {
            mean1[j] += row[j];
        }
    }
    mean1.iter_mut().for_each(|v| *v /= n1);
    let mut var1 = vec![0.0; m];
    for row in h1.chunks_exact(m) {
        for j in 0..m {
            let d = row[j] - mean1[j];
            var1[j] += d * d;
        }
    }
    var1.iter_mut().for_each(|v| *v /= n1);
    let sig1: Vec<f64> = var1.iter().map(|v| (v + NORM_EPS).sqrt()).collect();
    for row in h1.chunks_exact_mut(m) {
        for j in 0..m {
            row[j] = (row[j] - mean1[j]) / sig1[j];
        }
    }

    let activation = |h: f64, j: usize, pad: bool| -> f64 {
        let y = params.gamma1[j] * h + params.beta1[j];
        if ternary {
            if pad {
                0.0
            } else {
                quantize_ternary(y, q) as f64
            }
        } else {
            y
        }
    };

    // Layer 2.
    let mut z = vec![0.0; bsz];
    for (bi, s) in batch.iter().enumerate() {
        let mut acc = 0.0;
        for (t, &slot) in s.slots.iter().enumerate() {
            let base = (bi * len + t) * m;
            let pad = slot == PAD;
            for j in 0..m {
                acc += w2eff[t * m + j] * activation(h1[base + j], j, pad);
            }
        }
        z[bi] = acc;
    }
    let nb = bsz as f64;
    let mean2 = z.iter().sum::<f64>() / nb;
    let var2 = z.iter().map(|v| (v - mean2) * (v - mean2)).sum::<f64>() / nb;
    let sig2 = (var2 + NORM_EPS).sqrt();
    let h2: Vec<f64> = z.iter().map(|v| (v - mean2) / sig2).collect();
    let out: Vec<f64> = h2
        .iter()
        .map(|h| params.gamma2 * h + params.beta2)
        .collect();

    let mut loss = 0.0;
    let mut correct = 0;
    for (bi, s) in batch.iter().enumerate() {
        let y = if s.taken { 1.0 } else { 0.0 };
        loss += softplus(out[bi]) - y * out[bi];
        if (out[bi] > 0.0) == s.taken {
            correct += 1;
        }
    }
    loss /= nb;

    let grads = if want_grads {
        let mut g = Grads::zeros(params);
        let dout: Vec<f64> = batch
            .iter()
            .zip(&out)
            .map(|(s, &o)| (sigmoid(o) - if s.taken { 1.0 } else { 0.0 }) / nb)
            .collect();
        g.gamma2 = dout.iter().zip(&h2).map(|(d, h)| d * h).sum();
        g.beta2 = dout.iter().sum();
        let dh2: Vec<f64> = dout.iter().map(|d| d * params.gamma2).collect();
        let mean_dh2 = dh2.iter().sum::<f64>() / nb;
        let mean_dh2h2 = dh2.iter().zip(&h2).map(|(d, h)| d * h).sum::<f64>() / nb;
        let dz: Vec<f64> = dh2
            .iter()
            .zip(&h2)
            .map(|(d, h)| (d - mean_dh2 - h * mean_dh2h2) / sig2)
            .collect();

        // dh1 overwrites nothing; stored separately since h1 is still needed.
        let mut dh1 = vec![0.0; h1.len()];
        let mut sum_dh1 = vec![0.0; m];
        let mut sum_dh1h1 = vec![0.0; m];
        for (bi, s) in batch.iter().enumerate() {
            for (t, &slot) in s.slots.iter().enumerate() {
                let base = (bi * len + t) * m;
                let pad = slot == PAD;
                for j in 0..m {
                    let h = h1[base + j];
                    let y = params.gamma1[j] * h + params.beta1[j];
                    let a = activation(h, j, pad);
                    g.w2[t * m + j] += dz[bi] * a;
                    let mut dy = dz[bi] * w2eff[t * m + j];
                    if ternary && (pad || y.abs() > 1.0) {
                        dy = 0.0;
                    }
                    g.gamma1[j] += dy * h;
                    g.beta1[j] += dy;
                    let d = dy * params.gamma1[j];
                    dh1[base + j] = d;
                    sum_dh1[j] += d;
                    sum_dh1h1[j] += d * h;
                }
            }
        }
        for j in 0..m {
            sum_dh1[j] /= n1;
            sum_dh1h1[j] /= n1;
        }
        for (bi, s) in batch.iter().enumerate() {
            for (t, &slot) in s.slots.iter().enumerate() {
                let base = (bi * len + t) * m;
                for j in 0..m {
                    let ds = (dh1[base + j] - sum_dh1[j] - h1[base + j] * sum_dh1h1[j]) / sig1[j];
                    g.b1[j] += ds;
                    if slot != PAD {
                        g.w1[slot as usize * m + j] += ds;
                    }
                }
            }
        }
        Some(g)
    } else {
        None
    };

    Ok(BatchOutput {
        loss,
        correct,
        grads,
        mean1,
        var1,
        mean2,
        var2,
    })
}

/// Adam with bias correction over the trainable parameter groups.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &CnnParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let mut p = params.clone();
        let sizes: Vec<usize> = p.trainable_mut().iter().map(|(_, g)| g.len()).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut CnnParams, grads: &Grads) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (k, ((_, p), (_, g))) in params
            .trainable_mut()
            .into_iter()
            .zip(grads.groups())
            .enumerate()
        {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: CnnParams,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Training-mode accuracy per epoch.
    pub accuracy_curve: Vec<f64>,
}

fn blend(running: &mut f64, batch: f64) {
    *running = RUNNING_MOMENTUM * *running + (1.0 - RUNNING_MOMENTUM) * batch;
}

/// Trains `params` on `dataset`. The model mode comes from `params`; it must
/// match `config.mode`.
pub fn train(
    mut params: CnnParams,
    dataset: &[Sample],
    config: &TrainConfig,
) -> Result<TrainOutcome, CnnError> {
    config.validate()?;
    params.check_shapes()?;
    if params.mode != config.mode {
        return Err(CnnError::WrongMode {
            expected: config.mode,
            got: params.mode,
        });
    }
    if dataset.is_empty() {
        return Err(CnnError::EmptyDataset);
    }
    params.q = config.q;
    let ternary = params.mode == Mode::Tp;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lr = if ternary {
        config.ternary_learning_rate
    } else {
        config.learning_rate
    };
    let mut adam = Adam::new(&params, lr, config.beta1, config.beta2, config.epsilon);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut accuracy_curve = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        for (bidx, chunk) in order.chunks(config.batch_size).enumerate() {
            // a single-sample batch has no spread to normalize over
            if chunk.len() < 2 && dataset.len() >= 2 {
                continue;
            }
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let out = batch_loss_and_grads(&params, &batch, true)?;
            if !out.loss.is_finite() {
                return Err(CnnError::NonFiniteLoss {
                    loss: out.loss,
                    epoch,
                    batch: bidx,
                });
            }
            for j in 0..params.m {
                blend(&mut params.running_mean1[j], out.mean1[j]);
                blend(&mut params.running_var1[j], out.var1[j]);
            }
            blend(&mut params.running_mean2, out.mean2);
            blend(&mut params.running_var2, out.var2);
            adam.step(
                &mut params,
                out.grads.as_ref().expect("gradients requested"),
            );
            if ternary {
                for w in params.w1.iter_mut().chain(params.w2.iter_mut()) {
                    *w = w.clamp(-1.0, 1.0);
                }
            }
            loss_sum += out.loss;
            batches += 1;
            correct += out.correct;
            seen += batch.len();
        }
        loss_curve.push(if batches > 0 {
            loss_sum / batches as f64
        } else {
            f64::NAN
        });
        accuracy_curve.push(if seen > 0 {
            correct as f64 / seen as f64
        } else {
            f64::NAN
        });
        log::debug!(
            "epoch {epoch}: loss {:.5} acc {:.4}",
            loss_curve.last().unwrap(),
            accuracy_curve.last().unwrap()
        );
    }
    if config.recalibrate_statistics && config.epochs > 0 {
        let stats = population_statistics(&params, dataset)?;
        params.running_mean1 = stats.mean1;
        params.running_var1 = stats.var1;
        params.running_mean2 = stats.mean2;
        params.running_var2 = stats.var2;
    }
    Ok(TrainOutcome {
        params,
        loss_curve,
        accuracy_curve,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationStats {
    pub mean1: Vec<f64>,
    pub var1: Vec<f64>,
    pub mean2: f64,
    pub var2: f64,
}

/// Normalization statistics of the whole dataset treated as one batch,
/// computed in streaming passes.
pub fn population_statistics(
    params: &CnnParams,
    dataset: &[Sample],
) -> Result<PopulationStats, CnnError> {
    if dataset.is_empty() {
        return Err(CnnError::EmptyDataset);
    }
    let m = params.m;
    let n1 = (dataset.len() * params.history_len) as f64;
    let mut mean1 = vec![0.0; m];
    for s in dataset {
        for &slot in s.slots.iter() {
            for (j, acc) in mean1.iter_mut().enumerate() {
                *acc += params.layer1_score(slot, j);
            }
        }
    }
    mean1.iter_mut().for_each(|v| *v /= n1);
    let mut var1 = vec![0.0; m];
    for s in dataset {
        for &slot in s.slots.iter() {
            for (j, acc) in var1.iter_mut().enumerate() {
                let d = params.layer1_score(slot, j) - mean1[j];
                *acc += d * d;
            }
        }
    }
    var1.iter_mut().for_each(|v| *v /= n1);
    let sig1: Vec<f64> = var1.iter().map(|v| (v + NORM_EPS).sqrt()).collect();

    let ternary = params.mode == Mode::Tp;
    let w2eff: Vec<f64> = if ternary {
        params
            .w2
            .iter()
            .map(|&w| quantize_ternary(w, params.q) as f64)
            .collect()
    } else {
        params.w2.clone()
    };
    let z: Vec<f64> = dataset
        .iter()
        .map(|s| {
            let mut acc = 0.0;
            for (t, &slot) in s.slots.iter().enumerate() {
                for j in 0..m {
                    let h = (params.layer1_score(slot, j) - mean1[j]) / sig1[j];
                    let y = params.gamma1[j] * h + params.beta1[j];
                    let a = match (ternary, slot == PAD) {
                        (false, _) => y,
                        (true, true) => 0.0,
                        (true, false) => quantize_ternary(y, params.q) as f64,
                    };
                    acc += w2eff[t * m + j] * a;
                }
            }
            acc
        })
        .collect();
    let nb = z.len() as f64;
    let mean2 = z.iter().sum::<f64>() / nb;
    let var2 = z.iter().map(|v| (v - mean2) * (v - mean2)).sum::<f64>() / nb;
    Ok(PopulationStats {
        mean1,
        var1,
        mean2,
        var2,
    })
}
