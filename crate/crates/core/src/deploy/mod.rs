//! Ternary helper in its deployed form: a 2-bit Layer-1 lookup table, a
//! bit-plane FIFO of table rows fed by every retired conditional branch, and
//! a popcount inner product against the Layer-2 planes compared with one
//! integer threshold.
//!
//! Plane layouts (bit `k` is bit `k % 64` of word `k / 64`):
//!
//! * table: code of index `i`, filter `j` at `k = i·m + j`;
//! * FIFO and Layer 2: age `a` (0 = most recent), filter `j` at `k = a·m + j`.

mod blob;
mod code;

pub use blob::{deserialize_helper, serialize_helper, BLOB_HEADER_LEN, BLOB_MAGIC, BLOB_VERSION};
pub use code::{BitPlanes, TernaryCode};

use thiserror::Error;

use crate::cnn::{CnnError, CnnParams, TernaryCnnParams};
use crate::encoder::encode_index;

#[derive(Debug, Error)]
pub enum DeployError {
    #[error("illegal ternary code 10")]
    IllegalCode,
    #[error("non-finite parameter in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("Layer-2 scale is zero; the decision does not depend on the input")]
    ZeroScale,
    #[error("cannot roll back {requested} updates, only {available} recorded")]
    Rollback { requested: usize, available: usize },
    #[error("malformed helper blob: {0}")]
    Format(String),
    #[error(transparent)]
    Model(#[from] CnnError),
}

/// Layer-1 codes for every index of a `2^p × m` table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LookupTable {
    p: u8,
    m: usize,
    planes: BitPlanes,
}

impl LookupTable {
    pub fn from_codes(p: u8, m: usize, codes: &[TernaryCode]) -> Result<Self, DeployError> {
        if codes.len() != (1usize << p) * m {
            return Err(DeployError::Dimension(format!(
                "table needs {} codes, got {}",
                (1usize << p) * m,
                codes.len()
            )));
        }
        Ok(Self {
            p,
            m,
            planes: BitPlanes::from_codes(codes),
        })
    }

    pub(crate) fn from_planes(p: u8, m: usize, planes: BitPlanes) -> Self {
        Self { p, m, planes }
    }

    pub fn p(&self) -> u8 {
        self.p
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn rows(&self) -> usize {
        1 << self.p
    }

    pub fn planes(&self) -> &BitPlanes {
        &self.planes
    }

    pub fn get(&self, index: usize, j: usize) -> TernaryCode {
        self.planes.get(index * self.m + j)
    }

    pub fn row(&self, index: usize) -> Vec<TernaryCode> {
        (0..self.m).map(|j| self.get(index, j)).collect()
    }
}

/// Precomputes the normalize-then-quantize Layer-1 code of every index.
pub fn build_table(params: &TernaryCnnParams) -> Result<LookupTable, DeployError> {
    let p = &params.params;
    p.check_shapes()?;
    for (name, v) in [
        ("w1", &p.w1),
        ("b1", &p.b1),
        ("gamma1", &p.gamma1),
        ("beta1", &p.beta1),
        ("running_mean1", &p.running_mean1),
        ("running_var1", &p.running_var1),
    ] {
        if v.iter().any(|x| !x.is_finite()) {
            return Err(DeployError::NonFinite(name));
        }
    }
    let m = p.m;
    let codes: Vec<TernaryCode> = (0..p.num_indices() * m)
        .map(|k| TernaryCode::from_i8(p.layer1_code(k / m, k % m)))
        .collect();
    LookupTable::from_codes(p.p, m, &codes)
}

/// Runtime history of table rows with a bounded undo log for rollback.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FifoBuffer {
    m: usize,
    history_len: usize,
    planes: BitPlanes,
    undo: BitPlanes,
    undo_depth: usize,
    undo_head: usize,
    undo_count: usize,
}

impl FifoBuffer {
    /// Empty buffer (every code zero) that can undo up to `history_len`
    /// updates.
    pub fn new(m: usize, history_len: usize) -> Self {
        Self::with_undo_depth(m, history_len, history_len)
    }

    pub fn with_undo_depth(m: usize, history_len: usize, undo_depth: usize) -> Self {
        Self {
            m,
            history_len,
            planes: BitPlanes::zeros(m * history_len),
            undo: BitPlanes::zeros(m * undo_depth),
            undo_depth,
            undo_head: 0,
            undo_count: 0,
        }
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn planes(&self) -> &BitPlanes {
        &self.planes
    }

    pub fn get(&self, age: usize, j: usize) -> TernaryCode {
        self.planes.get(age * self.m + j)
    }

    /// Updates that can still be undone.
    pub fn undo_available(&self) -> usize {
        self.undo_count
    }

    /// Shifts in table row `index` directly.
    pub fn push_index(&mut self, table: &LookupTable, index: usize) -> Result<(), DeployError> {
        if self.m != table.m {
            return Err(DeployError::Dimension(format!(
                "buffer has {} filters, table {}",
                self.m, table.m
            )));
        }
        if index >= table.rows() {
            return Err(DeployError::Dimension(format!(
                "index {index} outside [0, {})",
                table.rows()
            )));
        }
        self.push(table, index);
        Ok(())
    }

    fn push(&mut self, table: &LookupTable, index: usize) {
        let m = self.m;
        let oldest = (self.history_len - 1) * m;
        if self.undo_depth > 0 {
            let base = self.undo_head * m;
            for j in 0..m {
                self.undo.set(base + j, self.planes.get(oldest + j));
            }
            self.undo_head = (self.undo_head + 1) % self.undo_depth;
            self.undo_count = (self.undo_count + 1).min(self.undo_depth);
        }
        self.planes.shift_up(m);
        let row = index * m;
        for j in 0..m {
            self.planes.set(j, table.planes.get(row + j));
        }
    }

    /// Reverts the last `n` updates, restoring evicted rows from the undo
    /// log.
    pub fn rollback(&mut self, n: usize) -> Result<(), DeployError> {
        if n > self.undo_count {
            return Err(DeployError::Rollback {
                requested: n,
                available: self.undo_count,
            });
        }
        let m = self.m;
        let oldest = (self.history_len - 1) * m;
        for _ in 0..n {
            self.undo_head = (self.undo_head + self.undo_depth - 1) % self.undo_depth;
            self.undo_count -= 1;
            self.planes.shift_down(m);
            let base = self.undo_head * m;
            for j in 0..m {
                self.planes.set(oldest + j, self.undo.get(base + j));
            }
        }
        Ok(())
    }
}

/// Shifts the table row of `(ip, taken)` into age 0 and evicts the oldest
/// row.
pub fn fifo_update(
    buffer: &mut FifoBuffer,
    table: &LookupTable,
    ip: u64,
    taken: bool,
) -> Result<(), DeployError> {
    buffer.push_index(table, encode_index(ip, taken, table.p) as usize)
}

/// Integer decision rule: predict taken iff `P' > t`, where `P'` is the
/// popcount inner product computed with the stored sign plane. When
/// `flipped`, the stored Layer-2 signs are negated, so `P' = -P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Threshold {
    pub t: i64,
    pub flipped: bool,
}

/// Integer threshold matching the frozen Layer-2 normalization exactly on
/// every reachable `P ∈ [-n_max, n_max]`.
///
/// The candidate `floor(μ − β·σ/γ)` is corrected by stepping against the
/// floating-point reference, which is monotone in `P`. The result lies in
/// `[-n_max - 1, n_max]`.
pub fn derive_threshold(params: &CnnParams, n_max: i64) -> Result<Threshold, DeployError> {
    let (gamma, beta, mu, sigma) = (
        params.gamma2,
        params.beta2,
        params.running_mean2,
        params.sigma2(),
    );
    for (name, v) in [
        ("gamma2", gamma),
        ("beta2", beta),
        ("running_mean2", mu),
        ("running_var2", sigma),
    ] {
        if !v.is_finite() {
            return Err(DeployError::NonFinite(name));
        }
    }
    if gamma == 0.0 {
        return Err(DeployError::ZeroScale);
    }
    let flipped = gamma < 0.0;
    let fires = |q: i64| {
        let p = if flipped { -q } else { q };
        params.normalize2(p as f64) > 0.0
    };
    let crossing = mu - beta * sigma / gamma;
    let estimate = if flipped { -crossing } else { crossing };
    let lo = -n_max - 1;
    let mut t = if estimate.is_nan() {
        0
    } else {
        (estimate.floor().clamp(lo as f64, n_max as f64)) as i64
    };
    while t > lo && fires(t) {
        t -= 1;
    }
    while t < n_max && !fires(t + 1) {
        t += 1;
    }
    Ok(Threshold { t, flipped })
}

/// Bytes of table + FIFO + Layer-2 planes + threshold register.
pub fn storage_bytes(p: u8, m: usize, history_len: usize) -> Result<u64, DeployError> {
    let overflow = || DeployError::Dimension("storage size overflows".into());
    if p == 0 || m == 0 || history_len == 0 {
        return Err(DeployError::Dimension(format!(
            "p = {p}, m = {m}, history_len = {history_len}"
        )));
    }
    if p >= 64 {
        return Err(DeployError::Dimension(format!("index width {p} too large")));
    }
    let table_bits = (1u64 << p)
        .checked_mul(m as u64)
        .and_then(|x| x.checked_mul(2))
        .ok_or_else(overflow)?;
    let window_bits = (history_len as u64)
        .checked_mul(m as u64)
        .and_then(|x| x.checked_mul(2))
        .ok_or_else(overflow)?;
    table_bits
        .div_ceil(8)
        .checked_add(
            window_bits
                .div_ceil(8)
                .checked_mul(2)
                .ok_or_else(overflow)?,
        )
        .and_then(|x| x.checked_add(8))
        .ok_or_else(overflow)
}

/// Deployed helper: table, Layer-2 planes and threshold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeployedHelper {
    history_len: usize,
    table: LookupTable,
    l2: BitPlanes,
    threshold: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeployedPrediction {
    pub taken: bool,
    /// Popcount inner product `P'` against the stored planes.
    pub p: i64,
}

impl DeployedHelper {
    pub fn from_ternary(params: &TernaryCnnParams) -> Result<Self, DeployError> {
        let table = build_table(params)?;
        let cp = &params.params;
        let (m, len) = (cp.m, cp.history_len);
        if cp.w2.iter().any(|x| !x.is_finite()) {
            return Err(DeployError::NonFinite("w2"));
        }
        let n_max = (m * len) as i64;
        let th = derive_threshold(cp, n_max)?;
        let codes = cp.layer2_codes();
        let mut l2 = BitPlanes::zeros(m * len);
        for age in 0..len {
            let t = len - 1 - age;
            for j in 0..m {
                l2.set(age * m + j, TernaryCode::from_i8(codes[t * m + j]));
            }
        }
        if th.flipped {
            l2.negate_signs();
        }
        Ok(Self {
            history_len: len,
            table,
            l2,
            threshold: th.t,
        })
    }

    pub fn from_parts(
        table: LookupTable,
        history_len: usize,
        l2: BitPlanes,
        threshold: i64,
    ) -> Result<Self, DeployError> {
        let n = table.m * history_len;
        if l2.len() != n {
            return Err(DeployError::Dimension(format!(
                "Layer-2 planes hold {} codes, need {n}",
                l2.len()
            )));
        }
        if threshold < -(n as i64) - 1 || threshold > n as i64 {
            return Err(DeployError::Format(format!(
                "threshold {threshold} outside [-{}, {n}]",
                n + 1
            )));
        }
        Ok(Self {
            history_len,
            table,
            l2,
            threshold,
        })
    }

    pub fn p(&self) -> u8 {
        self.table.p
    }

    pub fn m(&self) -> usize {
        self.table.m
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn table(&self) -> &LookupTable {
        &self.table
    }

    /// Layer-2 codes, age-major, as stored (signs already negated when the
    /// Layer-2 scale is negative).
    pub fn l2_planes(&self) -> &BitPlanes {
        &self.l2
    }

    pub fn threshold(&self) -> i64 {
        self.threshold
    }

    pub fn new_buffer(&self) -> FifoBuffer {
        FifoBuffer::new(self.m(), self.history_len)
    }

    pub fn update(&self, buffer: &mut FifoBuffer, ip: u64, taken: bool) -> Result<(), DeployError> {
        fifo_update(buffer, &self.table, ip, taken)
    }

    pub fn storage_bytes(&self) -> u64 {
        storage_bytes(self.p(), self.m(), self.history_len)
            .expect("dimensions validated at construction")
    }

    pub fn predict(&self, buffer: &FifoBuffer) -> Result<DeployedPrediction, DeployError> {
        if buffer.m != self.m() || buffer.history_len != self.history_len {
            return Err(DeployError::Dimension(format!(
                "buffer is {}×{}, helper {}×{}",
                buffer.history_len,
                buffer.m,
                self.history_len,
                self.m()
            )));
        }
        let (fs, fv) = (buffer.planes.sign_words(), buffer.planes.value_words());
        let (ls, lv) = (self.l2.sign_words(), self.l2.value_words());
        let mut agree = 0i64;
        let mut disagree = 0i64;
        for w in 0..fs.len() {
            let s = fs[w] ^ ls[w];
            let act = fv[w] & lv[w];
            agree += (!s & act).count_ones() as i64;
            disagree += (s & act).count_ones() as i64;
        }
        let p = agree - disagree;
        Ok(DeployedPrediction {
            taken: p > self.threshold,
            p,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cnn::{init_params, Mode};

    fn tp_params(p: u8, m: usize, len: usize, seed: u64) -> TernaryCnnParams {
        let mut cp = init_params(p, m, len, Mode::Tp, 0.5, seed);
        cp.running_mean2 = 0.7;
        cp.running_var2 = 2.0;
        cp.beta2 = 0.3;
        TernaryCnnParams::from_params(&cp).unwrap()
    }

    #[test]
    fn storage_examples() {
        assert_eq!(storage_bytes(8, 2, 200).unwrap(), 336);
        assert_eq!(storage_bytes(8, 32, 200).unwrap(), 5256);
        assert!(storage_bytes(8, 0, 200).is_err());
        assert!(storage_bytes(64, 1, 1).is_err());
        assert!(storage_bytes(60, usize::MAX, 1).is_err());
    }

    #[test]
    fn fresh_buffer_is_zero() {
        let b = FifoBuffer::new(3, 7);
        assert!(b.planes().codes().iter().all(|&c| c == TernaryCode::Zero));
        assert_eq!(b.undo_available(), 0);
    }

    #[test]
    fn rollback_bounds() {
        let h = DeployedHelper::from_ternary(&tp_params(4, 2, 5, 3)).unwrap();
        let mut b = h.new_buffer();
        let before = b.clone();
        b.rollback(0).unwrap();
        assert_eq!(b, before);
        h.update(&mut b, 0x40, true).unwrap();
        assert!(matches!(
            b.rollback(2),
            Err(DeployError::Rollback {
                requested: 2,
                available: 1
            })
        ));
        b.rollback(1).unwrap();
        assert_eq!(b.planes(), before.planes());
    }

    #[test]
    fn zero_scale_rejected() {
        let mut tp = tp_params(4, 2, 5, 3);
        tp.params.gamma2 = 0.0;
        assert!(matches!(
            DeployedHelper::from_ternary(&tp),
            Err(DeployError::ZeroScale)
        ));
    }

    #[test]
    fn negative_scale_flips_signs() {
        let mut tp = tp_params(4, 2, 5, 9);
        tp.params.gamma2 = -1.5;
        let th = derive_threshold(&tp.params, 10).unwrap();
        assert!(th.flipped);
        for p in -10..=10 {
            assert_eq!(-p > th.t, tp.params.normalize2(p as f64) > 0.0, "P = {p}");
        }
    }

    #[test]
    fn threshold_extremes() {
        let mut tp = tp_params(4, 1, 2, 1);
        // always fires
        tp.params.beta2 = 1e6;
        assert_eq!(derive_threshold(&tp.params, 2).unwrap().t, -3);
        // never fires
        tp.params.beta2 = -1e6;
        assert_eq!(derive_threshold(&tp.params, 2).unwrap().t, 2);
    }

    #[test]
    fn mismatched_buffer_rejected() {
        let h = DeployedHelper::from_ternary(&tp_params(4, 2, 5, 3)).unwrap();
        assert!(h.predict(&FifoBuffer::new(2, 6)).is_err());
        let mut b = FifoBuffer::new(3, 5);
        assert!(fifo_update(&mut b, h.table(), 1, true).is_err());
    }

    #[test]
    fn nonfinite_params_rejected() {
        let mut tp = tp_params(4, 2, 5, 3);
        tp.params.w1[0] = f64::NAN;
        assert!(matches!(
            build_table(&tp),
            Err(DeployError::NonFinite("w1"))
        ));
    }
}
