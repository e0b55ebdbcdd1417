use super::DeployError;

/// 2-bit ternary code, `(sign << 1) | value`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
#[repr(u8)]
pub enum TernaryCode {
    #[default]
    Zero = 0b00,
    Neg = 0b01,
    Pos = 0b11,
}

impl TernaryCode {
    pub fn from_i8(v: i8) -> Self {
        match v.signum() {
            1 => TernaryCode::Pos,
            -1 => TernaryCode::Neg,
            _ => TernaryCode::Zero,
        }
    }

    pub fn to_i8(self) -> i8 {
        match self {
            TernaryCode::Zero => 0,
            TernaryCode::Neg => -1,
            TernaryCode::Pos => 1,
        }
    }

    pub fn sign(self) -> bool {
        self == TernaryCode::Pos
    }

    pub fn value(self) -> bool {
        self != TernaryCode::Zero
    }

    /// Decodes a `(sign, value)` pair; `10` is illegal.
    pub fn from_bits(sign: bool, value: bool) -> Result<Self, DeployError> {
        match (sign, value) {
            (false, false) => Ok(TernaryCode::Zero),
            (false, true) => Ok(TernaryCode::Neg),
            (true, true) => Ok(TernaryCode::Pos),
            (true, false) => Err(DeployError::IllegalCode),
        }
    }

    pub fn bits(self) -> u8 {
        self as u8
    }
}

/// A vector of ternary codes stored as two bit planes (sign `S`, value `V`),
/// little-endian within 64-bit words: code `k` lives at bit `k % 64` of word
/// `k / 64`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitPlanes {
    len: usize,
    sign: Vec<u64>,
    value: Vec<u64>,
}

impl BitPlanes {
    pub fn zeros(len: usize) -> Self {
        let words = len.div_ceil(64);
        Self {
            len,
            sign: vec![0; words],
            value: vec![0; words],
        }
    }

    pub fn from_codes(codes: &[TernaryCode]) -> Self {
        let mut p = Self::zeros(codes.len());
        for (k, &c) in codes.iter().enumerate() {
            p.set(k, c);
        }
        p
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sign_words(&self) -> &[u64] {
        &self.sign
    }

    pub fn value_words(&self) -> &[u64] {
        &self.value
    }

    #[inline]
    pub fn get(&self, k: usize) -> TernaryCode {
        let (w, b) = (k / 64, k % 64);
        let s = self.sign[w] >> b & 1 == 1;
        let v = self.value[w] >> b & 1 == 1;
        // illegal pairs are never stored
        match (s, v) {
            (true, true) => TernaryCode::Pos,
            (false, true) => TernaryCode::Neg,
            _ => TernaryCode::Zero,
        }
    }

    #[inline]
    pub fn set(&mut self, k: usize, code: TernaryCode) {
        let (w, b) = (k / 64, k % 64);
        let mask = 1u64 << b;
        self.sign[w] = (self.sign[w] & !mask) | ((code.sign() as u64) << b);
        self.value[w] = (self.value[w] & !mask) | ((code.value() as u64) << b);
    }

    pub fn codes(&self) -> Vec<TernaryCode> {
        (0..self.len).map(|k| self.get(k)).collect()
    }

    pub fn negate_signs(&mut self) {
        for (s, v) in self.sign.iter_mut().zip(&self.value) {
            *s = !*s & v;
        }
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            let mask = (1u64 << rem) - 1;
            if let Some(last) = self.sign.last_mut() {
                *last &= mask;
            }
            if let Some(last) = self.value.last_mut() {
                *last &= mask;
            }
        }
    }

    /// Moves every code from index `k` to `k + by`; codes shifted past the
    /// end are dropped and the low `by` codes become zero.
    pub fn shift_up(&mut self, by: usize) {
        shift_words_up(&mut self.sign, by);
        shift_words_up(&mut self.value, by);
        self.clear_tail();
    }

    /// Moves every code from index `k` to `k - by`; the top `by` codes become
    /// zero.
    pub fn shift_down(&mut self, by: usize) {
        shift_words_down(&mut self.sign, by);
        shift_words_down(&mut self.value, by);
    }

    /// Packs a plane into bytes, bit `k` at byte `k / 8`, bit `k % 8`.
    pub fn plane_bytes(words: &[u64], len: usize) -> Vec<u8> {
        let nbytes = len.div_ceil(8);
        words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(nbytes)
            .collect()
    }

    pub fn from_plane_bytes(sign: &[u8], value: &[u8], len: usize) -> Result<Self, DeployError> {
        let mut p = Self::zeros(len);
        let load = |bytes: &[u8], words: &mut [u64]| {
            for (i, &b) in bytes.iter().enumerate() {
                words[i / 8] |= (b as u64) << (8 * (i % 8));
            }
        };
        load(sign, &mut p.sign);
        load(value, &mut p.value);
        let mut padded = p.clone();
        padded.clear_tail();
        if padded != p {
            return Err(DeployError::Format(
                "nonzero padding bits in a plane".into(),
            ));
        }
        if p.sign.iter().zip(&p.value).any(|(s, v)| s & !v != 0) {
            return Err(DeployError::IllegalCode);
        }
        Ok(p)
    }
}

fn shift_words_up(words: &mut [u64], by: usize) {
    let (ws, bs) = (by / 64, by % 64);
    let n = words.len();
    for i in (0..n).rev() {
        let src = i as isize - ws as isize;
        let hi = if src >= 0 {
            words[src as usize] << bs
        } else {
            0
        };
        let lo = if bs > 0 && src >= 1 {
            words[src as usize - 1] >> (64 - bs)
        } else {
            0
        };
        words[i] = hi | lo;
    }
}

fn shift_words_down(words: &mut [u64], by: usize) {
    let (ws, bs) = (by / 64, by % 64);
    let n = words.len();
    for i in 0..n {
        let src = i + ws;
        let lo = if src < n { words[src] >> bs } else { 0 };
        let hi = if bs > 0 && src + 1 < n {
            words[src + 1] << (64 - bs)
        } else {
            0
        };
        words[i] = lo | hi;
    }
}
